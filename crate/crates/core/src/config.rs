//! Run configuration and the two shipped profiles.
//!
//! `toy` is the profile every test uses; `paper-parity` mirrors the
//! published hyperparameters (N=256, D=768, K=36, batch 16, epochs 20,
//! GCN rate 1e-3, main rate 1e-4) and exists for shape and smoke
//! checks, not score reproduction.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphMode;

/// Every knob one run needs. Unspecified fields in a config file fall
/// back to the toy profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub profile: String,
    pub n_max: usize,
    pub d: usize,
    /// GCN depth L.
    pub l_layers: usize,
    pub k_objects: usize,
    pub per_anchor_cap: usize,
    pub min_count: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr_gcn: f64,
    pub lr_main: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub graph_mode: GraphMode,
    pub no_know: bool,
    pub no_obj: bool,
    pub no_caption: bool,
    /// Beam width; absent means greedy decoding.
    pub beam: Option<usize>,
    /// Directory holding `train.jsonl` / `val.jsonl` / `test.jsonl`.
    pub data_dir: PathBuf,
    pub kb_path: Option<PathBuf>,
    pub checkpoint_path: PathBuf,
    pub detections_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl RunConfig {
    pub fn toy() -> Self {
        RunConfig {
            profile: "toy".into(),
            n_max: 32,
            d: 64,
            l_layers: 2,
            k_objects: 4,
            per_anchor_cap: 2,
            min_count: 1,
            batch: 4,
            epochs: 150,
            lr_gcn: 3e-3,
            lr_main: 3e-3,
            weight_decay: 0.0,
            seed: 13,
            graph_mode: GraphMode::Rules,
            no_know: false,
            no_obj: false,
            no_caption: false,
            beam: None,
            data_dir: PathBuf::from("fixtures/dataset"),
            kb_path: Some(PathBuf::from("fixtures/kb.tsv")),
            checkpoint_path: PathBuf::from("out/toy.ckpt.json"),
            detections_path: None,
        }
    }

    pub fn paper_parity() -> Self {
        RunConfig {
            profile: "paper-parity".into(),
            n_max: 256,
            d: 768,
            l_layers: 2,
            k_objects: 36,
            per_anchor_cap: 5,
            min_count: 1,
            batch: 16,
            epochs: 20,
            lr_gcn: 1e-3,
            lr_main: 1e-4,
            weight_decay: 0.01,
            seed: 13,
            graph_mode: GraphMode::Rules,
            no_know: false,
            no_obj: false,
            no_caption: false,
            beam: None,
            data_dir: PathBuf::from("data"),
            kb_path: Some(PathBuf::from("fixtures/kb.tsv")),
            checkpoint_path: PathBuf::from("out/paper-parity.ckpt.json"),
            detections_path: None,
        }
    }

    pub fn from_profile(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper-parity" => Ok(Self::paper_parity()),
            other => Err(Error::Config(format!(
                "unknown profile '{other}' (expected toy or paper-parity)"
            ))),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let display = path.as_ref().display().to_string();
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&display, e))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{display}: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let positives: [(&str, usize); 8] = [
            ("n_max", self.n_max),
            ("d", self.d),
            ("l_layers", self.l_layers),
            ("k_objects", self.k_objects),
            ("per_anchor_cap", self.per_anchor_cap),
            ("min_count", self.min_count),
            ("batch", self.batch),
            ("epochs", self.epochs),
        ];
        for (name, value) in positives {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_max < 8 {
            return Err(Error::Config("n_max must be at least 8".into()));
        }
        for (name, value) in [
            ("lr_gcn", self.lr_gcn),
            ("lr_main", self.lr_main),
        ] {
            if !(value > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.beam == Some(0) {
            return Err(Error::Config("beam width must be >= 1".into()));
        }
        Ok(())
    }

    /// One-line JSON echo embedded in every artifact a run produces.
    pub fn echo(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn split_path(&self, split: crate::corpus::SplitName) -> PathBuf {
        self.data_dir.join(format!("{split}.jsonl"))
    }

    pub fn vocab_path(&self) -> PathBuf {
        sibling_with_suffix(&self.checkpoint_path, ".vocab")
    }

    pub fn loss_log_path(&self) -> PathBuf {
        sibling_with_suffix(&self.checkpoint_path, ".losses.tsv")
    }
}

fn sibling_with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into());
    name.push_str(suffix);
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        RunConfig::toy().validate().unwrap();
        RunConfig::paper_parity().validate().unwrap();
        assert_eq!(RunConfig::paper_parity().n_max, 256);
        assert_eq!(RunConfig::paper_parity().d, 768);
        assert_eq!(RunConfig::paper_parity().k_objects, 36);
        assert_eq!(RunConfig::paper_parity().batch, 16);
        assert_eq!(RunConfig::paper_parity().epochs, 20);
        assert_eq!(RunConfig::paper_parity().lr_gcn, 1e-3);
        assert_eq!(RunConfig::paper_parity().lr_main, 1e-4);
    }

    #[test]
    fn partial_config_file_falls_back_to_toy() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        use std::io::Write;
        write!(f, r#"{{"seed": 99, "d": 16}}"#).unwrap();
        let config = RunConfig::load(f.path()).unwrap();
        assert_eq!(config.seed, 99);
        assert_eq!(config.d, 16);
        assert_eq!(config.n_max, RunConfig::toy().n_max);
    }

    #[test]
    fn zero_values_rejected() {
        let mut config = RunConfig::toy();
        config.batch = 0;
        assert!(config.validate().is_err());
        let mut config = RunConfig::toy();
        config.lr_main = 0.0;
        assert!(config.validate().is_err());
    }

    #[test]
    fn echo_round_trips() {
        let config = RunConfig::toy();
        let echoed: RunConfig = serde_json::from_str(&config.echo()).unwrap();
        assert_eq!(config, echoed);
    }

    #[test]
    fn sibling_paths() {
        let config = RunConfig::toy();
        assert!(config.vocab_path().to_string_lossy().ends_with(".ckpt.json.vocab"));
        assert!(config
            .loss_log_path()
            .to_string_lossy()
            .ends_with(".ckpt.json.losses.tsv"));
    }
}
