//! Checkpoint container: one JSON document holding a format version,
//! the config echo, and every parameter tensor with its shape header.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::num::Real;
use crate::reasoner::{ModelDims, ModelParams};
use crate::tensor::Matrix;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: (usize, usize),
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    scalar: String,
    config: RunConfig,
    vocab_size: usize,
    tensors: Vec<TensorRecord>,
}

pub fn save_checkpoint<R: Real>(
    path: impl AsRef<Path>,
    config: &RunConfig,
    params: &ModelParams<R>,
) -> Result<()> {
    let tensors = params
        .tensors()
        .into_iter()
        .map(|(info, tensor)| TensorRecord {
            name: info.name,
            shape: (tensor.rows(), tensor.cols()),
            data: tensor.data().iter().map(|&v| Real::to_f64(v)).collect(),
        })
        .collect();
    let file = CheckpointFile {
        format_version: FORMAT_VERSION,
        scalar: std::any::type_name::<R>().to_string(),
        config: config.clone(),
        vocab_size: params.dims.vocab,
        tensors,
    };
    let display = path.as_ref().display().to_string();
    let json = serde_json::to_string(&file)
        .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
    std::fs::write(path.as_ref(), json).map_err(|e| Error::io(&display, e))?;
    Ok(())
}

/// Loads a checkpoint into pipeline precision. Shapes are validated
/// against the embedded config.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(RunConfig, ModelParams<f64>)> {
    let display = path.as_ref().display().to_string();
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&display, e))?;
    let file: CheckpointFile = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{display}: {e}")))?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{display}: format version {} unsupported (expected {FORMAT_VERSION})",
            file.format_version
        )));
    }
    let dims = ModelDims {
        vocab: file.vocab_size,
        d: file.config.d,
        gcn_layers: file.config.l_layers,
        n_max: file.config.n_max,
    };
    let mut params = ModelParams::<f64>::zeros(dims);
    let mut records: std::collections::BTreeMap<String, TensorRecord> = file
        .tensors
        .into_iter()
        .map(|t| (t.name.clone(), t))
        .collect();
    for (info, tensor) in params.tensors_mut() {
        let record = records.remove(&info.name).ok_or_else(|| {
            Error::Checkpoint(format!("{display}: missing tensor '{}'", info.name))
        })?;
        if record.shape != (tensor.rows(), tensor.cols()) {
            return Err(Error::Checkpoint(format!(
                "{display}: tensor '{}' has shape {:?}, expected {:?}",
                info.name,
                record.shape,
                (tensor.rows(), tensor.cols())
            )));
        }
        *tensor = Matrix::from_vec(record.shape.0, record.shape.1, record.data);
    }
    if let Some(extra) = records.keys().next() {
        return Err(Error::Checkpoint(format!(
            "{display}: unexpected tensor '{extra}'"
        )));
    }
    Ok((file.config, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut config = RunConfig::toy();
        config.d = 8;
        config.l_layers = 2;
        config.n_max = 8;
        let dims = ModelDims {
            vocab: 10,
            d: 8,
            gcn_layers: 2,
            n_max: 8,
        };
        let params = ModelParams::<f64>::init(dims, 77);
        let f = tempfile::NamedTempFile::new().unwrap();
        save_checkpoint(f.path(), &config, &params).unwrap();
        let (config2, params2) = load_checkpoint(f.path()).unwrap();
        assert_eq!(config, config2);
        assert_eq!(params, params2); // bit-exact via shortest-round-trip floats
    }

    #[test]
    fn version_mismatch_rejected() {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(
            f.path(),
            r#"{"format_version":999,"scalar":"f64","config":{},"vocab_size":5,"tensors":[]}"#,
        )
        .unwrap();
        let err = load_checkpoint(f.path()).unwrap_err();
        assert!(err.to_string().contains("format version"));
    }
}
