//! End-to-end orchestration: detect objects, retrieve knowledge,
//! assemble, encode, reason over the graph, decode, and the train /
//! generate / evaluate / inspect entry points the CLI wraps.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assembly::{
    assemble_parts, build_vocab, tokenize, AssemblyParts, TokenSequence, Vocabulary, EOS_ID,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::corpus::{check_splits_disjoint, dataset_stats, load_dataset, Sample, SplitName, SplitStats};
use crate::detector::{detect_objects, DetectorBackend, FixtureBackend, ObjectMeta};
use crate::error::{Error, Result};
use crate::graph::{build_graph, normalize, GraphMode, SemanticGraph};
use crate::knowledge::{
    identify_anchors, load_concept_store, retrieve_neighbors, AnchorSet, ConceptStore, SourceKind,
};
use crate::metrics::{evaluate_split, MetricReport};
use crate::reasoner::decode::{generate_ids, DecodeStrategy};
use crate::reasoner::train::{train, EpochLog, TrainItem, TrainSettings};
use crate::reasoner::{
    encode, forward_sample, fuse, gcn_forward, ForwardTrace, ModelDims, ModelParams,
};
use crate::tensor::Matrix;
use crate::Scalar;

/// Everything a run needs besides the model parameters.
pub struct PipelineContext {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub store: ConceptStore,
    pub backend: Box<dyn DetectorBackend>,
}

impl PipelineContext {
    /// Builds a context from a config: loads the concept store and the
    /// detections sidecar when configured (and not ablated away).
    pub fn from_config(config: RunConfig, vocab: Vocabulary) -> Result<Self> {
        let store = match (&config.kb_path, config.no_know) {
            (Some(path), false) if path.exists() => load_concept_store(path)?,
            _ => ConceptStore::new(),
        };
        let backend: Box<dyn DetectorBackend> = match &config.detections_path {
            Some(path) if path.exists() => Box::new(FixtureBackend::load(path)?),
            _ => Box::new(FixtureBackend::empty()),
        };
        Ok(PipelineContext {
            config,
            vocab,
            store,
            backend,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab: self.vocab.len(),
            d: self.config.d,
            gcn_layers: self.config.l_layers,
            n_max: self.config.n_max,
        }
    }
}

/// A sample after the pre-model stages, plus what each stage produced.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    pub objects: Vec<ObjectMeta>,
    pub anchors: AnchorSet,
    pub neighbors: Vec<Vec<String>>,
    pub seq: TokenSequence,
}

/// Runs detection, anchor identification, retrieval, and assembly for
/// one sample, honoring the ablation flags.
pub fn prepare_sample(ctx: &PipelineContext, sample: &Sample) -> Result<PreparedSample> {
    let config = &ctx.config;

    let objects = if config.no_obj {
        Vec::new()
    } else {
        detect_objects(sample, ctx.backend.as_ref(), config.k_objects)?
    };

    let caption_tokens: Vec<String> = if config.no_caption {
        Vec::new()
    } else {
        tokenize(&sample.caption)
    };

    let (anchors, neighbors) = if config.no_know || ctx.store.is_empty() {
        (AnchorSet::default(), Vec::new())
    } else {
        let mut merged = identify_anchors(&caption_tokens, &ctx.store, SourceKind::Caption);
        // object metadata is scanned object by object so bigrams never
        // straddle two objects; spans are then offset into the shared
        // object token stream
        let mut offset = 0usize;
        for obj in &objects {
            let mut words = tokenize(&obj.class);
            words.extend(tokenize(&obj.attribute));
            let set = identify_anchors(&words, &ctx.store, SourceKind::Object);
            for mut anchor in set.anchors {
                anchor.span = (anchor.span.0 + offset, anchor.span.1 + offset);
                merged.anchors.push(anchor);
            }
            offset += words.len();
        }
        let neighbors = retrieve_neighbors(&merged, &ctx.store, config.per_anchor_cap)?;
        (merged, neighbors)
    };

    let parts = AssemblyParts {
        caption_tokens,
        objects: objects.clone(),
        anchors: anchors.clone(),
        neighbors: neighbors.clone(),
    };
    if !config.no_caption && parts.caption_tokens.is_empty() {
        return Err(Error::Assembly(format!(
            "sample '{}' has an empty caption",
            sample.id
        )));
    }
    let seq = assemble_parts(&parts, &ctx.vocab, config.n_max)?;
    Ok(PreparedSample {
        id: sample.id.clone(),
        objects,
        anchors,
        neighbors,
        seq,
    })
}

/// Target ids for teacher forcing: explanation tokens plus EOS.
pub fn target_ids(explanation: &str, vocab: &Vocabulary) -> Vec<usize> {
    let mut ids: Vec<usize> = tokenize(explanation).iter().map(|t| vocab.id(t)).collect();
    ids.push(EOS_ID);
    ids
}

pub fn prepare_train_items(
    ctx: &PipelineContext,
    samples: &[Sample],
) -> Result<Vec<TrainItem>> {
    samples
        .iter()
        .map(|sample| {
            let explanation = sample.explanation.as_ref().ok_or_else(|| {
                Error::Training(format!("sample '{}' has no explanation", sample.id))
            })?;
            let prepared = prepare_sample(ctx, sample)?;
            Ok(TrainItem {
                id: prepared.id,
                seq: prepared.seq,
                targets: target_ids(explanation, &ctx.vocab),
            })
        })
        .collect()
}

/// The fused representation the decoder consumes, along with the graph
/// that produced it (self-loops only under the graph bypass).
pub fn fused_representation(
    seq: &TokenSequence,
    params: &ModelParams<Scalar>,
    mode: GraphMode,
) -> Result<(Matrix<Scalar>, SemanticGraph)> {
    let h = encode(seq, params);
    let graph = build_graph(seq, &h, mode);
    let r = match mode {
        GraphMode::SelfLoops => h,
        _ => {
            let adj = normalize::<Scalar>(&graph);
            let g_last = gcn_forward(&h, &adj, params);
            fuse(&h, &g_last)?
        }
    };
    Ok((r, graph))
}

/// Full traced forward pass for one sample against its gold
/// explanation; the ablation integrity checks compare these.
pub fn traced_forward(
    ctx: &PipelineContext,
    params: &ModelParams<Scalar>,
    sample: &Sample,
) -> Result<(PreparedSample, ForwardTrace<Scalar>)> {
    let explanation = sample.explanation.as_ref().ok_or_else(|| {
        Error::Training(format!("sample '{}' has no explanation", sample.id))
    })?;
    let prepared = prepare_sample(ctx, sample)?;
    let targets = target_ids(explanation, &ctx.vocab);
    let fwd = forward_sample(&prepared.seq, &targets, params, ctx.config.graph_mode)?;
    Ok((prepared, fwd.trace()))
}

/// End-to-end explanation for one sample with frozen parameters.
pub fn explain(
    ctx: &PipelineContext,
    params: &ModelParams<Scalar>,
    sample: &Sample,
) -> Result<String> {
    let prepared = prepare_sample(ctx, sample)?;
    let (r, _) = fused_representation(&prepared.seq, params, ctx.config.graph_mode)?;
    let strategy = match ctx.config.beam {
        Some(width) => DecodeStrategy::Beam(width),
        None => DecodeStrategy::Greedy,
    };
    let ids = generate_ids(
        &r,
        prepared.seq.true_len,
        params,
        strategy,
        ctx.config.n_max,
    )?;
    Ok(ids
        .iter()
        .map(|&id| ctx.vocab.token(id))
        .collect::<Vec<_>>()
        .join(" "))
}

// ---------------------------------------------------------------------------
// run entry points

pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub vocab: Vocabulary,
    pub params: ModelParams<Scalar>,
}

/// Trains from the config's train split and writes the checkpoint,
/// vocabulary, and loss log next to `checkpoint_path`. `on_epoch`
/// receives each epoch line for streaming.
pub fn run_train(
    config: &RunConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let train_split = load_dataset(config.split_path(SplitName::Train), SplitName::Train)?;
    if train_split.samples.is_empty() {
        return Err(Error::Training("train split is empty".into()));
    }
    let val_path = config.split_path(SplitName::Val);
    if val_path.exists() {
        let val_split = load_dataset(&val_path, SplitName::Val)?;
        check_splits_disjoint(&[&train_split, &val_split])?;
    }

    let vocab = build_vocab(&train_split, config.min_count);
    let ctx = PipelineContext::from_config(config.clone(), vocab)?;
    let items = prepare_train_items(&ctx, &train_split.samples)?;

    let mut params = ModelParams::<Scalar>::init(ctx.dims(), config.seed);
    let settings = TrainSettings {
        batch: config.batch,
        epochs: config.epochs,
        lr_main: config.lr_main,
        lr_gcn: config.lr_gcn,
        weight_decay: config.weight_decay,
        seed: config.seed,
        mode: config.graph_mode,
    };

    if let Some(parent) = config.checkpoint_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
    }
    let log_path = config.loss_log_path();
    let mut log_file =
        File::create(&log_path).map_err(|e| Error::io(log_path.display().to_string(), e))?;
    writeln!(log_file, "# config: {}", config.echo())
        .and_then(|_| writeln!(log_file, "epoch\tmean_loss"))
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;

    let logs = train(&mut params, &items, &settings, |entry| {
        let _ = writeln!(log_file, "{}\t{}", entry.epoch, entry.mean_loss);
        on_epoch(entry);
    })?;

    save_checkpoint(&config.checkpoint_path, config, &params)?;
    ctx.vocab.write_to(config.vocab_path())?;
    Ok(TrainOutcome {
        logs,
        vocab: ctx.vocab,
        params,
    })
}

#[derive(Serialize, Deserialize)]
pub struct GenerationHeader {
    pub config: RunConfig,
    pub beam: Option<usize>,
}

#[derive(Serialize, Deserialize)]
pub struct GenerationRecord {
    pub id: String,
    pub explanation: String,
}

/// Generates explanations for every sample in `input_path` (JSON
/// lines, explanation optional) and writes a header line followed by
/// one record per sample, preserving input order.
pub fn run_generate(
    config: &RunConfig,
    input_path: impl AsRef<Path>,
    output_path: impl AsRef<Path>,
) -> Result<usize> {
    config.validate()?;
    let (ckpt_config, params) = load_checkpoint(&config.checkpoint_path)?;
    for (name, ours, theirs) in [
        ("d", config.d, ckpt_config.d),
        ("l_layers", config.l_layers, ckpt_config.l_layers),
        ("n_max", config.n_max, ckpt_config.n_max),
    ] {
        if ours != theirs {
            return Err(Error::Config(format!(
                "config {name}={ours} disagrees with checkpoint {name}={theirs}"
            )));
        }
    }
    let vocab = Vocabulary::read_from(config.vocab_path())?;
    if vocab.len() != params.dims.vocab {
        return Err(Error::Checkpoint(format!(
            "vocabulary has {} entries but checkpoint embeds {}",
            vocab.len(),
            params.dims.vocab
        )));
    }
    let ctx = PipelineContext::from_config(config.clone(), vocab)?;
    let input = load_dataset(input_path, SplitName::Test)?;

    let display = output_path.as_ref().display().to_string();
    let mut out = File::create(output_path.as_ref()).map_err(|e| Error::io(&display, e))?;
    let header = GenerationHeader {
        config: config.clone(),
        beam: config.beam,
    };
    writeln!(
        out,
        "{}",
        serde_json::to_string(&header).expect("header serializes")
    )
    .map_err(|e| Error::io(&display, e))?;
    for sample in &input.samples {
        let explanation = explain(&ctx, &params, sample)?;
        let record = GenerationRecord {
            id: sample.id.clone(),
            explanation,
        };
        writeln!(
            out,
            "{}",
            serde_json::to_string(&record).expect("record serializes")
        )
        .map_err(|e| Error::io(&display, e))?;
    }
    Ok(input.samples.len())
}

/// Reads a generations file back: header plus id-keyed records.
pub fn read_generations(
    path: impl AsRef<Path>,
) -> Result<(GenerationHeader, BTreeMap<String, String>)> {
    let display = path.as_ref().display().to_string();
    let file = File::open(path.as_ref()).map_err(|e| Error::io(&display, e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Evaluation(format!("{display}: missing header line")))?
        .map_err(|e| Error::io(&display, e))?;
    let header: GenerationHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Evaluation(format!("{display}:1: bad header: {e}")))?;
    let mut records = BTreeMap::new();
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: GenerationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Evaluation(format!("{display}:{}: {e}", idx + 2)))?;
        records.insert(record.id, record.explanation);
    }
    Ok((header, records))
}

#[derive(Debug)]
pub struct EvaluateOutcome {
    pub report: MetricReport,
    pub config_echo: String,
}

/// Scores a generations file against a reference split file.
pub fn run_evaluate(
    generated_path: impl AsRef<Path>,
    reference_path: impl AsRef<Path>,
) -> Result<EvaluateOutcome> {
    let (header, generated) = read_generations(generated_path)?;
    let references = load_dataset(reference_path, SplitName::Test)?;
    let report = evaluate_split(&generated, &references)?;
    Ok(EvaluateOutcome {
        report,
        config_echo: header.config.echo(),
    })
}

/// Rule-labeled edge list for one sample, one `i<TAB>j<TAB>RULE` line
/// per (rule, edge), preceded by a config echo comment.
pub fn run_inspect_graph(
    ctx: &PipelineContext,
    params: &ModelParams<Scalar>,
    sample: &Sample,
) -> Result<String> {
    let prepared = prepare_sample(ctx, sample)?;
    let h = encode(&prepared.seq, params);
    let graph = build_graph(&prepared.seq, &h, ctx.config.graph_mode);
    let mut out = format!("# config: {}\n", ctx.config.echo());
    for (i, j, rule) in graph.labeled_edges() {
        out.push_str(&format!("{i}\t{j}\t{}\n", rule.label()));
    }
    Ok(out)
}

/// Per-split statistics for every split file present in `data_dir`.
pub fn run_stats(config: &RunConfig) -> Result<Vec<SplitStats>> {
    let mut loaded = Vec::new();
    for split in [SplitName::Train, SplitName::Val, SplitName::Test] {
        let path = config.split_path(split);
        if path.exists() {
            loaded.push(load_dataset(&path, split)?);
        }
    }
    if loaded.is_empty() {
        return Err(Error::Config(format!(
            "no split files found under {}",
            config.data_dir.display()
        )));
    }
    check_splits_disjoint(&loaded.iter().collect::<Vec<_>>())?;
    loaded.iter().map(dataset_stats).collect()
}

/// Normalizes a raw knowledge TSV into canonical form (lowercased
/// labels, duplicates dropped, heads sorted); returns the edge count.
pub fn run_kb_build(input: impl AsRef<Path>, output: impl AsRef<Path>) -> Result<usize> {
    let store = load_concept_store(input)?;
    let display = output.as_ref().display().to_string();
    let mut out = File::create(output.as_ref()).map_err(|e| Error::io(&display, e))?;
    for (head, edge) in store.iter_edges() {
        writeln!(
            out,
            "{head}\t{}\t{}\t{}",
            edge.relation, edge.neighbor, edge.weight
        )
        .map_err(|e| Error::io(&display, e))?;
    }
    Ok(store.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::DatasetSplit;

    fn toy_samples() -> Vec<Sample> {
        vec![
            Sample {
                id: "s1".into(),
                caption: "lovely red light at night".into(),
                objects: vec![ObjectMeta::new("building", "luminous", 0.9)],
                explanation: Some("the light is annoying".into()),
                image_ref: None,
            },
            Sample {
                id: "s2".into(),
                caption: "great sunny day".into(),
                objects: vec![],
                explanation: Some("the weather is bad".into()),
                image_ref: None,
            },
        ]
    }

    fn toy_store() -> ConceptStore {
        let mut store = ConceptStore::new();
        store.insert("light", "related_to", "bright", 0.9);
        store.insert("light", "related_to", "lamp", 0.5);
        store.insert("luminous", "related_to", "bright", 0.8);
        store
    }

    fn toy_ctx() -> PipelineContext {
        let samples = toy_samples();
        let split = DatasetSplit {
            name: SplitName::Train,
            samples,
        };
        let vocab = build_vocab(&split, 1);
        let mut config = RunConfig::toy();
        config.d = 16;
        config.n_max = 16;
        PipelineContext {
            config,
            vocab,
            store: toy_store(),
            backend: Box::new(FixtureBackend::empty()),
        }
    }

    #[test]
    fn prepare_sample_runs_all_stages() {
        let ctx = toy_ctx();
        let prepared = prepare_sample(&ctx, &toy_samples()[0]).unwrap();
        assert_eq!(prepared.objects.len(), 1);
        // "light" in caption and "luminous" in the object attribute
        assert!(prepared
            .anchors
            .anchors
            .iter()
            .any(|a| a.label == "light" && a.kind == SourceKind::Caption));
        assert!(prepared
            .anchors
            .anchors
            .iter()
            .any(|a| a.label == "luminous" && a.kind == SourceKind::Object));
        assert!(!prepared.seq.anchor_links.is_empty());
        prepared.seq.check_invariants().unwrap();
    }

    #[test]
    fn ablations_drop_their_source() {
        let samples = toy_samples();

        let mut ctx = toy_ctx();
        ctx.config.no_obj = true;
        let prepared = prepare_sample(&ctx, &samples[0]).unwrap();
        assert!(prepared.objects.is_empty());
        assert!(prepared
            .seq
            .tags
            .iter()
            .all(|t| *t != crate::assembly::SourceTag::ObjClass));

        let mut ctx = toy_ctx();
        ctx.config.no_know = true;
        let prepared = prepare_sample(&ctx, &samples[0]).unwrap();
        assert!(prepared.seq.anchor_links.is_empty());
        assert!(prepared
            .seq
            .tags
            .iter()
            .all(|t| *t != crate::assembly::SourceTag::Knowledge));

        let mut ctx = toy_ctx();
        ctx.config.no_caption = true;
        let prepared = prepare_sample(&ctx, &samples[0]).unwrap();
        assert!(prepared
            .seq
            .tags
            .iter()
            .all(|t| *t != crate::assembly::SourceTag::Caption));
        // object anchors survive without a caption
        assert!(prepared
            .anchors
            .anchors
            .iter()
            .all(|a| a.kind == SourceKind::Object));
    }

    #[test]
    fn explain_produces_tokens_from_vocab() {
        let ctx = toy_ctx();
        let params = ModelParams::<Scalar>::init(ctx.dims(), 3);
        let text = explain(&ctx, &params, &toy_samples()[1]).unwrap();
        // untrained output is arbitrary but must be well-formed
        for token in text.split_whitespace() {
            assert_ne!(token, crate::assembly::BOS_TOKEN);
            assert_ne!(token, crate::assembly::EOS_TOKEN);
        }
    }

    #[test]
    fn inspect_graph_lists_rules() {
        let ctx = toy_ctx();
        let params = ModelParams::<Scalar>::init(ctx.dims(), 3);
        let listing = run_inspect_graph(&ctx, &params, &toy_samples()[0]).unwrap();
        assert!(listing.starts_with("# config:"));
        assert!(listing.contains("\tR1\n"));
        assert!(listing.contains("\tSELF\n"));
        assert!(listing.contains("\tR4\n"));
        let r4_lines = listing.lines().filter(|l| l.ends_with("\tR4")).count();
        let prepared = prepare_sample(&ctx, &toy_samples()[0]).unwrap();
        assert_eq!(r4_lines, prepared.seq.anchor_links.len());
    }

    #[test]
    fn caption_only_sample_has_only_r1_and_self() {
        let mut ctx = toy_ctx();
        ctx.config.no_know = true;
        let params = ModelParams::<Scalar>::init(ctx.dims(), 3);
        let listing = run_inspect_graph(&ctx, &params, &toy_samples()[1]).unwrap();
        for line in listing.lines().skip(1) {
            let rule = line.rsplit('\t').next().unwrap();
            assert!(rule == "R1" || rule == "SELF", "unexpected rule {rule}");
        }
    }
}
