//! musegraph: train, run, and evaluate the multi-source semantic
//! graph explanation pipeline from the command line.
//!
//! `MUSEGRAPH_CONFIG_DIR` sets the directory against which a relative
//! `--config` path is resolved when it does not exist locally.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use musegraph_core::checkpoint::load_checkpoint;
use musegraph_core::config::RunConfig;
use musegraph_core::corpus::{load_dataset, Sample, SplitName};
use musegraph_core::graph::GraphMode;
use musegraph_core::pipeline::{
    run_evaluate, run_generate, run_inspect_graph, run_kb_build, run_stats, run_train,
    PipelineContext,
};
use musegraph_core::assembly::Vocabulary;
use musegraph_core::reasoner::ModelParams;
use musegraph_core::Scalar;

#[derive(Parser)]
#[command(name = "musegraph", version, about)]
struct Cli {
    #[command(flatten)]
    common: CommonOpts,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Config file (JSON); unspecified fields fall back to the profile
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in profile to start from
    #[arg(long, global = true, default_value = "toy")]
    profile: String,

    /// Override the run seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Bypass the graph: the decoder consumes H directly
    #[arg(long, global = true, conflicts_with = "full_graph")]
    no_graph: bool,

    /// Replace the rule-built graph with a complete graph
    #[arg(long, global = true)]
    full_graph: bool,

    /// Drop retrieved knowledge concepts before assembly
    #[arg(long, global = true)]
    no_know: bool,

    /// Drop object metadata before assembly
    #[arg(long, global = true)]
    no_obj: bool,

    /// Drop the caption before assembly
    #[arg(long, global = true)]
    no_caption: bool,

    /// Beam width for generation (default greedy)
    #[arg(long, global = true)]
    beam: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a raw head<TAB>relation<TAB>tail<TAB>weight file
    KbBuild {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train on the configured train split and write checkpoint artifacts
    Train,
    /// Generate explanations for a JSONL sample file
    Generate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score a generations file against a reference split
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// Also write the JSON report here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the rule-labeled edge list for one sample
    InspectGraph {
        #[arg(long)]
        id: String,
    },
    /// Per-split dataset statistics
    Stats,
}

fn resolve_config(common: &CommonOpts) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let resolved = if path.exists() {
                path.clone()
            } else if path.is_relative() {
                match std::env::var_os("MUSEGRAPH_CONFIG_DIR") {
                    Some(dir) => PathBuf::from(dir).join(path),
                    None => path.clone(),
                }
            } else {
                path.clone()
            };
            RunConfig::load(&resolved)
                .with_context(|| format!("loading config {}", resolved.display()))?
        }
        None => RunConfig::from_profile(&common.profile)?,
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if common.no_graph {
        config.graph_mode = GraphMode::SelfLoops;
    } else if common.full_graph {
        config.graph_mode = GraphMode::Full;
    }
    config.no_know |= common.no_know;
    config.no_obj |= common.no_obj;
    config.no_caption |= common.no_caption;
    if let Some(beam) = common.beam {
        config.beam = Some(beam);
    }
    config.validate()?;
    Ok(config)
}

fn find_sample(config: &RunConfig, id: &str) -> Result<Sample> {
    for split in [SplitName::Train, SplitName::Val, SplitName::Test] {
        let path = config.split_path(split);
        if !path.exists() {
            continue;
        }
        let loaded = load_dataset(&path, split)?;
        if let Some(sample) = loaded.samples.into_iter().find(|s| s.id == id) {
            return Ok(sample);
        }
    }
    bail!("sample id '{id}' not found in any split under {}", config.data_dir.display());
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::KbBuild { input, output } => {
            let edges = run_kb_build(&input, &output)?;
            println!("wrote {} edges to {}", edges, output.display());
        }
        Command::Train => {
            let config = resolve_config(&cli.common)?;
            let outcome = run_train(&config, |entry| {
                println!("epoch {}\tloss {}", entry.epoch, entry.mean_loss);
            })?;
            println!(
                "trained {} epochs; checkpoint {}, vocab {}, loss log {}",
                outcome.logs.len(),
                config.checkpoint_path.display(),
                config.vocab_path().display(),
                config.loss_log_path().display()
            );
        }
        Command::Generate { input, output } => {
            let config = resolve_config(&cli.common)?;
            let count = run_generate(&config, &input, &output)?;
            println!("generated {} explanations into {}", count, output.display());
        }
        Command::Evaluate {
            generated,
            references,
            out,
        } => {
            let outcome = run_evaluate(&generated, &references)?;
            print!("{}", outcome.report.render_table());
            let json = serde_json::json!({
                "report": outcome.report,
                "config": serde_json::from_str::<serde_json::Value>(&outcome.config_echo)?,
            })
            .to_string();
            println!("{json}");
            if let Some(path) = out {
                std::fs::write(&path, format!("{json}\n"))
                    .with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::InspectGraph { id } => {
            let config = resolve_config(&cli.common)?;
            let sample = find_sample(&config, &id)?;
            // a trained checkpoint refines R3 linking; fall back to
            // seeded initialization when none has been written yet
            let (ctx, params) = if config.checkpoint_path.exists() {
                let (_, params) = load_checkpoint(&config.checkpoint_path)?;
                let vocab = Vocabulary::read_from(config.vocab_path())?;
                (PipelineContext::from_config(config, vocab)?, params)
            } else {
                let train_split =
                    load_dataset(config.split_path(SplitName::Train), SplitName::Train)?;
                let vocab = musegraph_core::assembly::build_vocab(&train_split, config.min_count);
                let ctx = PipelineContext::from_config(config, vocab)?;
                let params = ModelParams::<Scalar>::init(ctx.dims(), ctx.config.seed);
                (ctx, params)
            };
            print!("{}", run_inspect_graph(&ctx, &params, &sample)?);
        }
        Command::Stats => {
            let config = resolve_config(&cli.common)?;
            let stats = run_stats(&config)?;
            println!("split   samples  avg_caption_len  vocab");
            for s in &stats {
                println!(
                    "{:<7} {:>7}  {:>15.2}  {:>5}",
                    s.split, s.samples, s.mean_caption_len, s.vocab_size
                );
            }
            println!("{}", serde_json::to_string(&stats)?);
        }
    }
    Ok(())
}
