//! Command-line surface: corpus generation, training, streaming generation,
//! benchmarking, and ablation sweeps.
//!
//! Every command is deterministic given `--seed`, echoes its resolved
//! configuration next to its outputs, and prints produced data paths on
//! stdout (diagnostics go to stderr). Exit codes: 0 success, 2 usage,
//! 1 runtime failure.

pub mod commands;
pub mod config;
pub mod svg;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use commands::{BudgetSpec, GenerateArgs};
use config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "teller",
    about = "Streaming audio-driven motion generation: tokenizer, token model, refiner, and a latency-accounted pipeline",
    version
)]
pub struct Cli {
    /// TOML config file (defaults < file < --set overrides).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override one config key, e.g. `--set epochs=8` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,

    /// Master seed override (same as `--set seed=N`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic audio→motion corpus with a manifest.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of clips (same as `--set clips=N`).
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Train a component.
    Train {
        #[command(subcommand)]
        which: TrainTarget,
    },
    /// Stream a WAV file into motion (plus trace and optional dumps).
    Generate {
        /// Input mono 16-bit PCM WAV.
        #[arg(long)]
        audio: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Codec checkpoint (.trvq); seeded init when omitted.
        #[arg(long)]
        codec: Option<PathBuf>,
        /// Token-model checkpoint (.tarm); seeded init when omitted.
        #[arg(long)]
        ar: Option<PathBuf>,
        /// Refiner checkpoint (.tetm); pass-through when omitted.
        #[arg(long)]
        etm: Option<PathBuf>,
        /// Top-k sampling cutoff (same as `--set topk=K`).
        #[arg(long)]
        topk: Option<usize>,
        /// Also dump refined feature volumes.
        #[arg(long)]
        features: bool,
        /// Also dump the per-token decode trace (JSON lines).
        #[arg(long)]
        decode_trace: bool,
        /// Run the staged version with bounded queues instead of inline.
        #[arg(long)]
        pipelined: bool,
    },
    /// Real-time budget arithmetic or a measured end-to-end run.
    Bench(BenchArgs),
    /// Ablation sweeps (token budget, or single- vs dual-head).
    Sweep {
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated tokens-per-window list for the codec sweep.
        #[arg(long, default_value = "8,16,32,64")]
        tokens: String,
        /// Run the head-count ablation instead of the token sweep.
        #[arg(long)]
        heads: bool,
        /// Corpus directory (head ablation).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Trained codec checkpoint (head ablation).
        #[arg(long)]
        codec: Option<PathBuf>,
    },
    /// Re-emit a latency trace CSV (validating it), optionally with an SVG.
    TraceExport {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        svg: bool,
    },
}

#[derive(Subcommand, Debug)]
pub enum TrainTarget {
    /// Residual-quantizer codec.
    Rvq {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Residual stages (same as `--set residual_stages=N`).
        #[arg(long)]
        stages: Option<usize>,
        /// Epochs (same as `--set epochs=N`).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Autoregressive token model (needs a trained codec).
    Ar {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Head mode: `dual` or `single`.
        #[arg(long)]
        heads: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Temporal refiner (trains on built-in synthetic sequences).
    Etm {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate a stage budget arithmetically.
    #[arg(long, conflicts_with = "measure")]
    pub simulate: bool,
    /// Time seeded toy models end to end on this machine.
    #[arg(long)]
    pub measure: bool,
    /// Budget preset name (`reference`/`paper`) or a JSON file path.
    #[arg(long, default_value = "reference")]
    pub budget: String,
    #[arg(long, default_value_t = 5)]
    pub chunks: usize,
}

/// Run a parsed command line. Returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e @ (Error::Validation(_) | Error::Config(_))) => {
            log::error!("{e}");
            eprintln!("usage error: {e}");
            2
        }
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut sets = cli.sets.clone();
    if let Some(seed) = cli.seed {
        sets.push(format!("seed={seed}"));
    }
    // fold per-command convenience flags into config overrides, then resolve
    match cli.command {
        Command::Synth { out, clips } => {
            if let Some(c) = clips {
                sets.push(format!("clips={c}"));
            }
            let cfg = RunConfig::resolve(cli.config.as_deref(), &sets)?;
            commands::cmd_synth(&cfg, &out)?;
        }
        Command::Train { which } => match which {
            TrainTarget::Rvq { corpus, out, stages, epochs } => {
                if let Some(s) = stages {
                    sets.push(format!("residual_stages={s}"));
                }
                if let Some(e) = epochs {
                    sets.push(format!("epochs={e}"));
                }
                let cfg = RunConfig::resolve(cli.config.as_deref(), &sets)?;
                commands::cmd_train_rvq(&cfg, &corpus, &out)?;
            }
            TrainTarget::Ar { corpus, codec, out, heads, epochs } => {
                if let Some(h) = heads {
                    sets.push(format!("head_mode={h}"));
                }
                if let Some(e) = epochs {
                    sets.push(format!("epochs={e}"));
                }
                let cfg = RunConfig::resolve(cli.config.as_deref(), &sets)?;
                commands::cmd_train_ar(&cfg, &corpus, &codec, &out)?;
            }
            TrainTarget::Etm { out, epochs } => {
                if let Some(e) = epochs {
                    sets.push(format!("epochs={e}"));
                }
                let cfg = RunConfig::resolve(cli.config.as_deref(), &sets)?;
                commands::cmd_train_etm(&cfg, &out)?;
            }
        },
        Command::Generate {
            audio,
            out,
            codec,
            ar,
            etm,
            topk,
            features,
            decode_trace,
            pipelined,
        } => {
            if let Some(k) = topk {
                sets.push(format!("topk={k}"));
            }
            let cfg = RunConfig::resolve(cli.config.as_deref(), &sets)?;
            let args = GenerateArgs {
                audio,
                codec,
                ar,
                etm,
                dump_features: features,
                dump_decode_trace: decode_trace,
                pipelined,
            };
            commands::cmd_generate(&cfg, &args, &out)?;
        }
        Command::Bench(args) => {
            let cfg = RunConfig::resolve(cli.config.as_deref(), &sets)?;
            if args.measure {
                commands::cmd_bench_measure(&cfg, args.chunks, &args.out)?;
            } else {
                let spec = if std::path::Path::new(&args.budget).exists() {
                    BudgetSpec::File(PathBuf::from(&args.budget))
                } else {
                    BudgetSpec::Named(args.budget.clone())
                };
                let budget = commands::resolve_budget(&spec)?;
                commands::cmd_bench_simulate(&cfg, &budget, args.chunks, &args.out)?;
            }
        }
        Command::Sweep { out, tokens, heads, corpus, codec } => {
            let cfg = RunConfig::resolve(cli.config.as_deref(), &sets)?;
            if heads {
                let corpus = corpus.ok_or_else(|| {
                    Error::Config("--heads requires --corpus".to_string())
                })?;
                let codec = codec.ok_or_else(|| {
                    Error::Config("--heads requires --codec".to_string())
                })?;
                commands::cmd_sweep_heads(&cfg, &corpus, &codec, &out)?;
            } else {
                let list: Result<Vec<usize>> = tokens
                    .split(',')
                    .map(|s| {
                        s.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::Config(format!("bad tokens value `{s}`")))
                    })
                    .collect();
                commands::cmd_sweep_tokens(&cfg, &list?, &out)?;
            }
        }
        Command::TraceExport { input, out, svg } => {
            commands::cmd_trace_export(&input, &out, svg)?;
        }
    }
    Ok(())
}
