//! Command implementations behind the CLI surface. Each one is an ordinary
//! function so tests and the acceptance suite can drive the same paths the
//! binary does. Commands print produced data paths on stdout; diagnostics go
//! through the logger (stderr).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::ar::{self, ARParams, HeadMode, SamplerConfig};
use crate::audio;
use crate::error::{Error, Result};
use crate::etm::{self, ETMParams};
use crate::motion::MotionClip;
use crate::pipeline::{
    self, export_trace, simulate_schedule, BufferedSource, Pipeline, RunMode, StageBudget,
};
use crate::rvq::{train_codebooks, RVQCodec, RvqEpochStats, RvqTrainConfig};
use crate::synth::{self, ClipEntry};
use crate::train::{write_loss_csv, EpochStats};

use super::config::RunConfig;
use super::svg;

/// `synth`: write a corpus and its manifest.
pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    if cfg.clips == 0 {
        return Err(Error::validation("--clips must be >= 1"));
    }
    cfg.echo_to(out_dir)?;
    synth::corpus(&cfg.synth_config(), cfg.clips, out_dir)?;
    let manifest = out_dir.join("manifest.jsonl");
    println!("{}", manifest.display());
    Ok(manifest)
}

fn split_entries(entries: &[ClipEntry]) -> (Vec<ClipEntry>, Vec<ClipEntry>) {
    let train = entries.iter().filter(|e| e.split == "train").cloned().collect();
    let val = entries.iter().filter(|e| e.split == "val").cloned().collect();
    (train, val)
}

fn load_corpus(corpus_dir: &Path) -> Result<Vec<ClipEntry>> {
    let manifest = corpus_dir.join("manifest.jsonl");
    if !manifest.exists() {
        return Err(Error::Config(format!(
            "no corpus manifest at {}",
            manifest.display()
        )));
    }
    synth::load_manifest(manifest)
}

fn windows_of(entries: &[ClipEntry], window_frames: usize) -> Result<Vec<crate::motion::MotionWindow>> {
    let mut out = Vec::new();
    for e in entries {
        out.extend(MotionClip::load(&e.motion)?.windows(window_frames));
    }
    Ok(out)
}

/// `train rvq`: fit the codec on a corpus, write checkpoint + loss CSV.
pub fn cmd_train_rvq(cfg: &RunConfig, corpus_dir: &Path, out_dir: &Path) -> Result<PathBuf> {
    cfg.echo_to(out_dir)?;
    let entries = load_corpus(corpus_dir)?;
    let (train_e, val_e) = split_entries(&entries);
    let train_w = windows_of(&train_e, cfg.window_frames)?;
    let val_w = windows_of(&val_e, cfg.window_frames)?;
    let mut codec = RVQCodec::seeded(cfg.rvq_config(), cfg.seed)?;
    let tcfg = RvqTrainConfig {
        train: cfg.train_config(),
        ema_decay: cfg.ema_decay,
        ..RvqTrainConfig::default()
    };
    let history = train_codebooks(&mut codec, &train_w, &tcfg, Some(&val_w))?;
    log_rvq_history(&history);

    let ckpt = out_dir.join("codec.trvq");
    codec.save(&ckpt)?;
    let stats: Vec<EpochStats> = history
        .iter()
        .map(|h| EpochStats { epoch: h.epoch, loss: h.vq_loss, lr: h.lr })
        .collect();
    write_loss_csv(out_dir.join("loss.csv"), &stats)?;
    println!("{}", ckpt.display());
    println!("{}", out_dir.join("loss.csv").display());
    Ok(ckpt)
}

fn log_rvq_history(history: &[RvqEpochStats]) {
    for h in history {
        log::info!(
            "codec epoch {}: vq {:.5} recon {:.5} commit {:.5} eval {:?} reseeded {}",
            h.epoch,
            h.vq_loss,
            h.recon,
            h.commit,
            h.eval_recon,
            h.reseeded
        );
    }
}

#[derive(serde::Serialize)]
pub struct ArTrainSummary {
    pub per_token_ce: f64,
    pub mean_head_gap: f64,
    pub head_mode: String,
    pub config_hash: String,
}

/// `train ar`: fit the token model against a trained codec's tokens.
pub fn cmd_train_ar(
    cfg: &RunConfig,
    corpus_dir: &Path,
    codec_path: &Path,
    out_dir: &Path,
) -> Result<PathBuf> {
    cfg.echo_to(out_dir)?;
    let codec = RVQCodec::load(codec_path)?;
    let entries = load_corpus(corpus_dir)?;
    let (train_e, val_e) = split_entries(&entries);

    // the codec is authoritative for vocabulary and tokens per chunk
    let mut model_cfg = cfg.ar_config();
    model_cfg.vocab = codec.config.codebook_size;
    model_cfg.tokens_per_chunk = codec.config.tokens_per_window;
    let frontend_cfg = cfg.frontend_config();
    let train_layouts = synth::prepare_layouts(&train_e, &codec, &frontend_cfg, &model_cfg)?;
    let val_layouts = synth::prepare_layouts(&val_e, &codec, &frontend_cfg, &model_cfg)?;

    let mut params = ARParams::seeded(model_cfg, cfg.seed)?;
    let report = ar::train_ar(&mut params, &train_layouts, &cfg.train_config(), cfg.ar_regularizer, None)?;

    let eval_set = if val_layouts.is_empty() { &train_layouts } else { &val_layouts };
    let eval = ar::evaluate(&params, eval_set)?;
    log::info!(
        "validation: {:.4} nats/token, mean head gap {:.4}",
        eval.per_token_ce,
        eval.mean_head_gap
    );

    let ckpt = out_dir.join("model.tarm");
    params.save(&ckpt)?;
    write_loss_csv(out_dir.join("loss.csv"), &report.history)?;
    let summary = ArTrainSummary {
        per_token_ce: eval.per_token_ce,
        mean_head_gap: eval.mean_head_gap,
        head_mode: cfg.head_mode.clone(),
        config_hash: cfg.hash(),
    };
    std::fs::write(
        out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&summary).expect("summary json"),
    )?;
    println!("{}", ckpt.display());
    println!("{}", out_dir.join("loss.csv").display());
    println!("{}", out_dir.join("metrics.json").display());
    Ok(ckpt)
}

/// `train etm`: fit the refiner on seeded synthetic clean/degraded pairs.
pub fn cmd_train_etm(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.echo_to(out_dir)?;
    let mut params = ETMParams::seeded(cfg.etm_config(), cfg.seed)?;
    let samples: crate::error::Result<Vec<_>> = (0..cfg.clips.max(8))
        .map(|i| etm::synthetic_sequence(&params, cfg.etm_frame_px, cfg.seed.wrapping_add(i as u64)))
        .collect();
    let samples = samples?;
    let report = etm::train_etm(&mut params, &samples, &cfg.train_config())?;
    let ckpt = out_dir.join("refiner.tetm");
    params.save(&ckpt)?;
    write_loss_csv(out_dir.join("loss.csv"), &report.history)?;
    println!("{}", ckpt.display());
    println!("{}", out_dir.join("loss.csv").display());
    Ok(ckpt)
}

pub struct GenerateArgs {
    pub audio: PathBuf,
    pub codec: Option<PathBuf>,
    pub ar: Option<PathBuf>,
    pub etm: Option<PathBuf>,
    pub dump_features: bool,
    pub dump_decode_trace: bool,
    pub pipelined: bool,
}

/// `generate`: stream a WAV through the stack; writes the 25 Hz motion
/// file, the latency trace, and optional feature / decode-trace dumps.
pub fn cmd_generate(cfg: &RunConfig, args: &GenerateArgs, out_dir: &Path) -> Result<PathBuf> {
    cfg.echo_to(out_dir)?;
    let wav = audio::read_wav(&args.audio)?;

    let codec = match &args.codec {
        Some(p) => RVQCodec::load(p)?,
        None => {
            log::info!("no codec checkpoint given; using seeded initialization");
            RVQCodec::seeded(cfg.rvq_config(), cfg.seed)?
        }
    };
    let ar_params = match &args.ar {
        Some(p) => ARParams::load(p)?,
        None => {
            log::info!("no model checkpoint given; using seeded initialization");
            let mut mc = cfg.ar_config();
            mc.vocab = codec.config.codebook_size;
            mc.tokens_per_chunk = codec.config.tokens_per_window;
            ARParams::seeded(mc, cfg.seed)?
        }
    };
    let etm_params = match &args.etm {
        Some(p) => Some(ETMParams::load(p)?),
        None => None,
    };

    let frontend = audio::Frontend::new(
        crate::audio::FrontendConfig { dim: ar_params.config.audio_dim, window_ms: cfg.audio_window_ms },
        wav.sample_rate_hz,
    )?;
    let sampler = SamplerConfig { k: cfg.topk, temperature: cfg.temperature, seed: cfg.seed };
    let p = Pipeline::new(&codec, &ar_params, etm_params.as_ref(), frontend, sampler)?;
    let mode = if args.pipelined { RunMode::Pipelined } else { RunMode::Sequential };
    let out = p.run(BufferedSource::new(&wav.samples, wav.sample_rate_hz)?, mode)?;

    let motion_path = out_dir.join("motion.tmlt");
    MotionClip::new(out.motion, 25.0).save(&motion_path)?;
    let trace_path = out_dir.join("trace.csv");
    export_trace(&out.trace, &trace_path)?;
    println!("{}", motion_path.display());
    println!("{}", trace_path.display());
    if args.dump_features {
        let f = out_dir.join("features.tftr");
        pipeline::save_features(&f, &out.features)?;
        println!("{}", f.display());
    }
    if args.dump_decode_trace {
        let f = out_dir.join("decode_trace.jsonl");
        let mut w = BufWriter::new(File::create(&f)?);
        for e in &out.events {
            writeln!(w, "{}", serde_json::to_string(e).expect("event json"))?;
        }
        println!("{}", f.display());
    }
    Ok(motion_path)
}

pub enum BudgetSpec {
    Named(String),
    File(PathBuf),
}

pub fn resolve_budget(spec: &BudgetSpec) -> Result<StageBudget> {
    match spec {
        BudgetSpec::Named(name) => match name.as_str() {
            // published reference timings; "paper" kept as the conventional
            // alias for the same preset
            "reference" | "paper" => Ok(StageBudget::reference()),
            other => Err(Error::Config(format!(
                "unknown budget preset `{other}` (try `reference`)"
            ))),
        },
        BudgetSpec::File(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("budget json: {e}")))
        }
    }
}

/// `bench --simulate`: schedule arithmetic under a stage budget.
pub fn cmd_bench_simulate(
    cfg: &RunConfig,
    budget: &StageBudget,
    chunks: usize,
    out_dir: &Path,
) -> Result<PathBuf> {
    if chunks == 0 {
        return Err(Error::validation("--chunks must be >= 1"));
    }
    cfg.echo_to(out_dir)?;
    let report = simulate_schedule(budget, chunks)?;
    log::info!(
        "simulated: {:.0} ms/chunk, verdict {}",
        report.max_chunk_latency_ms,
        report.verdict
    );
    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, report.to_json())?;
    std::fs::write(out_dir.join("latency.svg"), svg::budget_chart(budget))?;
    println!("{}", report_path.display());
    println!("{}", out_dir.join("latency.svg").display());
    Ok(report_path)
}

/// `bench --measure`: run seeded toy models end to end and time them.
pub fn cmd_bench_measure(cfg: &RunConfig, chunks: usize, out_dir: &Path) -> Result<PathBuf> {
    if chunks == 0 {
        return Err(Error::validation("--chunks must be >= 1"));
    }
    cfg.echo_to(out_dir)?;
    let mut synth_cfg = cfg.synth_config();
    synth_cfg.clip_seconds = chunks as f64 * 0.2;
    let clip = synth::generate_clip(&synth_cfg)?;

    let codec = RVQCodec::seeded(cfg.rvq_config(), cfg.seed)?;
    let mut mc = cfg.ar_config();
    mc.vocab = codec.config.codebook_size;
    mc.tokens_per_chunk = codec.config.tokens_per_window;
    let ar_params = ARParams::seeded(mc, cfg.seed)?;
    let frontend = audio::Frontend::new(cfg.frontend_config(), cfg.sample_rate_hz)?;
    let sampler = SamplerConfig { k: cfg.topk, temperature: cfg.temperature, seed: cfg.seed };
    let p = Pipeline::new(&codec, &ar_params, None, frontend, sampler)?;
    let out = p.run(BufferedSource::new(&clip.samples, cfg.sample_rate_hz)?, RunMode::Sequential)?;

    let report = pipeline::measured_report(&out.trace)?;
    log::info!(
        "measured: max {:.2} ms/chunk, realtime factor {:.3}, verdict {}",
        report.max_chunk_latency_ms,
        report.realtime_factor,
        report.verdict
    );
    let report_path = out_dir.join("report.json");
    std::fs::write(&report_path, report.to_json())?;
    export_trace(&out.trace, out_dir.join("trace.csv"))?;
    std::fs::write(out_dir.join("latency.svg"), svg::latency_chart(&out.trace))?;
    println!("{}", report_path.display());
    println!("{}", out_dir.join("trace.csv").display());
    println!("{}", out_dir.join("latency.svg").display());
    Ok(report_path)
}

/// One row of the compression sweep.
#[derive(Clone, Debug, serde::Serialize)]
pub struct SweepRow {
    pub frames: usize,
    pub tokens: usize,
    pub held_out_loss: f64,
    pub config_hash: String,
}

/// `sweep`: train the codec across token budgets and report held-out loss.
pub fn cmd_sweep_tokens(cfg: &RunConfig, tokens_list: &[usize], out_dir: &Path) -> Result<PathBuf> {
    if tokens_list.is_empty() {
        return Err(Error::validation("empty tokens list"));
    }
    cfg.echo_to(out_dir)?;
    // in-memory corpus, split 90/10 by clip index
    let mut train_w = Vec::new();
    let mut val_w = Vec::new();
    let base = cfg.synth_config();
    let mut seed_rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    for i in 0..cfg.clips {
        let seed = rand::RngCore::next_u64(&mut seed_rng);
        let clip = synth::generate_clip(&synth::SynthConfig { seed, ..base.clone() })?;
        let windows = clip.motion.windows(cfg.window_frames);
        if i % 10 == 9 {
            val_w.extend(windows);
        } else {
            train_w.extend(windows);
        }
    }

    let mut rows = Vec::with_capacity(tokens_list.len());
    for &tokens in tokens_list {
        let mut rvq_cfg = cfg.rvq_config();
        rvq_cfg.tokens_per_window = tokens;
        rvq_cfg.validate()?;
        let mut codec = RVQCodec::seeded(rvq_cfg, cfg.seed)?;
        let tcfg = RvqTrainConfig {
            train: cfg.train_config(),
            ema_decay: cfg.ema_decay,
            ..RvqTrainConfig::default()
        };
        let history = train_codebooks(&mut codec, &train_w, &tcfg, Some(&val_w))?;
        let held_out_loss = history
            .last()
            .and_then(|h| h.eval_recon)
            .ok_or_else(|| Error::Train("sweep produced no evaluation".to_string()))?;
        log::info!("tokens {tokens}: held-out recon {held_out_loss:.5}");
        rows.push(SweepRow {
            frames: cfg.window_frames,
            tokens,
            held_out_loss,
            config_hash: cfg.hash(),
        });
    }

    let csv_path = out_dir.join("sweep.csv");
    let mut w = BufWriter::new(File::create(&csv_path)?);
    writeln!(w, "frames,tokens,held_out_loss,config_hash")?;
    for r in &rows {
        writeln!(w, "{},{},{},{}", r.frames, r.tokens, r.held_out_loss, r.config_hash)?;
    }
    drop(w);
    let xs: Vec<f64> = rows.iter().map(|r| r.tokens as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.held_out_loss).collect();
    std::fs::write(
        out_dir.join("sweep.svg"),
        svg::line_chart("held-out reconstruction loss vs tokens per window", &xs, &ys, "tokens per window", "held-out loss"),
    )?;
    println!("{}", csv_path.display());
    println!("{}", out_dir.join("sweep.svg").display());
    Ok(csv_path)
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct HeadsAblationRow {
    pub mode: String,
    pub per_token_ce: f64,
    pub mean_head_gap: f64,
    pub config_hash: String,
}

/// `sweep --heads`: train single- and dual-head models end to end on the
/// same corpus and tokens, and emit the comparison CSV.
pub fn cmd_sweep_heads(cfg: &RunConfig, corpus_dir: &Path, codec_path: &Path, out_dir: &Path) -> Result<PathBuf> {
    cfg.echo_to(out_dir)?;
    let codec = RVQCodec::load(codec_path)?;
    let entries = load_corpus(corpus_dir)?;
    let (train_e, val_e) = split_entries(&entries);
    let frontend_cfg = cfg.frontend_config();

    let mut rows = Vec::new();
    for mode in [HeadMode::Dual, HeadMode::Single] {
        let mut model_cfg = cfg.ar_config();
        model_cfg.head_mode = mode;
        model_cfg.vocab = codec.config.codebook_size;
        model_cfg.tokens_per_chunk = codec.config.tokens_per_window;
        let train_layouts = synth::prepare_layouts(&train_e, &codec, &frontend_cfg, &model_cfg)?;
        let val_layouts = synth::prepare_layouts(&val_e, &codec, &frontend_cfg, &model_cfg)?;
        let mut params = ARParams::seeded(model_cfg, cfg.seed)?;
        ar::train_ar(&mut params, &train_layouts, &cfg.train_config(), cfg.ar_regularizer, None)?;
        let eval_set = if val_layouts.is_empty() { &train_layouts } else { &val_layouts };
        let eval = ar::evaluate(&params, eval_set)?;
        let name = match mode {
            HeadMode::Dual => "dual",
            HeadMode::Single => "single",
        };
        log::info!("{name}-head: {:.4} nats/token", eval.per_token_ce);
        rows.push(HeadsAblationRow {
            mode: name.to_string(),
            per_token_ce: eval.per_token_ce,
            mean_head_gap: eval.mean_head_gap,
            config_hash: cfg.hash(),
        });
    }
    let csv_path = out_dir.join("heads_ablation.csv");
    let mut w = BufWriter::new(File::create(&csv_path)?);
    writeln!(w, "mode,per_token_ce,mean_head_gap,config_hash")?;
    for r in &rows {
        writeln!(w, "{},{},{},{}", r.mode, r.per_token_ce, r.mean_head_gap, r.config_hash)?;
    }
    println!("{}", csv_path.display());
    Ok(csv_path)
}

/// `trace-export`: validate and re-emit a latency trace (optionally with an
/// SVG timeline).
pub fn cmd_trace_export(input: &Path, out_dir: &Path, with_svg: bool) -> Result<PathBuf> {
    let trace = pipeline::import_trace(input)?;
    std::fs::create_dir_all(out_dir)?;
    let out_path = out_dir.join("trace.csv");
    export_trace(&trace, &out_path)?;
    println!("{}", out_path.display());
    if with_svg {
        let svg_path = out_dir.join("latency.svg");
        std::fs::write(&svg_path, svg::latency_chart(&trace))?;
        println!("{}", svg_path.display());
    }
    Ok(out_path)
}
