//! The full streaming path: audio → tokens → motion → refined features,
//! with a per-stage latency trace.
//!
//! Run with `cargo run --release --example streaming_pipeline`.

use teller::ar::{ARConfig, ARParams, SamplerConfig};
use teller::audio::{Frontend, FrontendConfig};
use teller::pipeline::{measured_report, BufferedSource, Pipeline, RunMode};
use teller::rvq::{RVQCodec, RVQConfig};
use teller::synth::{generate_clip, SynthConfig};

fn main() -> teller::Result<()> {
    let codec = RVQCodec::seeded(
        RVQConfig { tokens_per_window: 8, latent_dim: 8, codebook_size: 64, residual_stages: 2, ..RVQConfig::default() },
        1,
    )?;
    let ar = ARParams::seeded(
        ARConfig { d_model: 64, n_layers: 2, n_heads: 4, vocab: 64, audio_dim: 16, tokens_per_chunk: 8, ..ARConfig::default() },
        2,
    )?;
    let frontend = Frontend::new(FrontendConfig { dim: 16, window_ms: 25.0 }, 16000)?;

    let clip = generate_clip(&SynthConfig::with_default_coupling(4, 4, 1.0))?;
    let pipeline = Pipeline::new(&codec, &ar, None, frontend, SamplerConfig { k: 1, temperature: 1.0, seed: 0 })?;
    let out = pipeline.run(BufferedSource::new(&clip.samples, 16000)?, RunMode::Sequential)?;

    println!(
        "1s of audio → {} tokens, {} motion frames, {} feature volumes",
        out.tokens.len(),
        out.motion.len(),
        out.features.len()
    );
    for row in out.trace.rows.iter().take(5) {
        println!(
            "  chunk {} {:>13}: {:>7.3} ms ({} tokens, {} frames)",
            row.chunk,
            row.stage.name(),
            row.end_ms - row.start_ms,
            row.tokens,
            row.frames
        );
    }
    let report = measured_report(&out.trace)?;
    println!(
        "measured: {} fps, realtime factor {:.4}, max chunk {:.2} ms, realtime: {}",
        report.fps, report.realtime_factor, report.max_chunk_latency_ms, report.verdict
    );
    Ok(())
}
