// temporary calibration for the training-efficacy acceptance settings
use std::time::Instant;

use teller::ar::{self, ARConfig, ARParams, DecodeState, SamplerConfig};
use teller::audio::{embed_stream, FrontendConfig};
use teller::motion::MotionClip;
use teller::rvq::{train_codebooks, RVQCodec, RVQConfig, RvqTrainConfig, TokenSequence};
use teller::synth::{self, pearson, SynthConfig};
use teller::train::TrainConfig;

fn main() -> teller::Result<()> {
    let t_all = Instant::now();
    let n_clips: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let ar_epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(6);
    let d_model: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(128);
    let n_layers: usize = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(3);

    let base = SynthConfig::with_default_coupling(41, 4, 1.0);
    let dir = std::env::temp_dir().join(format!("cal5_{n_clips}"));
    let t0 = Instant::now();
    let entries = synth::corpus(&base, n_clips, &dir)?;
    println!("corpus: {:?}", t0.elapsed());
    let train_e: Vec<_> = entries.iter().filter(|e| e.split == "train").cloned().collect();
    let val_e: Vec<_> = entries.iter().filter(|e| e.split == "val").cloned().collect();

    // codec
    let t0 = Instant::now();
    let rvq_cfg = RVQConfig {
        tokens_per_window: 32,
        latent_dim: 16,
        codebook_size: 64,
        residual_stages: 4,
        ..RVQConfig::default()
    };
    let mut codec = RVQCodec::seeded(rvq_cfg, 41)?;
    let mut train_w = Vec::new();
    for e in &train_e {
        train_w.extend(MotionClip::load(&e.motion)?.windows(4));
    }
    let rvq_epochs: usize = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(10);
    let tcfg = RvqTrainConfig {
        train: TrainConfig { lr_start: 5e-3, lr_end: 5e-5, epochs: rvq_epochs, batch_size: 64, seed: 41, ..TrainConfig::default() },
        ..RvqTrainConfig::default()
    };
    let hist = train_codebooks(&mut codec, &train_w, &tcfg, None)?;
    println!(
        "codec: {:?}, final recon {:.4} (per-window, {} windows)",
        t0.elapsed(),
        hist.last().unwrap().train_recon,
        train_w.len()
    );

    // layouts
    let t0 = Instant::now();
    let fe_cfg = FrontendConfig { dim: 16, window_ms: 25.0 };
    let model_cfg = ARConfig {
        d_model,
        n_layers,
        n_heads: 4,
        vocab: 64,
        audio_dim: 16,
        tokens_per_chunk: 32,
        ..ARConfig::default()
    };
    let train_layouts = synth::prepare_layouts(&train_e, &codec, &fe_cfg, &model_cfg)?;
    let val_layouts = synth::prepare_layouts(&val_e, &codec, &fe_cfg, &model_cfg)?;
    println!("layouts: {:?}", t0.elapsed());

    // AR training
    let t0 = Instant::now();
    let mut params = ARParams::seeded(model_cfg.clone(), 42)?;
    let cfg = TrainConfig {
        lr_start: 3e-3,
        lr_end: 1e-4,
        epochs: ar_epochs,
        batch_size: 16,
        seed: 42,
        ..TrainConfig::default()
    };
    ar::train_ar(&mut params, &train_layouts, &cfg, true, None)?;
    println!("ar training: {:?}", t0.elapsed());

    let train_eval = ar::evaluate(&params, &train_layouts[..50.min(train_layouts.len())])?;
    let val_eval = ar::evaluate(&params, &val_layouts)?;
    let bound = 0.4 * (64f64).ln();
    println!(
        "CE/token: train {:.4}, val {:.4} (bound {bound:.4}); val gap {:.4}",
        train_eval.per_token_ce, val_eval.per_token_ce, val_eval.mean_head_gap
    );

    // greedy decode held-out clips and correlate with ground truth
    let t0 = Instant::now();
    let mut rs = Vec::new();
    for e in &val_e {
        let wav = teller::audio::read_wav(&e.wav)?;
        let embs = embed_stream(&wav.samples, wav.sample_rate_hz, &fe_cfg)?;
        let mut state = DecodeState::new(&params, SamplerConfig { k: 1, temperature: 1.0, seed: 0 });
        let mut frames = Vec::new();
        for emb in &embs {
            let tokens = ar::decode_chunk(&params, &mut state, emb)?;
            let seq = TokenSequence::new(tokens, 32, 64)?;
            let z = codec.dequantize(&seq)?;
            frames.extend(codec.decode(&z[0])?.frames);
        }
        let clip = synth::clip_from_entry(&base, e)?;
        // mean r over all coordinates vs their coupled band
        let mut clip_rs = Vec::new();
        for j in 0..75 {
            let series: Vec<f32> = frames.iter().map(|f| f.flatten()[j]).collect();
            let truth: Vec<f32> =
                (0..clip.drivers.rows()).map(|k| clip.drivers.get(k, j % 4)).collect();
            clip_rs.push(pearson(&series, &truth));
        }
        rs.push(clip_rs.iter().sum::<f64>() / clip_rs.len() as f64);
    }
    let mean_r = rs.iter().sum::<f64>() / rs.len() as f64;
    let min_r = rs.iter().cloned().fold(f64::INFINITY, f64::min);
    println!("decode+corr: {:?}; mean r {:.4}, min clip r {:.4}", t0.elapsed(), mean_r, min_r);
    println!("TOTAL {:?}", t_all.elapsed());
    Ok(())
}
