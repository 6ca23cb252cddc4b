//! Train the residual quantizer on a small synthetic corpus and watch the
//! reconstruction error fall.
//!
//! Run with `cargo run --release --example train_codec`.

use teller::rvq::{train_codebooks, RVQCodec, RVQConfig, RvqTrainConfig};
use teller::synth::{generate_clip, SynthConfig};
use teller::train::TrainConfig;

fn main() -> teller::Result<()> {
    // desk-scale codec: 4 slots × 2 stages = 8 tokens per window
    let codec_cfg = RVQConfig {
        tokens_per_window: 8,
        latent_dim: 8,
        codebook_size: 64,
        residual_stages: 2,
        ..RVQConfig::default()
    };
    let mut codec = RVQCodec::seeded(codec_cfg, 3)?;

    let base = SynthConfig::with_default_coupling(3, 4, 1.0);
    let mut windows = Vec::new();
    for i in 0..60u64 {
        let clip = generate_clip(&SynthConfig { seed: 1000 + i, ..base.clone() })?;
        windows.extend(clip.motion.windows(4));
    }
    let (train, held_out) = windows.split_at(260);

    let cfg = RvqTrainConfig {
        train: TrainConfig {
            lr_start: 5e-3,
            lr_end: 1e-4,
            epochs: 15,
            batch_size: 32,
            seed: 3,
            ..TrainConfig::default()
        },
        ..RvqTrainConfig::default()
    };
    let history = train_codebooks(&mut codec, train, &cfg, Some(held_out))?;
    for h in &history {
        if h.epoch % 3 == 0 || h.epoch + 1 == history.len() {
            println!(
                "epoch {:>2}: vq {:>9.4}  recon-through-tokens {:>9.4}  held-out {:>9.4}",
                h.epoch,
                h.vq_loss,
                h.train_recon,
                h.eval_recon.unwrap()
            );
        }
    }
    Ok(())
}
