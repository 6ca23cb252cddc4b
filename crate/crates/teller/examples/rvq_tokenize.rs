//! Tokenize a motion window with the residual quantizer and rebuild it.
//!
//! Run with `cargo run --example rvq_tokenize`.

use teller::motion::{MotionLatent, MotionWindow, FRAME_DIM};
use teller::rvq::{RVQCodec, RVQConfig};

fn main() -> teller::Result<()> {
    let codec = RVQCodec::seeded(RVQConfig::default(), 7)?;

    let frames = (0..4)
        .map(|i| {
            let vals: Vec<f32> = (0..FRAME_DIM)
                .map(|j| ((i * FRAME_DIM + j) as f32 * 0.11).sin() * 0.3)
                .collect();
            MotionLatent::from_flat(&vals)
        })
        .collect::<teller::Result<Vec<_>>>()?;
    let window = MotionWindow::new(frames, 20.0)?;

    // encode → quantize: 8 slots × 4 residual stages = 32 tokens
    let z = codec.encode(&window)?;
    let q = codec.quantize(&z)?;
    println!("tokens ({}): {:?}", q.tokens.len(), &q.tokens[..8]);
    println!(
        "slot 0 residual norms by stage: {:?}",
        q.residual_norms[0]
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
    );

    // tokens → latent → window (untrained codec, so reconstruction is rough)
    let z_hat = codec.dequantize_window(&q.tokens)?;
    let rebuilt = codec.decode(&z_hat)?;
    let loss = codec.vq_loss(&window)?;
    println!(
        "rebuilt {} frames; untrained losses: recon {:.3}, commit {:.3}",
        rebuilt.frames.len(),
        loss.recon,
        loss.commit
    );
    Ok(())
}
