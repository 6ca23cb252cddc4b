//! Chunk a waveform into 200ms pieces and embed each as a 10×D filterbank.
//!
//! Run with `cargo run --example audio_embeddings`.

use teller::audio::{chunk_stream, Frontend, FrontendConfig};

fn main() -> teller::Result<()> {
    let rate = 16000u32;
    // 1.05s of two tones: expect 6 chunks, the last one zero-padded
    let samples: Vec<f32> = (0..(1.05 * rate as f32) as usize)
        .map(|i| {
            let t = i as f32 / rate as f32;
            (2.0 * std::f32::consts::PI * 440.0 * t).sin() * 0.4
                + (2.0 * std::f32::consts::PI * 1320.0 * t).sin() * 0.2
        })
        .collect();

    let chunks = chunk_stream(&samples, rate)?;
    println!(
        "{} chunks of {} samples (last pads {})",
        chunks.len(),
        chunks[0].samples.len(),
        chunks.last().unwrap().pad_samples
    );

    let frontend = Frontend::new(FrontendConfig::default(), rate)?;
    let emb = frontend.embed_chunk(&chunks[0])?;
    println!("embedding shape: 10 × {}", emb.dim());
    let row = emb.row(0);
    let (argmax, _) = row
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    println!("frame 0: loudest filter bin {argmax} of {}", emb.dim());

    // the faithful-width interface
    let wide = Frontend::new(FrontendConfig::faithful(), rate)?.embed_chunk(&chunks[0])?;
    println!("faithful mode shape: 10 × {}", wide.dim());
    Ok(())
}
