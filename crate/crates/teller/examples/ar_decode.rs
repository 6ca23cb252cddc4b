//! Incremental token decoding: greedy vs top-k sampling from audio chunks.
//!
//! Run with `cargo run --example ar_decode`.

use teller::ar::{decode_chunk, ARConfig, ARParams, DecodeState, SamplerConfig};
use teller::audio::{embed_stream, FrontendConfig};

fn main() -> teller::Result<()> {
    let cfg = ARConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        vocab: 64,
        audio_dim: 16,
        tokens_per_chunk: 8,
        ..ARConfig::default()
    };
    let params = ARParams::seeded(cfg, 5)?;

    // 0.6s of audio → 3 chunks
    let samples: Vec<f32> = (0..9600)
        .map(|i| (2.0 * std::f32::consts::PI * 660.0 * i as f32 / 16000.0).sin() * 0.5)
        .collect();
    let embeddings = embed_stream(&samples, 16000, &FrontendConfig { dim: 16, window_ms: 25.0 })?;

    // greedy: k = 1, fully deterministic
    let mut greedy = DecodeState::new(&params, SamplerConfig { k: 1, temperature: 1.0, seed: 0 });
    for emb in &embeddings {
        let tokens = decode_chunk(&params, &mut greedy, emb)?;
        println!("greedy chunk {}: {:?}", emb.chunk_index, tokens);
    }

    // top-k sampling explores; each seed takes a different path
    for seed in [1u64, 2] {
        let mut state =
            DecodeState::new(&params, SamplerConfig { k: 15, temperature: 1.0, seed });
        let tokens = decode_chunk(&params, &mut state, &embeddings[0])?;
        println!("top-k seed {seed} chunk 0: {:?}", tokens);
    }
    Ok(())
}
