//! Incremental decoding with per-layer key/value caches and top-k sampling.
//!
//! Every arithmetic step here mirrors the graph forward pass exactly — same
//! formulas, same accumulation order — so cached decoding reproduces a full
//! re-forward bit for bit. Tests assert that equivalence.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::audio::{AudioEmbedding, FRAMES_PER_CHUNK};
use crate::error::{Error, Result};
use crate::nn::graph::rope_rotate;
use crate::nn::Mat;

use super::{ARParams, HeadMode};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct SamplerConfig {
    /// Top-k cutoff; `k = 1` is greedy.
    pub k: usize,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { k: 15, temperature: 1.0, seed: 0 }
    }
}

/// One sampling decision, for the decode trace log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecodeEvent {
    pub chunk_index: usize,
    pub pair_index: usize,
    pub head: u8,
    pub chosen_token: u16,
    /// Rank of the chosen token in its head's sorted logits (0 = argmax).
    pub logit_rank: usize,
}

struct CacheBuf {
    data: Vec<f32>,
    cols: usize,
}

impl CacheBuf {
    fn new(cols: usize) -> Self {
        CacheBuf { data: Vec::new(), cols }
    }

    fn push_row(&mut self, row: &[f32]) {
        debug_assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn len(&self) -> usize {
        self.data.len() / self.cols
    }
}

/// Per-stream decoding session: cached keys/values, position counter, and
/// sampler RNG. One state per stream; never shared.
pub struct DecodeState {
    k_cache: Vec<CacheBuf>,
    v_cache: Vec<CacheBuf>,
    len: usize,
    chunk_counter: usize,
    sampler: SamplerConfig,
    rng: ChaCha8Rng,
    last_hidden: Option<Vec<f32>>,
    pub events: Vec<DecodeEvent>,
}

impl DecodeState {
    pub fn new(params: &ARParams, sampler: SamplerConfig) -> Self {
        let d = params.config.d_model;
        DecodeState {
            k_cache: (0..params.config.n_layers).map(|_| CacheBuf::new(d)).collect(),
            v_cache: (0..params.config.n_layers).map(|_| CacheBuf::new(d)).collect(),
            len: 0,
            chunk_counter: 0,
            sampler,
            rng: ChaCha8Rng::seed_from_u64(sampler.seed),
            last_hidden: None,
            events: Vec::new(),
        }
    }

    pub fn position(&self) -> usize {
        self.len
    }

    pub fn chunks_decoded(&self) -> usize {
        self.chunk_counter
    }

    /// Append one input row, returning the final-block hidden state.
    pub fn step(&mut self, params: &ARParams, x_row: &[f32]) -> Vec<f32> {
        let cfg = &params.config;
        let d = cfg.d_model;
        debug_assert_eq!(x_row.len(), d);
        let heads = cfg.n_heads;
        let dh = d / heads;
        let scale = 1.0f32 / (dh as f32).sqrt();
        let pos = self.len;

        let mut h = x_row.to_vec();
        for (l, block) in params.blocks.iter().enumerate() {
            let a_in = rms_norm_row(&h, &block.norm1);
            let mut q = matvec(&a_in, &block.wq);
            let mut k = matvec(&a_in, &block.wk);
            let v = matvec(&a_in, &block.wv);
            for hd in 0..heads {
                rope_rotate(&mut q[hd * dh..(hd + 1) * dh], pos, cfg.rope_base, false);
                rope_rotate(&mut k[hd * dh..(hd + 1) * dh], pos, cfg.rope_base, false);
            }
            self.k_cache[l].push_row(&k);
            self.v_cache[l].push_row(&v);

            let n_ctx = self.k_cache[l].len();
            let mut attn = vec![0.0f32; d];
            for hd in 0..heads {
                let c0 = hd * dh;
                let qh = &q[c0..c0 + dh];
                // scores over the cache, ascending positions
                let mut scores = Vec::with_capacity(n_ctx);
                let mut mx = f32::NEG_INFINITY;
                for j in 0..n_ctx {
                    let s = crate::nn::dot(qh, &self.k_cache[l].row(j)[c0..c0 + dh]) * scale;
                    scores.push(s);
                    if s > mx {
                        mx = s;
                    }
                }
                let mut denom = 0.0f32;
                for s in scores.iter_mut() {
                    *s = (*s - mx).exp();
                    denom += *s;
                }
                for s in scores.iter_mut() {
                    *s /= denom;
                }
                for (j, &w) in scores.iter().enumerate() {
                    let vrow = &self.v_cache[l].row(j)[c0..c0 + dh];
                    for (a, &x) in attn[c0..c0 + dh].iter_mut().zip(vrow) {
                        *a += w * x;
                    }
                }
            }
            let o = matvec(&attn, &block.wo);
            for (hx, &ox) in h.iter_mut().zip(o.iter()) {
                *hx += ox;
            }
            let f_in = rms_norm_row(&h, &block.norm2);
            let mut f1 = matvec(&f_in, &block.ffn_w1);
            add_bias(&mut f1, &block.ffn_b1);
            for x in f1.iter_mut() {
                let s = 1.0 / (1.0 + (-*x).exp());
                *x *= s;
            }
            let mut f2 = matvec(&f1, &block.ffn_w2);
            add_bias(&mut f2, &block.ffn_b2);
            for (hx, &fx) in h.iter_mut().zip(f2.iter()) {
                *hx += fx;
            }
        }
        self.len += 1;
        self.last_hidden = Some(h.clone());
        h
    }

    /// Head logits for the most recent step.
    pub fn logits(&self, params: &ARParams) -> Result<(Vec<f32>, Option<Vec<f32>>)> {
        let h = self
            .last_hidden
            .as_ref()
            .ok_or_else(|| Error::validation("no positions decoded yet"))?;
        Ok(head_logits(params, h))
    }
}

/// Apply the final norm and output heads to a hidden row.
pub fn head_logits(params: &ARParams, hidden: &[f32]) -> (Vec<f32>, Option<Vec<f32>>) {
    let y = rms_norm_row(hidden, &params.final_norm);
    let mut l0 = matvec(&y, &params.head0_w);
    add_bias(&mut l0, &params.head0_b);
    let l1 = match params.config.head_mode {
        HeadMode::Dual => {
            let mut l1 = matvec(&y, params.head1_w.as_ref().unwrap());
            add_bias(&mut l1, params.head1_b.as_ref().unwrap());
            Some(l1)
        }
        HeadMode::Single => None,
    };
    (l0, l1)
}

/// Normalized and projected input row for one audio frame of a chunk.
pub fn audio_input_row(params: &ARParams, emb: &AudioEmbedding, frame: usize) -> Vec<f32> {
    let raw = emb.row(frame);
    let normed = rms_norm_row(raw, &params.audio_norm);
    let mut out = matvec(&normed, &params.audio_w);
    add_bias(&mut out, &params.audio_b);
    out
}

/// Combined embedding for a token pair (dual-head mode).
pub fn pair_input_row(params: &ARParams, first: u16, second: u16) -> Vec<f32> {
    let d = params.config.d_model;
    let bias = params.pair_bias.as_ref().expect("dual-head params");
    let mut cat = Vec::with_capacity(2 * d);
    for (slot, tok) in [(0usize, first), (1, second)] {
        let emb = params.token_emb.row(tok as usize);
        cat.extend(emb.iter().zip(bias.row(slot)).map(|(&e, &b)| e + b));
    }
    let mut out = matvec(&cat, params.pair_w.as_ref().expect("dual-head params"));
    add_bias(&mut out, params.pair_b.as_ref().expect("dual-head params"));
    out
}

/// Token embedding row (single-head mode).
pub fn token_input_row(params: &ARParams, token: u16) -> Vec<f32> {
    params.token_emb.row(token as usize).to_vec()
}

/// Decode one chunk: append its 10 audio positions, then autoregressively
/// sample the chunk's motion tokens. Returns `tokens_per_chunk` tokens.
pub fn decode_chunk(
    params: &ARParams,
    state: &mut DecodeState,
    audio: &AudioEmbedding,
) -> Result<Vec<u16>> {
    let cfg = &params.config;
    if audio.dim() != cfg.audio_dim {
        return Err(Error::mismatch(format!(
            "audio embedding dim {} vs model audio_dim {}",
            audio.dim(),
            cfg.audio_dim
        )));
    }
    let mut last = vec![0.0f32; cfg.d_model];
    for frame in 0..FRAMES_PER_CHUNK {
        let row = audio_input_row(params, audio, frame);
        last = state.step(params, &row);
    }
    let chunk_index = state.chunk_counter;
    let mut tokens = Vec::with_capacity(cfg.tokens_per_chunk);
    for j in 0..cfg.motion_positions_per_chunk() {
        let (l0, l1) = head_logits(params, &last);
        let (t0, rank0) = sample_top_k(&l0, state.sampler.k, state.sampler.temperature, &mut state.rng);
        state.events.push(DecodeEvent {
            chunk_index,
            pair_index: j,
            head: 0,
            chosen_token: t0,
            logit_rank: rank0,
        });
        let row = match cfg.head_mode {
            HeadMode::Dual => {
                let l1 = l1.expect("dual-head logits");
                let (t1, rank1) =
                    sample_top_k(&l1, state.sampler.k, state.sampler.temperature, &mut state.rng);
                state.events.push(DecodeEvent {
                    chunk_index,
                    pair_index: j,
                    head: 1,
                    chosen_token: t1,
                    logit_rank: rank1,
                });
                tokens.push(t0);
                tokens.push(t1);
                pair_input_row(params, t0, t1)
            }
            HeadMode::Single => {
                tokens.push(t0);
                token_input_row(params, t0)
            }
        };
        last = state.step(params, &row);
    }
    state.chunk_counter += 1;
    Ok(tokens)
}

/// Top-k sample: keep the `k` largest logits (ties to the lowest index),
/// apply temperature, draw. `k = 1` is greedy and consumes no randomness.
pub fn sample_top_k(
    logits: &[f32],
    k: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> (u16, usize) {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| {
        logits[b]
            .partial_cmp(&logits[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let k = k.max(1).min(order.len());
    if k == 1 {
        return (order[0] as u16, 0);
    }
    let t = temperature.max(1e-6);
    let selected = &order[..k];
    let mx = selected
        .iter()
        .map(|&i| logits[i] as f64 / t)
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = selected
        .iter()
        .map(|&i| ((logits[i] as f64 / t) - mx).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (rank, (&idx, &w)) in selected.iter().zip(weights.iter()).enumerate() {
        acc += w;
        if u < acc {
            return (idx as u16, rank);
        }
    }
    ((*selected.last().unwrap()) as u16, k - 1)
}

fn rms_norm_row(x: &[f32], gain: &Mat<f32>) -> Vec<f32> {
    let n = x.len();
    let ms: f32 = x.iter().map(|&t| t * t).sum::<f32>() / n as f32;
    let r = (ms + 1e-6f32).sqrt().recip();
    x.iter()
        .zip(gain.row(0))
        .map(|(&v, &g)| v * r * g)
        .collect()
}

/// `y_j = Σ_i x_i W[i][j]`, ascending `i` — the same accumulation order as
/// one row of the graph matmul.
fn matvec(x: &[f32], w: &Mat<f32>) -> Vec<f32> {
    debug_assert_eq!(x.len(), w.rows());
    let mut out = vec![0.0f32; w.cols()];
    for (i, &xv) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(i)) {
            *o += xv * wv;
        }
    }
    out
}

fn add_bias(x: &mut [f32], b: &Mat<f32>) {
    for (v, &bv) in x.iter_mut().zip(b.row(0)) {
        *v += bv;
    }
}
