//! Audio-conditioned autoregressive motion-token model.
//!
//! Each 200ms chunk contributes 10 audio positions followed by its motion
//! tokens; in the default dual-head mode the 32 tokens ride as 16 pairs, and
//! two output heads predict both members of the next pair from the same
//! prefix. A single-head mode (one token per position) exists for the
//! head-count ablation. Blocks are pre-norm: RMSNorm, causal multi-head
//! attention with rotary positions, RMSNorm, SiLU feed-forward.

mod decode;
mod train;

pub use decode::{
    audio_input_row, decode_chunk, head_logits, pair_input_row, sample_top_k, token_input_row,
    DecodeEvent, DecodeState, SamplerConfig,
};
pub use train::train_ar;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioEmbedding, FRAMES_PER_CHUNK};
use crate::error::{Error, Result};
use crate::io;
use crate::nn::{grad_check_named, AttnCfg, Graph, GradCheckReport, Mat, Real, Rope, Var};
use crate::rvq::TokenSequence;

const AR_MAGIC: &[u8; 4] = b"TARM";
const AR_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Pair positions, two output heads.
    Dual,
    /// One token per position, one head.
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ARConfig {
    pub head_mode: HeadMode,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Token vocabulary; must equal the codec's codebook size.
    pub vocab: usize,
    /// Audio embedding width the model consumes.
    pub audio_dim: usize,
    pub tokens_per_chunk: usize,
    pub rope_base: f64,
}

impl Default for ARConfig {
    fn default() -> Self {
        ARConfig {
            head_mode: HeadMode::Dual,
            d_model: 256,
            n_layers: 6,
            n_heads: 8,
            vocab: 256,
            audio_dim: 64,
            tokens_per_chunk: 32,
            rope_base: 10000.0,
        }
    }
}

impl ARConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.vocab == 0 {
            return Err(Error::validation("model dimensions must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::validation("d_model must divide by n_heads"));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::validation("head dim must be even for rotary encoding"));
        }
        if self.tokens_per_chunk == 0 || self.tokens_per_chunk % 2 != 0 {
            return Err(Error::validation("tokens_per_chunk must be positive and even"));
        }
        if self.vocab > u16::MAX as usize + 1 {
            return Err(Error::validation("vocab exceeds u16 token range"));
        }
        Ok(())
    }

    pub fn pairs_per_chunk(&self) -> usize {
        self.tokens_per_chunk / 2
    }

    /// Motion positions per chunk in the transformer sequence.
    pub fn motion_positions_per_chunk(&self) -> usize {
        match self.head_mode {
            HeadMode::Dual => self.pairs_per_chunk(),
            HeadMode::Single => self.tokens_per_chunk,
        }
    }

    pub fn positions_per_chunk(&self) -> usize {
        FRAMES_PER_CHUNK + self.motion_positions_per_chunk()
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenPair {
    pub first: u16,
    pub second: u16,
}

/// One chunk's worth of audio interleaved with its motion tokens, for as
/// many chunks as the clip holds. Strictly chronological.
#[derive(Clone, Debug)]
pub struct SequenceLayout {
    pub audio: Vec<AudioEmbedding>,
    pub tokens: Vec<u16>,
    pub tokens_per_chunk: usize,
}

impl SequenceLayout {
    pub fn chunks(&self) -> usize {
        self.audio.len()
    }

    pub fn pairs(&self) -> Vec<TokenPair> {
        self.tokens
            .chunks_exact(2)
            .map(|p| TokenPair { first: p[0], second: p[1] })
            .collect()
    }

    pub fn position_count(&self, cfg: &ARConfig) -> usize {
        self.chunks() * cfg.positions_per_chunk()
    }
}

/// Interleave per-chunk audio embeddings with the chunk's motion tokens.
pub fn build_sequence(
    audio: &[AudioEmbedding],
    tokens: &TokenSequence,
    cfg: &ARConfig,
) -> Result<SequenceLayout> {
    cfg.validate()?;
    if tokens.tokens_per_window != cfg.tokens_per_chunk {
        return Err(Error::mismatch(format!(
            "token sequence has {} tokens per window, model expects {}",
            tokens.tokens_per_window, cfg.tokens_per_chunk
        )));
    }
    if tokens.window_count != audio.len() {
        return Err(Error::mismatch(format!(
            "{} audio chunks vs {} token windows",
            audio.len(),
            tokens.window_count
        )));
    }
    for emb in audio {
        if emb.dim() != cfg.audio_dim {
            return Err(Error::mismatch(format!(
                "audio embedding dim {} vs model audio_dim {}",
                emb.dim(),
                cfg.audio_dim
            )));
        }
    }
    if let Some(&t) = tokens.tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::validation(format!("token {t} out of vocab {}", cfg.vocab)));
    }
    Ok(SequenceLayout {
        audio: audio.to_vec(),
        tokens: tokens.tokens.clone(),
        tokens_per_chunk: cfg.tokens_per_chunk,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub norm1: Mat<f32>,
    pub wq: Mat<f32>,
    pub wk: Mat<f32>,
    pub wv: Mat<f32>,
    pub wo: Mat<f32>,
    pub norm2: Mat<f32>,
    pub ffn_w1: Mat<f32>,
    pub ffn_b1: Mat<f32>,
    pub ffn_w2: Mat<f32>,
    pub ffn_b2: Mat<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ARParams {
    pub config: ARConfig,
    pub token_emb: Mat<f32>,
    /// Gain for the RMS normalization applied to raw audio rows.
    pub audio_norm: Mat<f32>,
    pub audio_w: Mat<f32>,
    pub audio_b: Mat<f32>,
    /// Learnable per-slot bias added to each member of a token pair.
    pub pair_bias: Option<Mat<f32>>,
    pub pair_w: Option<Mat<f32>>,
    pub pair_b: Option<Mat<f32>>,
    pub blocks: Vec<Block>,
    pub final_norm: Mat<f32>,
    pub head0_w: Mat<f32>,
    pub head0_b: Mat<f32>,
    pub head1_w: Option<Mat<f32>>,
    pub head1_b: Option<Mat<f32>>,
}

impl ARParams {
    pub fn seeded(config: ARConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let k = config.vocab;
        let dd = config.audio_dim;
        let f = config.ffn_dim();
        let attn_std = 1.0 / (d as f64).sqrt();
        // residual-branch outputs scaled down by depth
        let resid_std = attn_std / (2.0 * config.n_layers as f64).sqrt();
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                norm1: ones(1, d),
                wq: Mat::randn(d, d, attn_std, &mut rng),
                wk: Mat::randn(d, d, attn_std, &mut rng),
                wv: Mat::randn(d, d, attn_std, &mut rng),
                wo: Mat::randn(d, d, resid_std, &mut rng),
                norm2: ones(1, d),
                ffn_w1: Mat::randn(d, f, attn_std, &mut rng),
                ffn_b1: Mat::zeros(1, f),
                ffn_w2: Mat::randn(f, d, 1.0 / (f as f64).sqrt() / (2.0 * config.n_layers as f64).sqrt(), &mut rng),
                ffn_b2: Mat::zeros(1, d),
            })
            .collect();
        let dual = config.head_mode == HeadMode::Dual;
        Ok(ARParams {
            token_emb: Mat::randn(k, d, 0.02, &mut rng),
            audio_norm: ones(1, dd),
            audio_w: Mat::randn(dd, d, 1.0 / (dd as f64).sqrt(), &mut rng),
            audio_b: Mat::zeros(1, d),
            pair_bias: dual.then(|| Mat::randn(2, d, 0.02, &mut rng)),
            pair_w: dual.then(|| Mat::randn(2 * d, d, 1.0 / (2.0 * d as f64).sqrt(), &mut rng)),
            pair_b: dual.then(|| Mat::zeros(1, d)),
            blocks,
            final_norm: ones(1, d),
            head0_w: Mat::randn(d, k, attn_std, &mut rng),
            head0_b: Mat::zeros(1, k),
            head1_w: dual.then(|| Mat::randn(d, k, attn_std, &mut rng)),
            head1_b: dual.then(|| Mat::zeros(1, k)),
            config,
        })
    }

    /// All parameters in declaration (checkpoint) order.
    pub fn params(&self) -> Vec<&Mat<f32>> {
        let mut out: Vec<&Mat<f32>> = vec![&self.token_emb, &self.audio_norm, &self.audio_w, &self.audio_b];
        if let (Some(pb), Some(pw), Some(pbi)) = (&self.pair_bias, &self.pair_w, &self.pair_b) {
            out.push(pb);
            out.push(pw);
            out.push(pbi);
        }
        for b in &self.blocks {
            out.extend([
                &b.norm1, &b.wq, &b.wk, &b.wv, &b.wo, &b.norm2, &b.ffn_w1, &b.ffn_b1, &b.ffn_w2,
                &b.ffn_b2,
            ]);
        }
        out.push(&self.final_norm);
        out.push(&self.head0_w);
        out.push(&self.head0_b);
        if let (Some(w), Some(b)) = (&self.head1_w, &self.head1_b) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat<f32>> {
        let mut out: Vec<&mut Mat<f32>> =
            vec![&mut self.token_emb, &mut self.audio_norm, &mut self.audio_w, &mut self.audio_b];
        if let (Some(pb), Some(pw), Some(pbi)) =
            (self.pair_bias.as_mut(), self.pair_w.as_mut(), self.pair_b.as_mut())
        {
            out.push(pb);
            out.push(pw);
            out.push(pbi);
        }
        for b in &mut self.blocks {
            out.push(&mut b.norm1);
            out.push(&mut b.wq);
            out.push(&mut b.wk);
            out.push(&mut b.wv);
            out.push(&mut b.wo);
            out.push(&mut b.norm2);
            out.push(&mut b.ffn_w1);
            out.push(&mut b.ffn_b1);
            out.push(&mut b.ffn_w2);
            out.push(&mut b.ffn_b2);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head0_w);
        out.push(&mut self.head0_b);
        if let (Some(w), Some(b)) = (self.head1_w.as_mut(), self.head1_b.as_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = vec![
            "token_emb".to_string(),
            "audio_norm".to_string(),
            "audio_w".to_string(),
            "audio_b".to_string(),
        ];
        if self.pair_bias.is_some() {
            out.push("pair_bias".to_string());
            out.push("pair_w".to_string());
            out.push("pair_b".to_string());
        }
        for l in 0..self.blocks.len() {
            for n in ["norm1", "wq", "wk", "wv", "wo", "norm2", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"] {
                out.push(format!("block{l}.{n}"));
            }
        }
        out.push("final_norm".to_string());
        out.push("head0_w".to_string());
        out.push("head0_b".to_string());
        if self.head1_w.is_some() {
            out.push("head1_w".to_string());
            out.push("head1_b".to_string());
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        io::write_magic(w, AR_MAGIC)?;
        io::write_u16(w, AR_VERSION)?;
        io::write_u16(w, match self.config.head_mode { HeadMode::Dual => 0, HeadMode::Single => 1 })?;
        io::write_u32(w, self.config.d_model as u32)?;
        io::write_u32(w, self.config.n_layers as u32)?;
        io::write_u32(w, self.config.n_heads as u32)?;
        io::write_u32(w, self.config.vocab as u32)?;
        io::write_u32(w, self.config.audio_dim as u32)?;
        io::write_u32(w, self.config.tokens_per_chunk as u32)?;
        io::write_f32(w, self.config.rope_base as f32)?;
        for p in self.params() {
            io::write_f32_slice(w, p.data())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read(&mut r)
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        io::expect_magic(r, AR_MAGIC)?;
        let version = io::read_u16(r)?;
        io::check_version(version, AR_VERSION, "model checkpoint")?;
        let head_mode = match io::read_u16(r)? {
            0 => HeadMode::Dual,
            1 => HeadMode::Single,
            m => return Err(Error::format(format!("unknown head mode {m}"))),
        };
        let config = ARConfig {
            head_mode,
            d_model: io::read_u32(r)? as usize,
            n_layers: io::read_u32(r)? as usize,
            n_heads: io::read_u32(r)? as usize,
            vocab: io::read_u32(r)? as usize,
            audio_dim: io::read_u32(r)? as usize,
            tokens_per_chunk: io::read_u32(r)? as usize,
            rope_base: io::read_f32(r)? as f64,
        };
        config.validate()?;
        // read into a zeroed skeleton in declaration order
        let mut out = ARParams::seeded(config, 0)?;
        for p in out.params_mut() {
            let (rows, cols) = (p.rows(), p.cols());
            *p = Mat::from_vec(rows, cols, io::read_f32_vec(r, rows * cols)?);
        }
        Ok(out)
    }
}

fn ones(rows: usize, cols: usize) -> Mat<f32> {
    Mat::from_vec(rows, cols, vec![1.0; rows * cols])
}

/// Graph-side handles to every parameter, in declaration order.
pub struct ParamVars {
    pub all: Vec<Var>,
    dual: bool,
    n_layers: usize,
}

impl ParamVars {
    fn token_emb(&self) -> Var {
        self.all[0]
    }
    fn audio_norm(&self) -> Var {
        self.all[1]
    }
    fn audio_w(&self) -> Var {
        self.all[2]
    }
    fn audio_b(&self) -> Var {
        self.all[3]
    }
    fn pair_bias(&self) -> Var {
        self.all[4]
    }
    fn pair_w(&self) -> Var {
        self.all[5]
    }
    fn pair_b(&self) -> Var {
        self.all[6]
    }
    fn block(&self, l: usize) -> &[Var] {
        let base = if self.dual { 7 } else { 4 };
        &self.all[base + 10 * l..base + 10 * (l + 1)]
    }
    fn final_norm(&self) -> Var {
        let base = if self.dual { 7 } else { 4 } + 10 * self.n_layers;
        self.all[base]
    }
    fn head0(&self) -> (Var, Var) {
        let base = if self.dual { 7 } else { 4 } + 10 * self.n_layers;
        (self.all[base + 1], self.all[base + 2])
    }
    fn head1(&self) -> (Var, Var) {
        let base = if self.dual { 7 } else { 4 } + 10 * self.n_layers;
        (self.all[base + 3], self.all[base + 4])
    }
}

/// Insert every parameter into a graph (`trainable` marks them for
/// gradients). `R = f32` reproduces the stored values bit for bit.
pub fn insert_params<R: Real>(g: &mut Graph<R>, params: &ARParams, trainable: bool) -> ParamVars {
    let all = params
        .params()
        .iter()
        .map(|m| {
            let cast = m.cast::<R>();
            if trainable {
                g.param(cast)
            } else {
                g.leaf(cast)
            }
        })
        .collect();
    ParamVars {
        all,
        dual: params.config.head_mode == HeadMode::Dual,
        n_layers: params.config.n_layers,
    }
}

/// Build the interleaved input rows for one clip: per chunk, 10 projected
/// audio rows then the chunk's motion-token rows.
pub fn input_rows_graph<R: Real>(
    g: &mut Graph<R>,
    pv: &ParamVars,
    cfg: &ARConfig,
    layout: &SequenceLayout,
) -> Var {
    let chunks = layout.chunks();
    // audio: all chunks stacked, normalized, projected once
    let mut audio_raw = Mat::<R>::zeros(chunks * FRAMES_PER_CHUNK, cfg.audio_dim);
    for (c, emb) in layout.audio.iter().enumerate() {
        for fr in 0..FRAMES_PER_CHUNK {
            for (j, &v) in emb.row(fr).iter().enumerate() {
                audio_raw.set(c * FRAMES_PER_CHUNK + fr, j, R::from_f64(v as f64));
            }
        }
    }
    let audio_leaf = g.leaf(audio_raw);
    let audio_normed = g.rms_norm(audio_leaf, pv.audio_norm());
    let audio_proj = g.matmul(audio_normed, pv.audio_w());
    let audio_proj = g.add_row_broadcast(audio_proj, pv.audio_b());

    let motion_rows = match cfg.head_mode {
        HeadMode::Dual => {
            let idx0: Vec<usize> = layout.tokens.iter().step_by(2).map(|&t| t as usize).collect();
            let idx1: Vec<usize> =
                layout.tokens.iter().skip(1).step_by(2).map(|&t| t as usize).collect();
            let e0 = g.gather_rows(pv.token_emb(), idx0);
            let e1 = g.gather_rows(pv.token_emb(), idx1);
            let b0 = g.gather_rows(pv.pair_bias(), vec![0]);
            let b1 = g.gather_rows(pv.pair_bias(), vec![1]);
            let e0 = g.add_row_broadcast(e0, b0);
            let e1 = g.add_row_broadcast(e1, b1);
            let cat = g.concat_cols(e0, e1);
            let combined = g.matmul(cat, pv.pair_w());
            g.add_row_broadcast(combined, pv.pair_b())
        }
        HeadMode::Single => {
            let idx: Vec<usize> = layout.tokens.iter().map(|&t| t as usize).collect();
            g.gather_rows(pv.token_emb(), idx)
        }
    };

    // interleave chunk by chunk
    let mpc = cfg.motion_positions_per_chunk();
    let mut parts = Vec::with_capacity(2 * chunks);
    for c in 0..chunks {
        let a_idx: Vec<usize> = (c * FRAMES_PER_CHUNK..(c + 1) * FRAMES_PER_CHUNK).collect();
        parts.push(g.gather_rows(audio_proj, a_idx));
        let m_idx: Vec<usize> = (c * mpc..(c + 1) * mpc).collect();
        parts.push(g.gather_rows(motion_rows, m_idx));
    }
    g.concat_rows(&parts)
}

/// Run the transformer stack over pre-built input rows. `blocks` > 1 packs
/// that many equal-length sequences block-diagonally.
pub fn transformer_graph<R: Real>(
    g: &mut Graph<R>,
    pv: &ParamVars,
    cfg: &ARConfig,
    x: Var,
    blocks: usize,
) -> Var {
    let attn_cfg = AttnCfg {
        heads: cfg.n_heads,
        blocks,
        causal: true,
        rope: Some(Rope { base: cfg.rope_base, offset: 0 }),
    };
    let mut h = x;
    for l in 0..cfg.n_layers {
        let b = pv.block(l);
        let (norm1, wq, wk, wv, wo) = (b[0], b[1], b[2], b[3], b[4]);
        let (norm2, w1, b1, w2, b2) = (b[5], b[6], b[7], b[8], b[9]);
        let a_in = g.rms_norm(h, norm1);
        let q = g.matmul(a_in, wq);
        let k = g.matmul(a_in, wk);
        let v = g.matmul(a_in, wv);
        let attn = g.attention(q, k, v, attn_cfg);
        let attn = g.matmul(attn, wo);
        h = g.add(h, attn);
        let f_in = g.rms_norm(h, norm2);
        let f1 = g.matmul(f_in, w1);
        let f1 = g.add_row_broadcast(f1, b1);
        let f1 = g.silu(f1);
        let f2 = g.matmul(f1, w2);
        let f2 = g.add_row_broadcast(f2, b2);
        h = g.add(h, f2);
    }
    g.rms_norm(h, pv.final_norm())
}

/// Positions whose transformer output predicts motion position `j` of each
/// chunk: the last audio row for the chunk's first motion position, then
/// each motion row predicts its successor.
pub fn predictor_positions(cfg: &ARConfig, chunks: usize) -> Vec<usize> {
    let ppc = cfg.positions_per_chunk();
    let mpc = cfg.motion_positions_per_chunk();
    let mut out = Vec::with_capacity(chunks * mpc);
    for c in 0..chunks {
        let base = c * ppc;
        for j in 0..mpc {
            out.push(base + FRAMES_PER_CHUNK - 1 + j);
        }
    }
    out
}

/// Per-position logits for every motion position of a clip.
#[derive(Clone, Debug)]
pub struct PairLogits {
    /// `(positions × vocab)`; in dual mode one row per pair position.
    pub head0: Mat<f32>,
    pub head1: Option<Mat<f32>>,
}

/// Full forward pass over one clip. Deterministic; used for evaluation and
/// as the no-cache reference the incremental decoder is checked against.
pub fn forward(params: &ARParams, layout: &SequenceLayout) -> Result<PairLogits> {
    let cfg = &params.config;
    validate_layout(cfg, layout)?;
    let mut g = Graph::<f32>::new();
    let pv = insert_params(&mut g, params, false);
    let x = input_rows_graph(&mut g, &pv, cfg, layout);
    let hidden = transformer_graph(&mut g, &pv, cfg, x, 1);
    let pred = g.gather_rows(hidden, predictor_positions(cfg, layout.chunks()));
    let (h0w, h0b) = pv.head0();
    let l0 = g.matmul(pred, h0w);
    let l0 = g.add_row_broadcast(l0, h0b);
    let head0 = g.value(l0).clone();
    let head1 = match cfg.head_mode {
        HeadMode::Dual => {
            let (h1w, h1b) = pv.head1();
            let l1 = g.matmul(pred, h1w);
            let l1 = g.add_row_broadcast(l1, h1b);
            Some(g.value(l1).clone())
        }
        HeadMode::Single => None,
    };
    Ok(PairLogits { head0, head1 })
}

fn validate_layout(cfg: &ARConfig, layout: &SequenceLayout) -> Result<()> {
    if layout.tokens_per_chunk != cfg.tokens_per_chunk {
        return Err(Error::mismatch("layout/model tokens_per_chunk".to_string()));
    }
    if layout.tokens.len() != layout.chunks() * cfg.tokens_per_chunk {
        return Err(Error::mismatch("layout token count".to_string()));
    }
    for emb in &layout.audio {
        if emb.dim() != cfg.audio_dim {
            return Err(Error::mismatch("layout audio dim".to_string()));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArLoss {
    pub head0: f64,
    pub head1: f64,
    /// Σ (ℓ0ⱼ − ℓ1ⱼ)² over positions (0 in single-head mode).
    pub regularizer: f64,
    pub total: f64,
    pub positions: usize,
}

/// Dual-head loss from already-computed logits: per pair position, the two
/// cross-entropies plus the squared head-loss gap.
pub fn ar_loss(logits: &PairLogits, labels: &[TokenPair]) -> Result<ArLoss> {
    let n = logits.head0.rows();
    if labels.len() != n {
        return Err(Error::mismatch(format!(
            "{} label pairs for {} logit positions",
            labels.len(),
            n
        )));
    }
    match &logits.head1 {
        Some(head1) => {
            let mut l0_sum = 0.0;
            let mut l1_sum = 0.0;
            let mut reg = 0.0;
            for j in 0..n {
                let l0 = ce_row(logits.head0.row(j), labels[j].first as usize)?;
                let l1 = ce_row(head1.row(j), labels[j].second as usize)?;
                l0_sum += l0;
                l1_sum += l1;
                reg += (l0 - l1) * (l0 - l1);
            }
            Ok(ArLoss {
                head0: l0_sum,
                head1: l1_sum,
                regularizer: reg,
                total: l0_sum + l1_sum + reg,
                positions: n,
            })
        }
        None => {
            // single-head: labels arrive as pairs of consecutive tokens over
            // twice as many positions is not representable; callers in
            // single-head mode score tokens directly
            let mut sum = 0.0;
            for j in 0..n {
                sum += ce_row(logits.head0.row(j), labels[j].first as usize)?;
            }
            Ok(ArLoss { head0: sum, head1: 0.0, regularizer: 0.0, total: sum, positions: n })
        }
    }
}

fn ce_row(row: &[f32], label: usize) -> Result<f64> {
    if label >= row.len() {
        return Err(Error::validation(format!("label {label} out of vocab {}", row.len())));
    }
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let s: f64 = row.iter().map(|&x| ((x as f64) - m).exp()).sum();
    Ok(m + s.ln() - row[label] as f64)
}

/// Graph form of the training loss over a batch of equal-length clips.
///
/// Returns `(total, sum_l0, sum_l1, reg)`; in single-head mode `total`
/// equals the summed cross-entropy and the other terms are absent.
pub fn loss_graph<R: Real>(
    g: &mut Graph<R>,
    pv: &ParamVars,
    cfg: &ARConfig,
    batch: &[&SequenceLayout],
    with_regularizer: bool,
) -> Result<(Var, Var, Option<Var>, Option<Var>)> {
    assert!(!batch.is_empty());
    let chunks = batch[0].chunks();
    for l in batch {
        if l.chunks() != chunks {
            return Err(Error::mismatch("batched clips must have equal chunk counts".to_string()));
        }
        validate_layout(cfg, l)?;
    }
    let parts: Vec<Var> = batch
        .iter()
        .map(|l| input_rows_graph(g, pv, cfg, l))
        .collect();
    let x = g.concat_rows(&parts);
    let hidden = transformer_graph(g, pv, cfg, x, batch.len());

    let per_clip = cfg.positions_per_chunk() * chunks;
    let base_positions = predictor_positions(cfg, chunks);
    let mut pred_idx = Vec::with_capacity(batch.len() * base_positions.len());
    for b in 0..batch.len() {
        pred_idx.extend(base_positions.iter().map(|p| p + b * per_clip));
    }
    let pred = g.gather_rows(hidden, pred_idx);

    match cfg.head_mode {
        HeadMode::Dual => {
            let mut labels0 = Vec::new();
            let mut labels1 = Vec::new();
            for l in batch {
                for p in l.pairs() {
                    labels0.push(p.first as usize);
                    labels1.push(p.second as usize);
                }
            }
            let (h0w, h0b) = pv.head0();
            let (h1w, h1b) = pv.head1();
            let l0 = g.matmul(pred, h0w);
            let l0 = g.add_row_broadcast(l0, h0b);
            let l1 = g.matmul(pred, h1w);
            let l1 = g.add_row_broadcast(l1, h1b);
            let ce0 = g.cross_entropy_rows(l0, labels0);
            let ce1 = g.cross_entropy_rows(l1, labels1);
            let s0 = g.sum(ce0);
            let s1 = g.sum(ce1);
            let mut total = g.add(s0, s1);
            let reg = if with_regularizer {
                let gap = g.sub(ce0, ce1);
                let gap2 = g.square(gap);
                let r = g.sum(gap2);
                total = g.add(total, r);
                Some(r)
            } else {
                None
            };
            Ok((total, s0, Some(s1), reg))
        }
        HeadMode::Single => {
            let mut labels = Vec::new();
            for l in batch {
                labels.extend(l.tokens.iter().map(|&t| t as usize));
            }
            let (h0w, h0b) = pv.head0();
            let lg = g.matmul(pred, h0w);
            let lg = g.add_row_broadcast(lg, h0b);
            let ce = g.cross_entropy_rows(lg, labels);
            let s = g.sum(ce);
            Ok((s, s, None, None))
        }
    }
}

/// Summed losses and per-position statistics for evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArEval {
    /// Mean cross-entropy per motion token.
    pub per_token_ce: f64,
    /// Mean |ℓ0ⱼ − ℓ1ⱼ| over pair positions (0 in single-head mode).
    pub mean_head_gap: f64,
    pub positions: usize,
}

pub fn evaluate(params: &ARParams, layouts: &[SequenceLayout]) -> Result<ArEval> {
    let mut ce_sum = 0.0;
    let mut gap_sum = 0.0;
    let mut tokens = 0usize;
    let mut positions = 0usize;
    for layout in layouts {
        let logits = forward(params, layout)?;
        match params.config.head_mode {
            HeadMode::Dual => {
                let labels = layout.pairs();
                for (j, p) in labels.iter().enumerate() {
                    let l0 = ce_row(logits.head0.row(j), p.first as usize)?;
                    let l1 = ce_row(logits.head1.as_ref().unwrap().row(j), p.second as usize)?;
                    ce_sum += l0 + l1;
                    gap_sum += (l0 - l1).abs();
                    tokens += 2;
                    positions += 1;
                }
            }
            HeadMode::Single => {
                for (j, &t) in layout.tokens.iter().enumerate() {
                    ce_sum += ce_row(logits.head0.row(j), t as usize)?;
                    tokens += 1;
                    positions += 1;
                }
            }
        }
    }
    Ok(ArEval {
        per_token_ce: ce_sum / tokens.max(1) as f64,
        mean_head_gap: if params.config.head_mode == HeadMode::Dual {
            gap_sum / positions.max(1) as f64
        } else {
            0.0
        },
        positions,
    })
}

/// Analytic-vs-numeric gradient report for the full training loss on a tiny
/// model.
pub fn grad_check_ar(params: &ARParams, layout: &SequenceLayout) -> Result<GradCheckReport> {
    validate_layout(&params.config, layout)?;
    let names = params.param_names();
    let mats: Vec<(String, Mat<f64>)> = params
        .params()
        .iter()
        .zip(names)
        .map(|(m, n)| (n, m.cast::<f64>()))
        .collect();
    let cfg = params.config.clone();
    let dual = cfg.head_mode == HeadMode::Dual;
    let n_layers = cfg.n_layers;
    let layout = layout.clone();
    Ok(grad_check_named(&mats, move |g, vars| {
        let pv = ParamVars { all: vars.to_vec(), dual, n_layers };
        let (total, _, _, _) = loss_graph(g, &pv, &cfg, &[&layout], true).expect("loss graph");
        total
    }))
}

#[cfg(test)]
mod tests;
