//! Single-pass temporal refinement of feature volumes.
//!
//! A `(b, t, h, w, c)` feature volume is reshaped so every spatial location
//! becomes an independent length-`t` sequence; one multi-head self-attention
//! pass over that axis produces a correction that merges back through a
//! residual connection. With the output projection zero-initialized the
//! refiner starts as the identity. Training reconstructs clean features
//! from degraded ones under a region mask that confines the loss to frames
//! 6..10 and the masked cells.

mod mask;
mod train;

pub use mask::{
    build_mask, load_landmark_frames, parse_landmark_frame, LandmarkSet, RegionMask,
    DEFAULT_LANDMARK_INDICES, DEFAULT_MARGIN_FRACTION,
};
pub use train::{grad_check_etm, mean_refined_loss, synthetic_sequence, train_etm, EtmSample, EtmTrainReport};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::nn::{AttnCfg, Graph, Mat, Real, Var};

const ETM_MAGIC: &[u8; 4] = b"TETM";
const ETM_VERSION: u16 = 1;

/// Reconstruction loss covers frames 6..10 (1-based) of a 10-frame volume.
pub const LOSS_FRAMES: std::ops::Range<usize> = 5..10;
pub const LOSS_VOLUME_FRAMES: usize = 10;

/// Dense `(b, t, h, w, c)` feature tensor, row-major in that index order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVolume {
    pub b: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    data: Vec<f32>,
}

impl FeatureVolume {
    pub fn zeros(b: usize, t: usize, h: usize, w: usize, c: usize) -> Self {
        FeatureVolume { b, t, h, w, c, data: vec![0.0; b * t * h * w * c] }
    }

    pub fn from_vec(b: usize, t: usize, h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != b * t * h * w * c {
            return Err(Error::validation(format!(
                "volume data length {} does not match {b}×{t}×{h}×{w}×{c}",
                data.len()
            )));
        }
        if b == 0 || t == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::validation("all volume dims must be >= 1"));
        }
        Ok(FeatureVolume { b, t, h, w, c, data })
    }

    #[inline]
    fn offset(&self, bi: usize, ti: usize, hi: usize, wi: usize, ci: usize) -> usize {
        ((((bi * self.t) + ti) * self.h + hi) * self.w + wi) * self.c + ci
    }

    #[inline]
    pub fn get(&self, bi: usize, ti: usize, hi: usize, wi: usize, ci: usize) -> f32 {
        self.data[self.offset(bi, ti, hi, wi, ci)]
    }

    #[inline]
    pub fn set(&mut self, bi: usize, ti: usize, hi: usize, wi: usize, ci: usize, v: f32) {
        let o = self.offset(bi, ti, hi, wi, ci);
        self.data[o] = v;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack volumes along the batch axis.
    pub fn concat_batch(volumes: &[&FeatureVolume]) -> Result<FeatureVolume> {
        let first = volumes.first().ok_or_else(|| Error::validation("empty batch"))?;
        let (t, h, w, c) = (first.t, first.h, first.w, first.c);
        let mut data = Vec::new();
        let mut b = 0;
        for v in volumes {
            if (v.t, v.h, v.w, v.c) != (t, h, w, c) {
                return Err(Error::mismatch("volumes differ in shape".to_string()));
            }
            data.extend_from_slice(&v.data);
            b += v.b;
        }
        FeatureVolume::from_vec(b, t, h, w, c, data)
    }

    pub fn slice_batch(&self, bi: usize) -> FeatureVolume {
        let stride = self.t * self.h * self.w * self.c;
        FeatureVolume {
            b: 1,
            t: self.t,
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data[bi * stride..(bi + 1) * stride].to_vec(),
        }
    }
}

/// Sequence view of a volume: `b·h·w` temporal rows, each `t × c`,
/// materialized as a `(b·h·w·t) × c` matrix with rows grouped by location.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalView {
    pub rows: usize,
    pub t: usize,
    pub c: usize,
    pub mat: Mat<f32>,
    dims: (usize, usize, usize, usize, usize),
}

/// Bijective relabeling `(b,t,h,w,c) → ((b·h·w) × t × c)`.
pub fn reshape_temporal(x: &FeatureVolume) -> TemporalView {
    let rows = x.b * x.h * x.w;
    let mut mat = Mat::zeros(rows * x.t, x.c);
    let mut r = 0;
    for bi in 0..x.b {
        for hi in 0..x.h {
            for wi in 0..x.w {
                for ti in 0..x.t {
                    for ci in 0..x.c {
                        mat.set(r, ci, x.get(bi, ti, hi, wi, ci));
                    }
                    r += 1;
                }
            }
        }
    }
    TemporalView { rows, t: x.t, c: x.c, mat, dims: (x.b, x.t, x.h, x.w, x.c) }
}

impl TemporalView {
    /// Inverse of [`reshape_temporal`]; bit-exact.
    pub fn to_volume(&self) -> FeatureVolume {
        let (b, t, h, w, c) = self.dims;
        let mut out = FeatureVolume::zeros(b, t, h, w, c);
        let mut r = 0;
        for bi in 0..b {
            for hi in 0..h {
                for wi in 0..w {
                    for ti in 0..t {
                        for ci in 0..c {
                            out.set(bi, ti, hi, wi, ci, self.mat.get(r, ci));
                        }
                        r += 1;
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ETMConfig {
    /// Feature channels `c`.
    pub channels: usize,
    /// Longest temporal extent the position table supports.
    pub t_max: usize,
    pub n_heads: usize,
    /// Patch edge for the toy frame encoder/decoder.
    pub patch_size: usize,
    /// Start as the identity map (zero output projection).
    pub zero_init_output: bool,
}

impl Default for ETMConfig {
    fn default() -> Self {
        ETMConfig { channels: 8, t_max: 10, n_heads: 2, patch_size: 4, zero_init_output: true }
    }
}

impl ETMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.t_max == 0 || self.n_heads == 0 || self.patch_size == 0 {
            return Err(Error::validation("ETM dimensions must be positive"));
        }
        if self.channels % self.n_heads != 0 {
            return Err(Error::validation("channels must divide by n_heads"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ETMParams {
    pub config: ETMConfig,
    pub wq: Mat<f32>,
    pub wk: Mat<f32>,
    pub wv: Mat<f32>,
    /// Output projection; zero-initialized so refinement starts as identity.
    pub wo: Mat<f32>,
    /// Learnable temporal position table, `t_max × c`.
    pub pos_emb: Mat<f32>,
    pub patch_enc_w: Mat<f32>,
    pub patch_enc_b: Mat<f32>,
    pub patch_dec_w: Mat<f32>,
    pub patch_dec_b: Mat<f32>,
}

impl ETMParams {
    pub fn seeded(config: ETMConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let p2 = config.patch_size * config.patch_size;
        let std = 1.0 / (c as f64).sqrt();
        Ok(ETMParams {
            wq: Mat::randn(c, c, std, &mut rng),
            wk: Mat::randn(c, c, std, &mut rng),
            wv: Mat::randn(c, c, std, &mut rng),
            wo: if config.zero_init_output {
                Mat::zeros(c, c)
            } else {
                Mat::randn(c, c, std, &mut rng)
            },
            pos_emb: Mat::randn(config.t_max, c, 0.1, &mut rng),
            patch_enc_w: Mat::randn(p2, c, 1.0 / (p2 as f64).sqrt(), &mut rng),
            patch_enc_b: Mat::zeros(1, c),
            patch_dec_w: Mat::randn(c, p2, 1.0 / (c as f64).sqrt(), &mut rng),
            patch_dec_b: Mat::zeros(1, p2),
            config,
        })
    }

    /// Attention-side parameters (the trainable set), declaration order.
    pub fn attn_params(&self) -> [&Mat<f32>; 5] {
        [&self.wq, &self.wk, &self.wv, &self.wo, &self.pos_emb]
    }

    pub fn attn_params_mut(&mut self) -> [&mut Mat<f32>; 5] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo, &mut self.pos_emb]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        io::write_magic(w, ETM_MAGIC)?;
        io::write_u16(w, ETM_VERSION)?;
        io::write_u32(w, self.config.channels as u32)?;
        io::write_u32(w, self.config.t_max as u32)?;
        io::write_u32(w, self.config.n_heads as u32)?;
        io::write_u32(w, self.config.patch_size as u32)?;
        io::write_u16(w, self.config.zero_init_output as u16)?;
        for p in self.all_params() {
            io::write_f32_slice(w, p.data())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read(&mut r)
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        io::expect_magic(r, ETM_MAGIC)?;
        let version = io::read_u16(r)?;
        io::check_version(version, ETM_VERSION, "refiner checkpoint")?;
        let config = ETMConfig {
            channels: io::read_u32(r)? as usize,
            t_max: io::read_u32(r)? as usize,
            n_heads: io::read_u32(r)? as usize,
            patch_size: io::read_u32(r)? as usize,
            zero_init_output: io::read_u16(r)? != 0,
        };
        let mut out = ETMParams::seeded(config, 0)?;
        for p in out.all_params_mut() {
            let (rows, cols) = (p.rows(), p.cols());
            *p = Mat::from_vec(rows, cols, io::read_f32_vec(r, rows * cols)?);
        }
        Ok(out)
    }

    fn all_params(&self) -> [&Mat<f32>; 9] {
        [
            &self.wq, &self.wk, &self.wv, &self.wo, &self.pos_emb,
            &self.patch_enc_w, &self.patch_enc_b, &self.patch_dec_w, &self.patch_dec_b,
        ]
    }

    fn all_params_mut(&mut self) -> [&mut Mat<f32>; 9] {
        [
            &mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo, &mut self.pos_emb,
            &mut self.patch_enc_w, &mut self.patch_enc_b, &mut self.patch_dec_w, &mut self.patch_dec_b,
        ]
    }

    /// Encode grayscale frames (`t` matrices of `H×W`) into a feature volume
    /// via non-overlapping patches.
    pub fn encode_frames(&self, frames: &[Mat<f32>]) -> Result<FeatureVolume> {
        let p = self.config.patch_size;
        let first = frames.first().ok_or_else(|| Error::validation("no frames"))?;
        let (ih, iw) = (first.rows(), first.cols());
        if ih % p != 0 || iw % p != 0 {
            return Err(Error::validation(format!(
                "frame {ih}×{iw} does not tile into {p}×{p} patches"
            )));
        }
        let (h, w) = (ih / p, iw / p);
        let c = self.config.channels;
        let mut out = FeatureVolume::zeros(1, frames.len(), h, w, c);
        for (ti, frame) in frames.iter().enumerate() {
            if frame.rows() != ih || frame.cols() != iw {
                return Err(Error::mismatch("frames differ in size".to_string()));
            }
            for hi in 0..h {
                for wi in 0..w {
                    let mut patch = Vec::with_capacity(p * p);
                    for dy in 0..p {
                        for dx in 0..p {
                            patch.push(frame.get(hi * p + dy, wi * p + dx));
                        }
                    }
                    for ci in 0..c {
                        let mut acc = self.patch_enc_b.get(0, ci);
                        for (i, &v) in patch.iter().enumerate() {
                            acc += v * self.patch_enc_w.get(i, ci);
                        }
                        out.set(0, ti, hi, wi, ci, acc);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Linear patch decoder back to grayscale frames.
    pub fn decode_frames(&self, x: &FeatureVolume) -> Result<Vec<Mat<f32>>> {
        if x.b != 1 {
            return Err(Error::validation("decode_frames expects a single-batch volume"));
        }
        let p = self.config.patch_size;
        let mut frames = Vec::with_capacity(x.t);
        for ti in 0..x.t {
            let mut frame = Mat::zeros(x.h * p, x.w * p);
            for hi in 0..x.h {
                for wi in 0..x.w {
                    for j in 0..p * p {
                        let mut acc = self.patch_dec_b.get(0, j);
                        for ci in 0..x.c {
                            acc += x.get(0, ti, hi, wi, ci) * self.patch_dec_w.get(ci, j);
                        }
                        frame.set(hi * p + j / p, wi * p + j % p, acc);
                    }
                }
            }
            frames.push(frame);
        }
        Ok(frames)
    }
}

/// Graph-side attention refinement over a temporal view. Returns the refined
/// `(rows·t × c)` matrix variable.
pub fn refine_graph<R: Real>(
    g: &mut Graph<R>,
    attn: &[Var; 5],
    x: Var,
    rows: usize,
    t: usize,
    n_heads: usize,
) -> Var {
    let [wq, wk, wv, wo, pos_emb] = *attn;
    let pos_t = g.gather_rows(pos_emb, (0..t).collect());
    let xp = g.add_block_broadcast(x, pos_t, rows);
    let q = g.matmul(xp, wq);
    let k = g.matmul(xp, wk);
    let v = g.matmul(xp, wv);
    let cfg = AttnCfg { heads: n_heads, blocks: rows, causal: false, rope: None };
    let a = g.attention(q, k, v, cfg);
    let o = g.matmul(a, wo);
    g.add(x, o)
}

/// One refinement pass: temporal self-attention merged through the residual
/// connection. With a zero output projection this is exactly the identity.
pub fn refine(params: &ETMParams, x: &FeatureVolume) -> Result<FeatureVolume> {
    params.config.validate()?;
    if x.c != params.config.channels {
        return Err(Error::mismatch(format!(
            "volume has {} channels, refiner expects {}",
            x.c, params.config.channels
        )));
    }
    if x.t > params.config.t_max {
        return Err(Error::validation(format!(
            "volume extends {} frames, position table holds {}",
            x.t, params.config.t_max
        )));
    }
    let view = reshape_temporal(x);
    let mut g = Graph::<f32>::new();
    let attn: [Var; 5] = {
        let ps = params.attn_params();
        [g.leaf(ps[0].clone()), g.leaf(ps[1].clone()), g.leaf(ps[2].clone()), g.leaf(ps[3].clone()), g.leaf(ps[4].clone())]
    };
    let x_var = g.leaf(view.mat.clone());
    let out = refine_graph(&mut g, &attn, x_var, view.rows, view.t, params.config.n_heads);
    debug_assert_eq!(g.attention_op_count(), 1);
    let refined = TemporalView {
        rows: view.rows,
        t: view.t,
        c: view.c,
        mat: g.value(out).clone(),
        dims: view.dims,
    };
    Ok(refined.to_volume())
}

/// Region-masked reconstruction loss over frames 6..10.
pub fn etm_loss(pred: &FeatureVolume, gt: &FeatureVolume, mask: &RegionMask) -> Result<f64> {
    if (pred.b, pred.t, pred.h, pred.w, pred.c) != (gt.b, gt.t, gt.h, gt.w, gt.c) {
        return Err(Error::mismatch("prediction and ground truth shapes differ".to_string()));
    }
    if pred.t != LOSS_VOLUME_FRAMES {
        return Err(Error::validation(format!(
            "loss is defined over {LOSS_VOLUME_FRAMES}-frame volumes, got t = {}",
            pred.t
        )));
    }
    if (mask.t, mask.h, mask.w) != (pred.t, pred.h, pred.w) {
        return Err(Error::mismatch("mask shape does not match volume".to_string()));
    }
    let mut total = 0.0f64;
    for bi in 0..pred.b {
        for ti in LOSS_FRAMES {
            for hi in 0..pred.h {
                for wi in 0..pred.w {
                    if !mask.get(ti, hi, wi) {
                        continue;
                    }
                    for ci in 0..pred.c {
                        let d = (gt.get(bi, ti, hi, wi, ci) - pred.get(bi, ti, hi, wi, ci)) as f64;
                        total += d * d;
                    }
                }
            }
        }
    }
    Ok(total)
}

/// The loss weights as a view-aligned `(rows·t × c)` multiplier: 1 on masked
/// cells of frames 6..10, 0 elsewhere.
pub fn loss_mask_matrix(mask: &RegionMask, b: usize, c: usize) -> Mat<f32> {
    let rows = b * mask.h * mask.w;
    let mut out = Mat::zeros(rows * mask.t, c);
    let mut r = 0;
    for _bi in 0..b {
        for hi in 0..mask.h {
            for wi in 0..mask.w {
                for ti in 0..mask.t {
                    if LOSS_FRAMES.contains(&ti) && mask.get(ti, hi, wi) {
                        for ci in 0..c {
                            out.set(r, ci, 1.0);
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests;
