//! Residual vector quantization codec for motion windows.
//!
//! A 4-frame window (300 values) runs through a two-layer feed-forward
//! encoder into `slots` latent vectors of `latent_dim` each; every slot is
//! quantized by `residual_stages` shared codebooks, each stage picking the
//! entry nearest to the residual the previous stages left behind. Tokens
//! come out slot-major (slot 0 stage 0..S, slot 1 stage 0..S, ...), so the
//! default 8 slots × 4 stages give 32 tokens per window. A mirrored decoder
//! maps quantized latents back to a window.

mod train;

pub use train::{grad_check_vq, train_codebooks, RvqEpochStats, RvqTrainConfig};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::motion::{flatten_window, unflatten_window, MotionWindow, FRAME_DIM};
use crate::nn::{Graph, Mat, Real, Var};

const CODEC_MAGIC: &[u8; 4] = b"TRVQ";
const CODEC_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RVQConfig {
    pub window_frames: usize,
    pub tokens_per_window: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub residual_stages: usize,
    pub commitment_weight: f32,
    /// Frame rate of windows this codec was built for.
    pub frame_rate_hz: f32,
}

impl Default for RVQConfig {
    fn default() -> Self {
        RVQConfig {
            window_frames: 4,
            tokens_per_window: 32,
            latent_dim: 64,
            codebook_size: 256,
            residual_stages: 4,
            commitment_weight: 1.0,
            frame_rate_hz: 20.0,
        }
    }
}

impl RVQConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_frames == 0
            || self.tokens_per_window == 0
            || self.latent_dim == 0
            || self.codebook_size == 0
            || self.residual_stages == 0
        {
            return Err(Error::validation("all codec dimensions must be positive"));
        }
        if self.tokens_per_window % self.residual_stages != 0 {
            return Err(Error::validation(format!(
                "tokens_per_window {} must divide by residual_stages {}",
                self.tokens_per_window, self.residual_stages
            )));
        }
        if self.codebook_size > u16::MAX as usize + 1 {
            return Err(Error::validation("codebook_size exceeds u16 token range"));
        }
        if self.commitment_weight < 0.0 {
            return Err(Error::validation("commitment_weight must be >= 0"));
        }
        Ok(())
    }

    /// Latent vectors per window.
    pub fn slots(&self) -> usize {
        self.tokens_per_window / self.residual_stages
    }

    pub fn input_dim(&self) -> usize {
        self.window_frames * FRAME_DIM
    }

    pub fn latent_total(&self) -> usize {
        self.slots() * self.latent_dim
    }

    pub fn hidden(&self) -> usize {
        4 * self.latent_total()
    }
}

/// Discrete tokens for one or more consecutive windows.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<u16>,
    pub window_count: usize,
    pub tokens_per_window: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u16>, tokens_per_window: usize, codebook_size: usize) -> Result<Self> {
        if tokens_per_window == 0 || tokens.len() % tokens_per_window != 0 {
            return Err(Error::validation(format!(
                "token count {} does not tile into windows of {tokens_per_window}",
                tokens.len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| (t as usize) >= codebook_size) {
            return Err(Error::validation(format!(
                "token {t} out of range for codebook size {codebook_size}"
            )));
        }
        let window_count = tokens.len() / tokens_per_window;
        Ok(TokenSequence { tokens, window_count, tokens_per_window })
    }

    pub fn window(&self, i: usize) -> &[u16] {
        &self.tokens[i * self.tokens_per_window..(i + 1) * self.tokens_per_window]
    }

    /// Raw u16 little-endian stream.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.tokens.iter().flat_map(|t| t.to_le_bytes()).collect()
    }

    pub fn from_bytes(bytes: &[u8], tokens_per_window: usize, codebook_size: usize) -> Result<Self> {
        if bytes.len() % 2 != 0 {
            return Err(Error::format("token stream has odd byte length".to_string()));
        }
        let tokens = bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        TokenSequence::new(tokens, tokens_per_window, codebook_size)
    }
}

/// Result of quantizing one window's latent.
#[derive(Clone, Debug)]
pub struct Quantized {
    pub tokens: Vec<u16>,
    /// Sum of chosen codebook entries, `slots × latent_dim`.
    pub z_hat: Mat<f32>,
    /// Residual L2 norm after each stage, per slot.
    pub residual_norms: Vec<Vec<f32>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VqLoss {
    pub recon: f64,
    pub commit: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RVQCodec {
    pub config: RVQConfig,
    pub enc_w1: Mat<f32>,
    pub enc_b1: Mat<f32>,
    pub enc_w2: Mat<f32>,
    pub enc_b2: Mat<f32>,
    pub dec_w1: Mat<f32>,
    pub dec_b1: Mat<f32>,
    pub dec_w2: Mat<f32>,
    pub dec_b2: Mat<f32>,
    /// One `K × latent_dim` codebook per residual stage, shared across slots.
    pub codebooks: Vec<Mat<f32>>,
}

impl RVQCodec {
    pub fn seeded(config: RVQConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d_in, hid, d_lat) = (config.input_dim(), config.hidden(), config.latent_total());
        let codec = RVQCodec {
            enc_w1: Mat::randn(d_in, hid, 1.0 / (d_in as f64).sqrt(), &mut rng),
            enc_b1: Mat::zeros(1, hid),
            enc_w2: Mat::randn(hid, d_lat, 1.0 / (hid as f64).sqrt(), &mut rng),
            enc_b2: Mat::zeros(1, d_lat),
            dec_w1: Mat::randn(d_lat, hid, 1.0 / (d_lat as f64).sqrt(), &mut rng),
            dec_b1: Mat::zeros(1, hid),
            dec_w2: Mat::randn(hid, d_in, 1.0 / (hid as f64).sqrt(), &mut rng),
            dec_b2: Mat::zeros(1, d_in),
            codebooks: (0..config.residual_stages)
                .map(|_| Mat::randn(config.codebook_size, config.latent_dim, 0.1, &mut rng))
                .collect(),
            config,
        };
        Ok(codec)
    }

    /// Feed-forward parameters in declaration (checkpoint) order. Codebooks
    /// are excluded: they learn by moving averages, not gradients.
    pub fn ffn_params(&self) -> [&Mat<f32>; 8] {
        [
            &self.enc_w1, &self.enc_b1, &self.enc_w2, &self.enc_b2,
            &self.dec_w1, &self.dec_b1, &self.dec_w2, &self.dec_b2,
        ]
    }

    pub fn ffn_params_mut(&mut self) -> [&mut Mat<f32>; 8] {
        [
            &mut self.enc_w1, &mut self.enc_b1, &mut self.enc_w2, &mut self.enc_b2,
            &mut self.dec_w1, &mut self.dec_b1, &mut self.dec_w2, &mut self.dec_b2,
        ]
    }

    fn check_window(&self, w: &MotionWindow) -> Result<()> {
        if w.frames.len() != self.config.window_frames {
            return Err(Error::validation(format!(
                "window has {} frames, codec expects {}",
                w.frames.len(),
                self.config.window_frames
            )));
        }
        Ok(())
    }

    /// Batched encoder over flattened windows (`B × input_dim` rows).
    pub fn encode_flat(&self, x: &Mat<f32>) -> Mat<f32> {
        let h = affine(x, &self.enc_w1, &self.enc_b1).map(|v| v.tanh());
        affine(&h, &self.enc_w2, &self.enc_b2)
    }

    /// Batched decoder: `B × latent_total` rows to `B × input_dim`.
    pub fn decode_flat(&self, z: &Mat<f32>) -> Mat<f32> {
        let h = affine(z, &self.dec_w1, &self.dec_b1).map(|v| v.tanh());
        affine(&h, &self.dec_w2, &self.dec_b2)
    }

    /// Encode one window into its `slots × latent_dim` continuous latent.
    pub fn encode(&self, w: &MotionWindow) -> Result<Mat<f32>> {
        self.check_window(w)?;
        let x = Mat::from_vec(1, self.config.input_dim(), flatten_window(w));
        let flat = self.encode_flat(&x);
        Ok(Mat::from_vec(self.config.slots(), self.config.latent_dim, flat.data().to_vec()))
    }

    /// Stage-wise nearest-neighbor quantization of a latent. Ties break to
    /// the lowest codebook index.
    pub fn quantize(&self, z: &Mat<f32>) -> Result<Quantized> {
        let cfg = &self.config;
        if z.rows() != cfg.slots() || z.cols() != cfg.latent_dim {
            return Err(Error::validation(format!(
                "latent is {}×{}, codec expects {}×{}",
                z.rows(), z.cols(), cfg.slots(), cfg.latent_dim
            )));
        }
        if !z.all_finite() {
            return Err(Error::validation("latent contains non-finite values"));
        }
        let mut tokens = Vec::with_capacity(cfg.tokens_per_window);
        let mut z_hat = Mat::zeros(cfg.slots(), cfg.latent_dim);
        let mut residual_norms = Vec::with_capacity(cfg.slots());
        for slot in 0..cfg.slots() {
            let mut residual = z.row(slot).to_vec();
            let mut norms = Vec::with_capacity(cfg.residual_stages);
            for book in &self.codebooks {
                let token = nearest_entry(book, &residual);
                tokens.push(token as u16);
                let entry = book.row(token);
                for ((r, &e), q) in residual
                    .iter_mut()
                    .zip(entry.iter())
                    .zip(z_hat.row_mut(slot).iter_mut())
                {
                    *r -= e;
                    *q += e;
                }
                norms.push(residual.iter().map(|v| v * v).sum::<f32>().sqrt());
            }
            residual_norms.push(norms);
        }
        Ok(Quantized { tokens, z_hat, residual_norms })
    }

    /// Rebuild one window's latent from its tokens.
    pub fn dequantize_window(&self, window_tokens: &[u16]) -> Result<Mat<f32>> {
        let cfg = &self.config;
        if window_tokens.len() != cfg.tokens_per_window {
            return Err(Error::validation(format!(
                "expected {} tokens per window, got {}",
                cfg.tokens_per_window,
                window_tokens.len()
            )));
        }
        let mut z_hat = Mat::zeros(cfg.slots(), cfg.latent_dim);
        for slot in 0..cfg.slots() {
            for (stage, book) in self.codebooks.iter().enumerate() {
                let token = window_tokens[slot * cfg.residual_stages + stage] as usize;
                if token >= cfg.codebook_size {
                    return Err(Error::validation(format!(
                        "token {token} out of range (K = {})",
                        cfg.codebook_size
                    )));
                }
                for (q, &e) in z_hat.row_mut(slot).iter_mut().zip(book.row(token)) {
                    *q += e;
                }
            }
        }
        Ok(z_hat)
    }

    /// Rebuild every window latent in a token sequence.
    pub fn dequantize(&self, seq: &TokenSequence) -> Result<Vec<Mat<f32>>> {
        if seq.tokens_per_window != self.config.tokens_per_window {
            return Err(Error::mismatch(format!(
                "sequence carries {} tokens per window, codec expects {}",
                seq.tokens_per_window, self.config.tokens_per_window
            )));
        }
        (0..seq.window_count)
            .map(|i| self.dequantize_window(seq.window(i)))
            .collect()
    }

    /// Decode a latent back into a motion window.
    pub fn decode(&self, z_hat: &Mat<f32>) -> Result<MotionWindow> {
        let cfg = &self.config;
        if z_hat.rows() != cfg.slots() || z_hat.cols() != cfg.latent_dim {
            return Err(Error::validation("latent shape mismatch in decode".to_string()));
        }
        let flat_in = Mat::from_vec(1, cfg.latent_total(), z_hat.data().to_vec());
        let out = self.decode_flat(&flat_in);
        unflatten_window(out.data(), cfg.frame_rate_hz)
    }

    /// Tokenize a window end to end.
    pub fn tokenize(&self, w: &MotionWindow) -> Result<TokenSequence> {
        let z = self.encode(w)?;
        let q = self.quantize(&z)?;
        TokenSequence::new(q.tokens, self.config.tokens_per_window, self.config.codebook_size)
    }

    /// Reconstruct a window from tokens.
    pub fn detokenize(&self, window_tokens: &[u16]) -> Result<MotionWindow> {
        let z_hat = self.dequantize_window(window_tokens)?;
        self.decode(&z_hat)
    }

    /// Quantization losses for one window: reconstruction through the
    /// straight-through latent, commitment of the encoder output to its
    /// quantized value, and their weighted sum.
    pub fn vq_loss(&self, w: &MotionWindow) -> Result<VqLoss> {
        self.check_window(w)?;
        let x = flatten_window(w);
        let z = self.encode(w)?;
        let q = self.quantize(&z)?;
        let z_hat_flat = Mat::from_vec(1, self.config.latent_total(), q.z_hat.data().to_vec());
        let y = self.decode_flat(&z_hat_flat);
        let recon: f64 = y
            .data()
            .iter()
            .zip(x.iter())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        let commit: f64 = z
            .data()
            .iter()
            .zip(q.z_hat.data().iter())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        Ok(VqLoss {
            recon,
            commit,
            total: recon + self.config.commitment_weight as f64 * commit,
        })
    }

    /// Mean reconstruction error (`L_recon` per window) over a dataset,
    /// running the full encode → quantize → dequantize → decode path.
    pub fn mean_recon_error(&self, windows: &[MotionWindow]) -> Result<f64> {
        let mut total = 0.0;
        for w in windows {
            let z = self.encode(w)?;
            let q = self.quantize(&z)?;
            let deq = self.dequantize_window(
                &TokenSequence::new(
                    q.tokens,
                    self.config.tokens_per_window,
                    self.config.codebook_size,
                )?
                .tokens,
            )?;
            let flat = Mat::from_vec(1, self.config.latent_total(), deq.data().to_vec());
            let y = self.decode_flat(&flat);
            let x = flatten_window(w);
            total += y
                .data()
                .iter()
                .zip(x.iter())
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum::<f64>();
        }
        Ok(total / windows.len() as f64)
    }

    // --- checkpoint ----------------------------------------------------------

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        io::write_magic(w, CODEC_MAGIC)?;
        io::write_u16(w, CODEC_VERSION)?;
        io::write_u32(w, self.config.window_frames as u32)?;
        io::write_u32(w, self.config.tokens_per_window as u32)?;
        io::write_u32(w, self.config.latent_dim as u32)?;
        io::write_u32(w, self.config.codebook_size as u32)?;
        io::write_u32(w, self.config.residual_stages as u32)?;
        io::write_f32(w, self.config.commitment_weight)?;
        io::write_f32(w, self.config.frame_rate_hz)?;
        for p in self.ffn_params() {
            io::write_f32_slice(w, p.data())?;
        }
        for book in &self.codebooks {
            io::write_f32_slice(w, book.data())?;
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self> {
        io::expect_magic(r, CODEC_MAGIC)?;
        let version = io::read_u16(r)?;
        io::check_version(version, CODEC_VERSION, "codec checkpoint")?;
        let config = RVQConfig {
            window_frames: io::read_u32(r)? as usize,
            tokens_per_window: io::read_u32(r)? as usize,
            latent_dim: io::read_u32(r)? as usize,
            codebook_size: io::read_u32(r)? as usize,
            residual_stages: io::read_u32(r)? as usize,
            commitment_weight: io::read_f32(r)?,
            frame_rate_hz: io::read_f32(r)?,
        };
        config.validate()?;
        let (d_in, hid, d_lat) = (config.input_dim(), config.hidden(), config.latent_total());
        let shapes = [
            (d_in, hid), (1, hid), (hid, d_lat), (1, d_lat),
            (d_lat, hid), (1, hid), (hid, d_in), (1, d_in),
        ];
        let mut mats = Vec::with_capacity(8);
        for (rows, cols) in shapes {
            mats.push(Mat::from_vec(rows, cols, io::read_f32_vec(r, rows * cols)?));
        }
        let mut codebooks = Vec::with_capacity(config.residual_stages);
        for _ in 0..config.residual_stages {
            codebooks.push(Mat::from_vec(
                config.codebook_size,
                config.latent_dim,
                io::read_f32_vec(r, config.codebook_size * config.latent_dim)?,
            ));
        }
        let mut it = mats.into_iter();
        Ok(RVQCodec {
            config,
            enc_w1: it.next().unwrap(),
            enc_b1: it.next().unwrap(),
            enc_w2: it.next().unwrap(),
            enc_b2: it.next().unwrap(),
            dec_w1: it.next().unwrap(),
            dec_b1: it.next().unwrap(),
            dec_w2: it.next().unwrap(),
            dec_b2: it.next().unwrap(),
            codebooks,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read(&mut r)
    }
}

fn affine(x: &Mat<f32>, w: &Mat<f32>, b: &Mat<f32>) -> Mat<f32> {
    let mut out = x.matmul(w);
    for i in 0..out.rows() {
        for (o, &bv) in out.row_mut(i).iter_mut().zip(b.row(0)) {
            *o += bv;
        }
    }
    out
}

/// Index of the codebook entry nearest to `v` (plain squared distance, ties
/// to the lowest index).
pub fn nearest_entry(book: &Mat<f32>, v: &[f32]) -> usize {
    let mut best = 0usize;
    let mut best_d = f32::INFINITY;
    for k in 0..book.rows() {
        let d: f32 = book
            .row(k)
            .iter()
            .zip(v.iter())
            .map(|(&e, &x)| (x - e) * (x - e))
            .sum();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Encoder half of the VQ loss graph: `x (B × input_dim)` to the continuous
/// latent `z (B × latent_total)`.
pub fn encoder_graph<R: Real>(g: &mut Graph<R>, ffn: &[Var; 8], x: Var) -> Var {
    let h = g.matmul(x, ffn[0]);
    let h = g.add_row_broadcast(h, ffn[1]);
    let h = g.tanh(h);
    let z = g.matmul(h, ffn[2]);
    g.add_row_broadcast(z, ffn[3])
}

/// Decoder forward: latent rows to reconstructed window rows.
pub fn decoder_forward_graph<R: Real>(g: &mut Graph<R>, ffn: &[Var; 8], input: Var) -> Var {
    let h2 = g.matmul(input, ffn[4]);
    let h2 = g.add_row_broadcast(h2, ffn[5]);
    let h2 = g.tanh(h2);
    let y = g.matmul(h2, ffn[6]);
    g.add_row_broadcast(y, ffn[7])
}

/// Straight-through decoder half: consumes the encoder output `z` and the
/// quantized latent `z_hat` (a constant with respect to gradients) and
/// returns `(recon, commit, total)` with
/// `total = recon + commitment_weight·commit`.
pub fn decoder_loss_graph<R: Real>(
    g: &mut Graph<R>,
    ffn: &[Var; 8],
    z: Var,
    z_hat: Var,
    x: Var,
    commitment_weight: f64,
) -> (Var, Var, Var) {
    // straight-through: value z_hat, gradient flows to z
    let gap = g.sub(z_hat, z);
    let gap = g.detach(gap);
    let st = g.add(z, gap);
    let y = decoder_forward_graph(g, ffn, st);

    let diff = g.sub(y, x);
    let sq = g.square(diff);
    let recon = g.sum(sq);

    let zh_const = g.detach(z_hat);
    let cdiff = g.sub(z, zh_const);
    let csq = g.square(cdiff);
    let commit = g.sum(csq);

    let scaled = g.scale(commit, R::from_f64(commitment_weight));
    let total = g.add(recon, scaled);
    (recon, commit, total)
}

/// Full straight-through VQ loss graph (encoder plus decoder halves).
pub fn vq_loss_graph<R: Real>(
    g: &mut Graph<R>,
    ffn: &[Var; 8],
    x: Var,
    z_hat: Var,
    commitment_weight: f64,
) -> (Var, Var, Var) {
    let z = encoder_graph(g, ffn, x);
    decoder_loss_graph(g, ffn, z, z_hat, x, commitment_weight)
}

#[cfg(test)]
pub(crate) fn test_window(scale: f32, rate: f32) -> MotionWindow {
    let frames = (0..4)
        .map(|f| {
            let vals: Vec<f32> = (0..FRAME_DIM)
                .map(|i| scale * ((i as f32 * 0.37 + f as f32 * 1.3).sin() * 0.5))
                .collect();
            crate::motion::MotionLatent::from_flat(&vals).unwrap()
        })
        .collect();
    MotionWindow::new(frames, rate).unwrap()
}

/// Codec whose encoder and decoder approximate the identity map to ~1e-7
/// (tanh linearized around zero). Requires `latent_total == input_dim`; the
/// quantization stages are left random and meant to be bypassed.
pub fn identity_stub_codec() -> RVQCodec {
    let config = RVQConfig {
        window_frames: 4,
        tokens_per_window: 4,
        latent_dim: 75,
        codebook_size: 4,
        residual_stages: 1,
        commitment_weight: 1.0,
        frame_rate_hz: 20.0,
    };
    assert_eq!(config.latent_total(), config.input_dim());
    let d = config.input_dim();
    let hid = config.hidden();
    let eps = 1e-3f32;
    let make_w1 = || {
        Mat::from_fn(d, hid, |i, j| {
            if j == i {
                eps
            } else if j == d + i {
                -eps
            } else {
                0.0
            }
        })
    };
    let make_w2 = || {
        Mat::from_fn(hid, d, |i, j| {
            if i == j {
                0.5 / eps
            } else if i == d + j {
                -0.5 / eps
            } else {
                0.0
            }
        })
    };
    RVQCodec {
        enc_w1: make_w1(),
        enc_b1: Mat::zeros(1, hid),
        enc_w2: make_w2(),
        enc_b2: Mat::zeros(1, d),
        dec_w1: make_w1(),
        dec_b1: Mat::zeros(1, hid),
        dec_w2: make_w2(),
        dec_b2: Mat::zeros(1, d),
        codebooks: vec![Mat::zeros(config.codebook_size, config.latent_dim)],
        config,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_config() -> RVQConfig {
        RVQConfig {
            window_frames: 4,
            tokens_per_window: 8,
            latent_dim: 4,
            codebook_size: 8,
            residual_stages: 2,
            commitment_weight: 1.0,
            frame_rate_hz: 20.0,
        }
    }

    #[test]
    fn zero_window_through_zeroed_encoder_gives_zero_latent() {
        let mut codec = RVQCodec::seeded(tiny_config(), 0).unwrap();
        codec.enc_w1.scale_assign(0.0);
        codec.enc_b1.scale_assign(0.0);
        codec.enc_w2.scale_assign(0.0);
        codec.enc_b2.scale_assign(0.0);
        let w = MotionWindow::new(vec![crate::motion::MotionLatent::zeros(); 4], 20.0).unwrap();
        let z = codec.encode(&w).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_shape_and_determinism() {
        let codec = RVQCodec::seeded(tiny_config(), 1).unwrap();
        let w = test_window(1.0, 20.0);
        let z1 = codec.encode(&w).unwrap();
        let z2 = codec.encode(&w).unwrap();
        assert_eq!(z1.rows(), 4); // 8 tokens / 2 stages
        assert_eq!(z1.cols(), 4);
        assert_eq!(z1, z2);
        assert!(codec.encode(&test_window(1.0, 20.0)).unwrap().all_finite());
    }

    #[test]
    fn encode_rejects_wrong_window_length() {
        let codec = RVQCodec::seeded(tiny_config(), 1).unwrap();
        let w = MotionWindow::new(vec![crate::motion::MotionLatent::zeros(); 3], 20.0).unwrap();
        assert!(codec.encode(&w).is_err());
    }

    #[test]
    fn quantize_exact_codebook_entry_single_stage() {
        let mut cfg = tiny_config();
        cfg.residual_stages = 1;
        cfg.tokens_per_window = 1;
        let mut codec = RVQCodec::seeded(cfg, 2).unwrap();
        let z = Mat::from_vec(1, 4, codec.codebooks[0].row(7).to_vec());
        let q = codec.quantize(&z).unwrap();
        assert_eq!(q.tokens, vec![7]);
        assert_eq!(q.z_hat, z);
        assert!(q.residual_norms[0][0] == 0.0);
        // zero codebook dequantizes every token to zero
        codec.codebooks[0].scale_assign(0.0);
        let z0 = codec.dequantize_window(&[3]).unwrap();
        assert!(z0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quantize_matches_bruteforce_per_stage() {
        let codec = RVQCodec::seeded(tiny_config(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let z = Mat::from_fn(4, 4, |_, _| rng.gen_range(-1.0f32..1.0));
            let q = codec.quantize(&z).unwrap();
            // independent stage-by-stage search
            for slot in 0..4 {
                let mut residual = z.row(slot).to_vec();
                for (stage, book) in codec.codebooks.iter().enumerate() {
                    let mut best = 0usize;
                    let mut best_d = f32::INFINITY;
                    for k in 0..book.rows() {
                        let d: f32 = book
                            .row(k)
                            .iter()
                            .zip(residual.iter())
                            .map(|(&e, &x)| (x - e) * (x - e))
                            .sum();
                        if d < best_d {
                            best_d = d;
                            best = k;
                        }
                    }
                    assert_eq!(q.tokens[slot * 2 + stage] as usize, best);
                    for (r, &e) in residual.iter_mut().zip(book.row(best)) {
                        *r -= e;
                    }
                }
            }
        }
    }

    #[test]
    fn quantize_residual_norms_are_post_stage_norms_and_argmin_optimal() {
        let codec = RVQCodec::seeded(tiny_config(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Mat::from_fn(4, 4, |_, _| rng.gen_range(-1.0f32..1.0));
        let q = codec.quantize(&z).unwrap();
        for slot in 0..4 {
            let mut residual = z.row(slot).to_vec();
            for (stage, book) in codec.codebooks.iter().enumerate() {
                let chosen = q.tokens[slot * 2 + stage] as usize;
                let chosen_d: f32 = book
                    .row(chosen)
                    .iter()
                    .zip(residual.iter())
                    .map(|(&e, &x)| (x - e) * (x - e))
                    .sum();
                for k in 0..book.rows() {
                    let d: f32 = book
                        .row(k)
                        .iter()
                        .zip(residual.iter())
                        .map(|(&e, &x)| (x - e) * (x - e))
                        .sum();
                    assert!(chosen_d <= d, "stage {stage} entry {k} beats chosen");
                }
                for (r, &e) in residual.iter_mut().zip(book.row(chosen)) {
                    *r -= e;
                }
                let norm = residual.iter().map(|v| v * v).sum::<f32>().sqrt();
                assert!((q.residual_norms[slot][stage] - norm).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn default_config_produces_32_tokens() {
        let codec = RVQCodec::seeded(RVQConfig::default(), 5).unwrap();
        let seq = codec.tokenize(&test_window(0.5, 20.0)).unwrap();
        assert_eq!(seq.tokens.len(), 32);
        assert_eq!(seq.window_count, 1);
    }

    #[test]
    fn dequantize_matches_quantize_z_hat_exactly() {
        let codec = RVQCodec::seeded(tiny_config(), 6).unwrap();
        let z = codec.encode(&test_window(0.8, 20.0)).unwrap();
        let q = codec.quantize(&z).unwrap();
        let seq =
            TokenSequence::new(q.tokens.clone(), codec.config.tokens_per_window, codec.config.codebook_size)
                .unwrap();
        let deq = codec.dequantize(&seq).unwrap();
        assert_eq!(deq.len(), 1);
        assert_eq!(deq[0], q.z_hat);
    }

    #[test]
    fn dequantize_rejects_out_of_range_token() {
        let codec = RVQCodec::seeded(tiny_config(), 7).unwrap();
        let mut toks = vec![0u16; 8];
        toks[3] = 200; // K = 8
        assert!(codec.dequantize_window(&toks).is_err());
    }

    #[test]
    fn quantize_idempotent_on_codebook_sums() {
        // stage-0 entries well separated, stage-1 entries small: sums
        // quantize back to their own indices
        let mut codec = RVQCodec::seeded(tiny_config(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        codec.codebooks[0] = Mat::from_fn(8, 4, |k, j| (k * 4 + j) as f32 * 2.0 + 5.0 * k as f32);
        codec.codebooks[1] = Mat::from_fn(8, 4, |_, _| rng.gen_range(-0.05f32..0.05));
        for a in 0..8usize {
            for b in 0..8usize {
                let mut z = Mat::zeros(4, 4);
                for slot in 0..4 {
                    for j in 0..4 {
                        z.set(slot, j, codec.codebooks[0].get(a, j) + codec.codebooks[1].get(b, j));
                    }
                }
                let q = codec.quantize(&z).unwrap();
                let deq = codec.dequantize_window(&q.tokens).unwrap();
                let q2 = codec.quantize(&deq).unwrap();
                assert_eq!(q.tokens, q2.tokens);
            }
        }
    }

    #[test]
    fn zero_latent_through_zeroed_decoder_gives_zero_window() {
        let mut codec = RVQCodec::seeded(tiny_config(), 10).unwrap();
        codec.dec_w1.scale_assign(0.0);
        codec.dec_b1.scale_assign(0.0);
        codec.dec_w2.scale_assign(0.0);
        codec.dec_b2.scale_assign(0.0);
        let w = codec.decode(&Mat::zeros(4, 4)).unwrap();
        assert!(flatten_window(&w).iter().all(|&v| v == 0.0));
        assert_eq!(w.frames.len(), 4);
    }

    #[test]
    fn identity_stub_round_trips_within_1e6() {
        let codec = identity_stub_codec();
        let w = test_window(1.0, 20.0);
        let z = codec.encode(&w).unwrap();
        let back = codec.decode(&z).unwrap();
        let orig = flatten_window(&w);
        let got = flatten_window(&back);
        for (a, b) in orig.iter().zip(got.iter()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert_eq!(back.frames.len(), 4);
    }

    #[test]
    fn perfect_codec_has_zero_losses() {
        let mut codec = identity_stub_codec();
        let w = test_window(0.9, 20.0);
        let z = codec.encode(&w).unwrap();
        // plant each slot's latent as a codebook entry so ẑ = z exactly
        let mut book = Mat::zeros(codec.config.codebook_size, codec.config.latent_dim);
        for slot in 0..codec.config.slots() {
            book.row_mut(slot).copy_from_slice(z.row(slot));
        }
        codec.codebooks[0] = book;
        let q = codec.quantize(&z).unwrap();
        assert_eq!(q.z_hat, z);
        let loss = codec.vq_loss(&w).unwrap();
        assert_eq!(loss.commit, 0.0);
        // identity stub reconstruction error is ~1e-7 per element, squared
        assert!(loss.recon < 1e-9, "recon {}", loss.recon);
    }

    #[test]
    fn vq_loss_matches_hand_rolled_scalar_recomputation() {
        let cfg = RVQConfig {
            window_frames: 4,
            tokens_per_window: 1,
            latent_dim: 2,
            codebook_size: 4,
            residual_stages: 1,
            commitment_weight: 0.7,
            frame_rate_hz: 20.0,
        };
        let codec = RVQCodec::seeded(cfg, 11).unwrap();
        let w = test_window(0.6, 20.0);
        let loss = codec.vq_loss(&w).unwrap();

        // independent scalar recomputation with plain loops
        let x = flatten_window(&w);
        let mut h = vec![0.0f32; codec.config.hidden()];
        for (j, hv) in h.iter_mut().enumerate() {
            let mut acc = codec.enc_b1.get(0, j);
            for (i, &xi) in x.iter().enumerate() {
                acc += xi * codec.enc_w1.get(i, j);
            }
            *hv = acc.tanh();
        }
        let mut z = vec![0.0f32; 2];
        for (j, zv) in z.iter_mut().enumerate() {
            let mut acc = codec.enc_b2.get(0, j);
            for (i, &hi) in h.iter().enumerate() {
                acc += hi * codec.enc_w2.get(i, j);
            }
            *zv = acc;
        }
        let mut best = 0;
        let mut best_d = f32::INFINITY;
        for k in 0..4 {
            let d: f32 = codec.codebooks[0]
                .row(k)
                .iter()
                .zip(z.iter())
                .map(|(&e, &v)| (v - e) * (v - e))
                .sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        let z_hat = codec.codebooks[0].row(best).to_vec();
        let mut h2 = vec![0.0f32; codec.config.hidden()];
        for (j, hv) in h2.iter_mut().enumerate() {
            let mut acc = codec.dec_b1.get(0, j);
            for (i, &zi) in z_hat.iter().enumerate() {
                acc += zi * codec.dec_w1.get(i, j);
            }
            *hv = acc.tanh();
        }
        let mut recon = 0.0f64;
        for (j, &xj) in x.iter().enumerate() {
            let mut acc = codec.dec_b2.get(0, j);
            for (i, &hi) in h2.iter().enumerate() {
                acc += hi * codec.dec_w2.get(i, j);
            }
            recon += ((acc - xj) as f64).powi(2);
        }
        let commit: f64 = z
            .iter()
            .zip(z_hat.iter())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum();
        let total = recon + 0.7 * commit;
        assert!((loss.recon - recon).abs() < 1e-9 * recon.max(1.0));
        assert!((loss.commit - commit).abs() < 1e-9 * commit.max(1.0));
        assert!((loss.total - total).abs() < 1e-9 * total.max(1.0));
    }

    #[test]
    fn codebooks_receive_no_gradient_through_either_loss_term() {
        // rebuild the loss graph with a codebook entry as a parameter leaf:
        // the straight-through estimator must leave it gradient-free
        let codec = RVQCodec::seeded(
            RVQConfig {
                window_frames: 4,
                tokens_per_window: 2,
                latent_dim: 2,
                codebook_size: 4,
                residual_stages: 1,
                commitment_weight: 1.0,
                frame_rate_hz: 20.0,
            },
            12,
        )
        .unwrap();
        let w = test_window(0.5, 20.0);
        let x = Mat::from_vec(1, 300, flatten_window(&w));
        let z = codec.encode(&w).unwrap();
        let q = codec.quantize(&z).unwrap();

        let mut g = Graph::<f64>::new();
        let ffn_vars: [Var; 8] = {
            let ps = codec.ffn_params();
            [
                g.param(ps[0].cast()), g.param(ps[1].cast()), g.param(ps[2].cast()), g.param(ps[3].cast()),
                g.param(ps[4].cast()), g.param(ps[5].cast()), g.param(ps[6].cast()), g.param(ps[7].cast()),
            ]
        };
        // ẑ built from codebook-entry parameters via gather
        let book = g.param(codec.codebooks[0].cast::<f64>());
        let idx: Vec<usize> = (0..codec.config.slots())
            .map(|s| q.tokens[s] as usize)
            .collect();
        let gathered = g.gather_rows(book, idx);
        let z_hat_rows = g.value(gathered).clone();
        let z_hat_flat = Mat::from_vec(1, codec.config.latent_total(), z_hat_rows.data().to_vec());
        let z_hat_var = {
            // keep the graph connection: reshape via concat of the gathered rows
            let mut parts = Vec::new();
            for s in 0..codec.config.slots() {
                parts.push(g.gather_rows(gathered, vec![s]));
            }
            let mut acc = parts[0];
            for p in &parts[1..] {
                acc = g.concat_cols(acc, *p);
            }
            acc
        };
        assert_eq!(g.value(z_hat_var).data(), z_hat_flat.data());

        let x_var = g.leaf(x.cast::<f64>());
        let (_recon, _commit, total) =
            vq_loss_graph(&mut g, &ffn_vars, x_var, z_hat_var, 1.0);
        g.backward(total);
        // encoder got gradient, the codebook got none
        assert!(g.grad(ffn_vars[0]).is_some());
        assert!(g.grad(book).is_none());
    }

    #[test]
    fn checkpoint_round_trip() {
        let codec = RVQCodec::seeded(tiny_config(), 13).unwrap();
        let mut buf = Vec::new();
        codec.write(&mut buf).unwrap();
        let back = RVQCodec::read(&mut buf.as_slice()).unwrap();
        assert_eq!(codec, back);
    }

    #[test]
    fn token_stream_bytes_round_trip() {
        let seq = TokenSequence::new(vec![1, 2, 3, 4, 5, 6, 7, 0], 4, 8).unwrap();
        let bytes = seq.to_bytes();
        assert_eq!(bytes.len(), 16);
        let back = TokenSequence::from_bytes(&bytes, 4, 8).unwrap();
        assert_eq!(seq, back);
        assert!(TokenSequence::new(vec![9], 1, 8).is_err());
    }
}
