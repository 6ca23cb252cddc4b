//! Audio chunking and the deterministic spectral frontend.
//!
//! Incoming PCM is cut into 200ms chunks; each chunk is summarized as a
//! `10 × D` log-filterbank embedding (10 analysis frames at uniform hops,
//! `D` mel-spaced triangular filters over a windowed short-time spectrum).
//! The frontend is pure signal processing — no pretrained weights — so
//! embeddings are bit-reproducible across runs and platforms.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::Fft;

use crate::error::{Error, Result};
use crate::io;

/// Analysis frames per 200ms chunk.
pub const FRAMES_PER_CHUNK: usize = 10;

/// Energies below this floor clamp to `LOG_FLOOR.ln()`.
pub const LOG_FLOOR: f64 = 1e-10;

pub const SUPPORTED_RATES: [u32; 4] = [8000, 16000, 44100, 48000];

const AUDIO_MAGIC: &[u8; 4] = b"TAUD";
const AUDIO_VERSION: u16 = 1;

/// 200ms of mono PCM at a fixed rate; the final chunk of a stream is
/// zero-padded to full length.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioChunk {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
    pub chunk_index: usize,
    /// Number of trailing zero-pad samples (nonzero only on the last chunk).
    pub pad_samples: usize,
}

pub fn samples_per_chunk(sample_rate_hz: u32) -> usize {
    sample_rate_hz as usize / 5
}

/// Split a sample stream into 200ms chunks, zero-padding the final chunk.
pub fn chunk_stream(samples: &[f32], sample_rate_hz: u32) -> Result<Vec<AudioChunk>> {
    if !SUPPORTED_RATES.contains(&sample_rate_hz) {
        return Err(Error::validation(format!(
            "unsupported sample rate {sample_rate_hz} (supported: {SUPPORTED_RATES:?})"
        )));
    }
    let n = samples_per_chunk(sample_rate_hz);
    let mut out = Vec::new();
    for (i, block) in samples.chunks(n).enumerate() {
        let mut buf = block.to_vec();
        let pad = n - buf.len();
        buf.resize(n, 0.0);
        out.push(AudioChunk {
            samples: buf,
            sample_rate_hz,
            chunk_index: i,
            pad_samples: pad,
        });
    }
    out
        .iter()
        .for_each(|c| debug_assert_eq!(c.samples.len(), n));
    Ok(out)
}

/// Reassemble chunk samples, dropping final-chunk padding.
pub fn reassemble(chunks: &[AudioChunk]) -> Vec<f32> {
    let mut out = Vec::new();
    for c in chunks {
        let real = c.samples.len() - c.pad_samples;
        out.extend_from_slice(&c.samples[..real]);
    }
    out
}

/// A `10 × D` chunk embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioEmbedding {
    values: Vec<f32>,
    dim: usize,
    pub chunk_index: usize,
}

impl AudioEmbedding {
    pub fn new(values: Vec<f32>, dim: usize, chunk_index: usize) -> Result<Self> {
        if values.len() != FRAMES_PER_CHUNK * dim {
            return Err(Error::validation(format!(
                "embedding must be {FRAMES_PER_CHUNK}×{dim}, got {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite embedding value".to_string()));
        }
        Ok(AudioEmbedding { values, dim, chunk_index })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, frame: usize) -> &[f32] {
        &self.values[frame * self.dim..(frame + 1) * self.dim]
    }
}

/// Frontend settings. `dim` defaults to 64; `faithful()` gives the 512-wide
/// interface used when matching the full-scale embedding shape.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrontendConfig {
    pub dim: usize,
    pub window_ms: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig { dim: 64, window_ms: 25.0 }
    }
}

impl FrontendConfig {
    pub fn faithful() -> Self {
        FrontendConfig { dim: 512, window_ms: 25.0 }
    }

    pub fn frame_len(&self, sample_rate_hz: u32) -> usize {
        (self.window_ms / 1000.0 * sample_rate_hz as f64).round() as usize
    }

    pub fn hop(&self, sample_rate_hz: u32) -> usize {
        samples_per_chunk(sample_rate_hz) / FRAMES_PER_CHUNK
    }

    /// FFT length: covers the frame and leaves at least two spectral bins per
    /// filter so wide embeddings stay non-degenerate.
    pub fn fft_len(&self, sample_rate_hz: u32) -> usize {
        self.frame_len(sample_rate_hz)
            .max(2 * self.dim)
            .next_power_of_two()
    }
}

/// Reusable spectral frontend (caches the FFT plan and filter weights).
pub struct Frontend {
    cfg: FrontendConfig,
    sample_rate_hz: u32,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// Triangular filters as (start_bin, weights).
    filters: Vec<(usize, Vec<f64>)>,
}

impl Frontend {
    pub fn new(cfg: FrontendConfig, sample_rate_hz: u32) -> Result<Self> {
        if !SUPPORTED_RATES.contains(&sample_rate_hz) {
            return Err(Error::validation(format!(
                "unsupported sample rate {sample_rate_hz}"
            )));
        }
        if cfg.dim == 0 {
            return Err(Error::validation("embedding dim must be positive"));
        }
        let frame_len = cfg.frame_len(sample_rate_hz);
        let nfft = cfg.fft_len(sample_rate_hz);
        let mut planner = rustfft::FftPlanner::new();
        let fft = planner.plan_fft_forward(nfft);
        let window = hann_window(frame_len);
        let filters = mel_filters(cfg.dim, nfft, sample_rate_hz);
        Ok(Frontend { cfg, sample_rate_hz, fft, window, filters })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    /// Embed one chunk: 10 windowed frames at uniform hops, power spectrum,
    /// mel filterbank, natural log with a finite floor.
    pub fn embed_chunk(&self, chunk: &AudioChunk) -> Result<AudioEmbedding> {
        if chunk.sample_rate_hz != self.sample_rate_hz {
            return Err(Error::mismatch(format!(
                "chunk rate {} vs frontend rate {}",
                chunk.sample_rate_hz, self.sample_rate_hz
            )));
        }
        let hop = self.cfg.hop(self.sample_rate_hz);
        let frame_len = self.window.len();
        let nfft = self.fft.len();
        let d = self.cfg.dim;
        let mut values = Vec::with_capacity(FRAMES_PER_CHUNK * d);
        let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
        for f in 0..FRAMES_PER_CHUNK {
            let start = f * hop;
            for (i, c) in buf.iter_mut().enumerate() {
                let s = if i < frame_len {
                    chunk.samples.get(start + i).copied().unwrap_or(0.0) as f64 * self.window[i]
                } else {
                    0.0
                };
                *c = Complex64::new(s, 0.0);
            }
            self.fft.process(&mut buf);
            let power: Vec<f64> = buf[..nfft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
            for (start_bin, weights) in &self.filters {
                let mut e = 0.0;
                for (k, &w) in weights.iter().enumerate() {
                    e += w * power[start_bin + k];
                }
                values.push(e.max(LOG_FLOOR).ln() as f32);
            }
        }
        AudioEmbedding::new(values, d, chunk.chunk_index)
    }
}

pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `dim` triangular filters on the mel scale from 0 Hz to Nyquist, returned
/// as (first bin, weights) pairs over the length-`nfft/2+1` power spectrum.
pub fn mel_filters(dim: usize, nfft: usize, sample_rate_hz: u32) -> Vec<(usize, Vec<f64>)> {
    let nyquist = sample_rate_hz as f64 / 2.0;
    let n_bins = nfft / 2 + 1;
    let mel_max = hz_to_mel(nyquist);
    let centers: Vec<f64> = (0..dim + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (dim + 1) as f64))
        .collect();
    let bin_hz = sample_rate_hz as f64 / nfft as f64;
    let mut out = Vec::with_capacity(dim);
    for d in 0..dim {
        let (lo, mid, hi) = (centers[d], centers[d + 1], centers[d + 2]);
        let first = (lo / bin_hz).ceil() as usize;
        let last = ((hi / bin_hz).floor() as usize).min(n_bins - 1);
        let mut weights = Vec::new();
        for b in first..=last.max(first) {
            if b >= n_bins {
                break;
            }
            let f = b as f64 * bin_hz;
            let w = if f <= mid {
                if mid > lo { (f - lo) / (mid - lo) } else { 0.0 }
            } else if hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            weights.push(w.max(0.0));
        }
        out.push((first, weights));
    }
    out
}

/// Embed an entire stream; chunks are independent, ordering by index.
pub fn embed_stream(
    samples: &[f32],
    sample_rate_hz: u32,
    cfg: &FrontendConfig,
) -> Result<Vec<AudioEmbedding>> {
    let frontend = Frontend::new(cfg.clone(), sample_rate_hz)?;
    chunk_stream(samples, sample_rate_hz)?
        .iter()
        .map(|c| frontend.embed_chunk(c))
        .collect()
}

// --- embedding container ---------------------------------------------------

/// Write embeddings: 16-byte header (magic, version u16, chunk count u32,
/// dim u32, reserved u16) then `count × 10 × dim` f32 LE.
pub fn write_embeddings(w: &mut impl Write, embs: &[AudioEmbedding]) -> Result<()> {
    let dim = embs.first().map(|e| e.dim()).unwrap_or(0);
    io::write_magic(w, AUDIO_MAGIC)?;
    io::write_u16(w, AUDIO_VERSION)?;
    io::write_u32(w, embs.len() as u32)?;
    io::write_u32(w, dim as u32)?;
    io::write_u16(w, 0)?;
    for e in embs {
        if e.dim() != dim {
            return Err(Error::mismatch("embeddings differ in dim".to_string()));
        }
        io::write_f32_slice(w, e.values())?;
    }
    Ok(())
}

pub fn read_embeddings(r: &mut impl Read) -> Result<Vec<AudioEmbedding>> {
    io::expect_magic(r, AUDIO_MAGIC)?;
    let version = io::read_u16(r)?;
    io::check_version(version, AUDIO_VERSION, "embedding file")?;
    let count = io::read_u32(r)? as usize;
    let dim = io::read_u32(r)? as usize;
    let _reserved = io::read_u16(r)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let vals = io::read_f32_vec(r, FRAMES_PER_CHUNK * dim)?;
        out.push(AudioEmbedding::new(vals, dim, i)?);
    }
    Ok(out)
}

pub fn save_embeddings(path: impl AsRef<Path>, embs: &[AudioEmbedding]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_embeddings(&mut w, embs)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<Vec<AudioEmbedding>> {
    let mut r = BufReader::new(File::open(path)?);
    read_embeddings(&mut r)
}

// --- WAV I/O (16-bit PCM mono) ----------------------------------------------

pub struct WavData {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

/// Minimal RIFF/WAVE reader for 16-bit PCM mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<WavData> {
    let mut r = BufReader::new(File::open(path)?);
    let mut hdr = [0u8; 12];
    r.read_exact(&mut hdr)?;
    if &hdr[0..4] != b"RIFF" || &hdr[8..12] != b"WAVE" {
        return Err(Error::format("not a RIFF/WAVE file".to_string()));
    }
    let mut sample_rate = 0u32;
    let mut channels = 0u16;
    let mut bits = 0u16;
    let mut data: Option<Vec<u8>> = None;
    loop {
        let mut chunk_hdr = [0u8; 8];
        match r.read_exact(&mut chunk_hdr) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let id = [chunk_hdr[0], chunk_hdr[1], chunk_hdr[2], chunk_hdr[3]];
        let size = u32::from_le_bytes([chunk_hdr[4], chunk_hdr[5], chunk_hdr[6], chunk_hdr[7]]) as usize;
        let mut body = vec![0u8; size + (size & 1)]; // chunks are word-aligned
        r.read_exact(&mut body)?;
        body.truncate(size);
        match &id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::format("short fmt chunk".to_string()));
                }
                let format = u16::from_le_bytes([body[0], body[1]]);
                channels = u16::from_le_bytes([body[2], body[3]]);
                sample_rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
                bits = u16::from_le_bytes([body[14], body[15]]);
                if format != 1 {
                    return Err(Error::format(format!("unsupported WAV format tag {format}")));
                }
            }
            b"data" => data = Some(body),
            _ => {}
        }
    }
    let data = data.ok_or_else(|| Error::format("WAV has no data chunk".to_string()))?;
    if channels != 1 || bits != 16 {
        return Err(Error::format(format!(
            "expected 16-bit mono PCM, got {bits}-bit {channels}ch"
        )));
    }
    let samples = data
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
        .collect();
    Ok(WavData { samples, sample_rate_hz: sample_rate })
}

pub fn write_wav(path: impl AsRef<Path>, samples: &[f32], sample_rate_hz: u32) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let data_len = (samples.len() * 2) as u32;
    w.write_all(b"RIFF")?;
    w.write_all(&(36 + data_len).to_le_bytes())?;
    w.write_all(b"WAVE")?;
    w.write_all(b"fmt ")?;
    w.write_all(&16u32.to_le_bytes())?;
    w.write_all(&1u16.to_le_bytes())?; // PCM
    w.write_all(&1u16.to_le_bytes())?; // mono
    w.write_all(&sample_rate_hz.to_le_bytes())?;
    w.write_all(&(sample_rate_hz * 2).to_le_bytes())?; // byte rate
    w.write_all(&2u16.to_le_bytes())?; // block align
    w.write_all(&16u16.to_le_bytes())?; // bits
    w.write_all(b"data")?;
    w.write_all(&data_len.to_le_bytes())?;
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}
