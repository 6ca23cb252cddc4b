//! Procedural audio→motion corpus with a known ground-truth coupling.
//!
//! Each clip is a seeded sum of band-limited tones whose slowly varying
//! band energies drive the motion coordinates through a fixed coupling
//! matrix. Because the mapping is known in closed form, a trained model can
//! be scored by correlating its generated motion against the true band
//! energy series — no real video needed.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio;
use crate::error::{Error, Result};
use crate::motion::{MotionClip, MotionLatent, FRAME_DIM};
use crate::nn::Mat;

/// Motion frames per second before interpolation (4 frames per 200ms chunk).
pub const MOTION_RATE_HZ: f32 = 20.0;

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub seed: u64,
    pub clip_seconds: f64,
    pub sample_rate_hz: u32,
    /// `bands × 75` map from band energies to motion coordinates.
    pub coupling: Mat<f32>,
    pub noise_std: f32,
    /// Drive motion with squared band energies (a harder, nonlinear corpus).
    pub squared_coupling: bool,
}

impl SynthConfig {
    /// Sparse positive coupling: coordinate `j` follows band `j mod bands`
    /// with a seeded weight in `[0.5, 1.5]`.
    pub fn with_default_coupling(seed: u64, bands: usize, clip_seconds: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0_u64.rotate_left(32));
        let mut coupling = Mat::zeros(bands, FRAME_DIM);
        for j in 0..FRAME_DIM {
            coupling.set(j % bands, j, rng.gen_range(0.5..1.5));
        }
        SynthConfig {
            seed,
            clip_seconds,
            sample_rate_hz: 16000,
            coupling,
            noise_std: 0.0,
            squared_coupling: false,
        }
    }

    pub fn bands(&self) -> usize {
        self.coupling.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.coupling.all_finite() {
            return Err(Error::validation("coupling matrix must be finite"));
        }
        if self.coupling.cols() != FRAME_DIM {
            return Err(Error::validation(format!(
                "coupling must have {FRAME_DIM} columns, got {}",
                self.coupling.cols()
            )));
        }
        let chunks = self.clip_seconds / 0.2;
        if (chunks - chunks.round()).abs() > 1e-9 || self.clip_seconds <= 0.0 {
            return Err(Error::validation(format!(
                "clip_seconds {} must be a positive multiple of 0.2",
                self.clip_seconds
            )));
        }
        if !audio::SUPPORTED_RATES.contains(&self.sample_rate_hz) {
            return Err(Error::validation(format!(
                "unsupported sample rate {}",
                self.sample_rate_hz
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::validation("noise_std must be >= 0"));
        }
        Ok(())
    }

    pub fn chunks(&self) -> usize {
        (self.clip_seconds / 0.2).round() as usize
    }

    pub fn motion_frames(&self) -> usize {
        self.chunks() * 4
    }
}

/// Per-band oscillator state for one clip.
struct Band {
    carrier_hz: f64,
    rate_hz: f64,
    phase: f64,
}

impl Band {
    /// Band energy driver in `[0.05, 1.0]`, slow and smooth.
    fn driver(&self, t: f64) -> f64 {
        0.525 + 0.475 * (std::f64::consts::TAU * self.rate_hz * t + self.phase).sin()
    }
}

fn clip_bands(config: &SynthConfig, seed: u64) -> Vec<Band> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.bands();
    (0..n)
        .map(|b| {
            // carriers spread log-evenly across the speech band
            let lo = 300.0f64;
            let hi = (0.4 * config.sample_rate_hz as f64).min(3400.0);
            let carrier_hz = lo * (hi / lo).powf(b as f64 / (n.max(2) - 1) as f64);
            Band {
                carrier_hz,
                rate_hz: rng.gen_range(0.3..1.2),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect()
}

/// A generated clip: audio, motion at 20 Hz, and the ground-truth band
/// energy series sampled at motion-frame times (`frames × bands`).
#[derive(Clone, Debug)]
pub struct SynthClip {
    pub samples: Vec<f32>,
    pub motion: MotionClip,
    pub drivers: Mat<f32>,
}

/// Generate one clip deterministically from `config.seed`.
pub fn generate_clip(config: &SynthConfig) -> Result<SynthClip> {
    config.validate()?;
    let bands = clip_bands(config, config.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0153_E5E5_D00D_F00D);

    let n_samples = (config.clip_seconds * config.sample_rate_hz as f64).round() as usize;
    let mut samples = Vec::with_capacity(n_samples);
    let norm = 1.0 / config.bands() as f64;
    for i in 0..n_samples {
        let t = i as f64 / config.sample_rate_hz as f64;
        let mut v = 0.0f64;
        for band in &bands {
            // amplitude is the square root of the driver so that band
            // energy tracks the driver itself
            v += band.driver(t).sqrt()
                * (std::f64::consts::TAU * band.carrier_hz * t).sin()
                * norm;
        }
        samples.push(v as f32);
    }

    let frames_n = config.motion_frames();
    let mut drivers = Mat::zeros(frames_n, config.bands());
    let mut frames = Vec::with_capacity(frames_n);
    for k in 0..frames_n {
        let t = k as f64 / MOTION_RATE_HZ as f64;
        for (b, band) in bands.iter().enumerate() {
            drivers.set(k, b, band.driver(t) as f32);
        }
        let mut vals = [0.0f32; FRAME_DIM];
        for (j, v) in vals.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for b in 0..config.bands() {
                let d = drivers.get(k, b);
                let d = if config.squared_coupling { d * d } else { d };
                acc += config.coupling.get(b, j) * d;
            }
            if config.noise_std > 0.0 {
                let n: f64 = rand_distr::Distribution::sample(
                    &rand_distr::StandardNormal,
                    &mut noise_rng,
                );
                acc += config.noise_std * n as f32;
            }
            *v = acc;
        }
        frames.push(MotionLatent::from_flat(&vals)?);
    }
    Ok(SynthClip {
        samples,
        motion: MotionClip::new(frames, MOTION_RATE_HZ),
        drivers,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClipEntry {
    pub index: usize,
    pub seed: u64,
    pub wav: PathBuf,
    pub motion: PathBuf,
    pub split: String,
}

/// Generate `n_clips` clips under `out_dir` with per-clip seeds derived from
/// the master seed. Writes WAV + motion files and a JSON-lines manifest;
/// clips with `index % 10 == 9` land in the validation split.
pub fn corpus(config: &SynthConfig, n_clips: usize, out_dir: impl AsRef<Path>) -> Result<Vec<ClipEntry>> {
    if n_clips == 0 {
        return Err(Error::validation("n_clips must be >= 1"));
    }
    config.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir)?;
    let mut seed_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut entries = Vec::with_capacity(n_clips);
    for index in 0..n_clips {
        let seed = seed_rng.next_u64();
        let clip_cfg = SynthConfig { seed, ..config.clone() };
        let clip = generate_clip(&clip_cfg)?;
        let wav = out_dir.join(format!("clip_{index:04}.wav"));
        let motion = out_dir.join(format!("clip_{index:04}.tmlt"));
        audio::write_wav(&wav, &clip.samples, config.sample_rate_hz)?;
        clip.motion.save(&motion)?;
        entries.push(ClipEntry {
            index,
            seed,
            wav,
            motion,
            split: if index % 10 == 9 { "val" } else { "train" }.to_string(),
        });
    }
    let manifest = out_dir.join("manifest.jsonl");
    let mut w = BufWriter::new(File::create(&manifest)?);
    for e in &entries {
        writeln!(w, "{}", serde_json::to_string(e).expect("manifest json"))?;
    }
    Ok(entries)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ClipEntry>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format(format!("manifest: {e}"))))
        .collect()
}

/// Regenerate a corpus clip (with its ground-truth drivers) from its
/// manifest entry.
pub fn clip_from_entry(config: &SynthConfig, entry: &ClipEntry) -> Result<SynthClip> {
    generate_clip(&SynthConfig { seed: entry.seed, ..config.clone() })
}

/// Turn corpus entries into model-ready sequence layouts: embed each clip's
/// audio, tokenize its motion windows with the codec, and interleave.
pub fn prepare_layouts(
    entries: &[ClipEntry],
    codec: &crate::rvq::RVQCodec,
    frontend_cfg: &crate::audio::FrontendConfig,
    model_cfg: &crate::ar::ARConfig,
) -> Result<Vec<crate::ar::SequenceLayout>> {
    let mut out = Vec::with_capacity(entries.len());
    for entry in entries {
        let wav = audio::read_wav(&entry.wav)?;
        let embeddings = audio::embed_stream(&wav.samples, wav.sample_rate_hz, frontend_cfg)?;
        let motion = MotionClip::load(&entry.motion)?;
        let windows = motion.windows(codec.config.window_frames);
        if windows.len() != embeddings.len() {
            return Err(Error::mismatch(format!(
                "clip {}: {} motion windows vs {} audio chunks",
                entry.index,
                windows.len(),
                embeddings.len()
            )));
        }
        let mut tokens = Vec::with_capacity(windows.len() * codec.config.tokens_per_window);
        for w in &windows {
            tokens.extend(codec.tokenize(w)?.tokens);
        }
        let seq = crate::rvq::TokenSequence::new(
            tokens,
            codec.config.tokens_per_window,
            codec.config.codebook_size,
        )?;
        out.push(crate::ar::build_sequence(&embeddings, &seq, model_cfg)?);
    }
    Ok(out)
}

/// Pearson correlation of two equal-length series.
pub fn pearson(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let dx = x as f64 - ma;
        let dy = y as f64 - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}
