//! Flat run configuration shared by every subcommand.
//!
//! Precedence: built-in defaults, then the `--config` TOML file, then
//! repeated `--set key=value` overrides. Unknown keys are rejected at the
//! final deserialize. The resolved configuration is echoed next to each
//! command's outputs for provenance, and its SHA-256 identifies the run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ar::{ARConfig, HeadMode};
use crate::audio::FrontendConfig;
use crate::error::{Error, Result};
use crate::etm::ETMConfig;
use crate::rvq::RVQConfig;
use crate::synth::SynthConfig;
use crate::train::{OptimizerKind, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,

    // corpus
    pub clips: usize,
    pub clip_seconds: f64,
    pub sample_rate_hz: u32,
    pub bands: usize,
    pub noise_std: f32,
    pub squared_coupling: bool,

    // audio frontend
    pub audio_dim: usize,
    pub audio_window_ms: f64,

    // codec
    pub window_frames: usize,
    pub tokens_per_window: usize,
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub residual_stages: usize,
    pub commitment_weight: f32,
    pub ema_decay: f32,

    // token model
    pub head_mode: String,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub rope_base: f64,
    pub ar_regularizer: bool,

    // refiner
    pub etm_channels: usize,
    pub etm_t_max: usize,
    pub etm_heads: usize,
    pub patch_size: usize,
    pub etm_frame_px: usize,

    // trainer
    pub lr_start: f64,
    pub lr_end: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,

    // sampler
    pub topk: usize,
    pub temperature: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            clips: 100,
            clip_seconds: 1.0,
            sample_rate_hz: 16000,
            bands: 4,
            noise_std: 0.0,
            squared_coupling: false,
            audio_dim: 64,
            audio_window_ms: 25.0,
            window_frames: 4,
            tokens_per_window: 32,
            latent_dim: 64,
            codebook_size: 256,
            residual_stages: 4,
            commitment_weight: 1.0,
            ema_decay: 0.99,
            head_mode: "dual".to_string(),
            d_model: 256,
            n_layers: 6,
            n_heads: 8,
            rope_base: 10000.0,
            ar_regularizer: true,
            etm_channels: 8,
            etm_t_max: 10,
            etm_heads: 2,
            patch_size: 4,
            etm_frame_px: 16,
            lr_start: 1e-4,
            lr_end: 1e-6,
            epochs: 10,
            batch_size: 32,
            weight_decay: 0.0,
            topk: 15,
            temperature: 1.0,
        }
    }
}

impl RunConfig {
    /// Defaults, then the optional TOML file, then `key=value` overrides.
    pub fn resolve(file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
        let defaults =
            toml::to_string(&RunConfig::default()).expect("defaults serialize");
        let mut table: toml::Table = defaults.parse().expect("defaults parse");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
            let file_table: toml::Table = text
                .parse()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            for (k, v) in file_table {
                if !table.contains_key(&k) {
                    return Err(Error::Config(format!("unknown config key `{k}`")));
                }
                table.insert(k, v);
            }
        }
        for pair in sets {
            let (key, raw) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{pair}`")))?;
            let key = key.trim();
            if !table.contains_key(key) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            let value = parse_toml_value(raw.trim());
            table.insert(key.to_string(), value);
        }
        let resolved: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        resolved.validate()?;
        Ok(resolved)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_mode != "dual" && self.head_mode != "single" {
            return Err(Error::Config(format!(
                "head_mode must be `dual` or `single`, got `{}`",
                self.head_mode
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialize")
    }

    /// SHA-256 of the resolved TOML, abbreviated for report rows.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        let digest = hasher.finalize();
        hex_prefix(&digest, 12)
    }

    /// Write the resolved config next to a command's outputs.
    pub fn echo_to(&self, dir: &Path) -> Result<std::path::PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.resolved.toml");
        std::fs::write(&path, self.to_toml())?;
        Ok(path)
    }

    pub fn synth_config(&self) -> SynthConfig {
        let mut cfg =
            SynthConfig::with_default_coupling(self.seed, self.bands, self.clip_seconds);
        cfg.sample_rate_hz = self.sample_rate_hz;
        cfg.noise_std = self.noise_std;
        cfg.squared_coupling = self.squared_coupling;
        cfg
    }

    pub fn frontend_config(&self) -> FrontendConfig {
        FrontendConfig { dim: self.audio_dim, window_ms: self.audio_window_ms }
    }

    pub fn rvq_config(&self) -> RVQConfig {
        RVQConfig {
            window_frames: self.window_frames,
            tokens_per_window: self.tokens_per_window,
            latent_dim: self.latent_dim,
            codebook_size: self.codebook_size,
            residual_stages: self.residual_stages,
            commitment_weight: self.commitment_weight,
            frame_rate_hz: 20.0,
        }
    }

    pub fn ar_config(&self) -> ARConfig {
        ARConfig {
            head_mode: if self.head_mode == "single" { HeadMode::Single } else { HeadMode::Dual },
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            vocab: self.codebook_size,
            audio_dim: self.audio_dim,
            tokens_per_chunk: self.tokens_per_window,
            rope_base: self.rope_base,
        }
    }

    pub fn etm_config(&self) -> ETMConfig {
        ETMConfig {
            channels: self.etm_channels,
            t_max: self.etm_t_max,
            n_heads: self.etm_heads,
            patch_size: self.patch_size,
            zero_init_output: true,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            optimizer: OptimizerKind::default(),
            weight_decay: self.weight_decay,
        }
    }
}

fn parse_toml_value(raw: &str) -> toml::Value {
    if let Ok(v) = raw.parse::<i64>() {
        return toml::Value::Integer(v);
    }
    if let Ok(v) = raw.parse::<f64>() {
        return toml::Value::Float(v);
    }
    if let Ok(v) = raw.parse::<bool>() {
        return toml::Value::Boolean(v);
    }
    toml::Value::String(raw.to_string())
}

fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut out = String::with_capacity(chars);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
        if out.len() >= chars {
            break;
        }
    }
    out.truncate(chars);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "not_a_key = 1\n").unwrap();
        let err = RunConfig::resolve(Some(&path), &[]).unwrap_err();
        assert!(err.to_string().contains("not_a_key"));

        let err = RunConfig::resolve(None, &["bogus=3".to_string()]).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn precedence_defaults_file_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "clips = 7\nseed = 5\n").unwrap();
        let cfg =
            RunConfig::resolve(Some(&path), &["seed=9".to_string(), "topk=3".to_string()]).unwrap();
        assert_eq!(cfg.clips, 7); // file over default
        assert_eq!(cfg.seed, 9); // flag over file
        assert_eq!(cfg.topk, 3); // flag over default
        assert_eq!(cfg.epochs, RunConfig::default().epochs);
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 12);
    }
}
