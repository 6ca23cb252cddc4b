//! Shared optimization machinery: cosine learning-rate schedule, Adam /
//! SGD-momentum updates, a deterministic batch loop with per-epoch
//! checkpoint hooks, and resumable training state.
//!
//! Models stay opaque to this module: callers hand over a gradient closure
//! (index batch → loss and gradients) and a parameter accessor (fixed
//! declaration order). Shuffling derives from `(seed, epoch)` alone so a
//! resumed run replays the exact stream an uninterrupted run would see.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::nn::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { momentum: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_start: 1e-4,
            lr_end: 1e-6,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerKind::default(),
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr_start = lr_end = 0 is allowed: a zero-rate run must leave
        // parameters untouched, which some tests rely on.
        if !(self.lr_start >= self.lr_end && self.lr_end >= 0.0) {
            return Err(Error::validation(format!(
                "need lr_start >= lr_end >= 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Cosine decay from `lr_start` at step 0 to `lr_end` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::validation(format!(
            "step {step} out of range 0..={total_steps}"
        )));
    }
    if total_steps == 0 {
        return Ok(cfg.lr_start);
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(cfg.lr_end + (cfg.lr_start - cfg.lr_end) * (1.0 + phase.cos()) / 2.0)
}

/// First-moment / second-moment state for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    m: Vec<Mat<f32>>,
    v: Vec<Mat<f32>>,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, m: Vec::new(), v: Vec::new(), step: 0 }
    }

    fn ensure_state(&mut self, params: &[&mut Mat<f32>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.v = self.m.clone();
            }
        }
    }

    pub fn apply(&mut self, params: &mut [&mut Mat<f32>], grads: &[Mat<f32>], lr: f64, weight_decay: f64) {
        self.ensure_state(params);
        self.step += 1;
        let lr = lr as f32;
        let wd = weight_decay as f32;
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (b1, b2, eps) = (beta1 as f32, beta2 as f32, eps as f32);
                let bc1 = 1.0 - (beta1 as f32).powi(self.step as i32);
                let bc2 = 1.0 - (beta2 as f32).powi(self.step as i32);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads.iter())
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for i in 0..p.len() {
                        let gi = g.data()[i];
                        let mi = &mut m.data_mut()[i];
                        *mi = b1 * *mi + (1.0 - b1) * gi;
                        let vi = &mut v.data_mut()[i];
                        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        let x = &mut p.data_mut()[i];
                        *x -= lr * (mhat / (vhat.sqrt() + eps) + wd * *x);
                    }
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                let mu = momentum as f32;
                for ((p, g), m) in params.iter_mut().zip(grads.iter()).zip(self.m.iter_mut()) {
                    for i in 0..p.len() {
                        let gi = g.data()[i] + wd * p.data()[i];
                        let mi = &mut m.data_mut()[i];
                        *mi = mu * *mi + gi;
                        p.data_mut()[i] -= lr * *mi;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FitControl {
    Continue,
    Stop,
}

/// Everything needed to continue a run exactly where it left off.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: Vec<Mat<f32>>,
    pub m: Vec<Mat<f32>>,
    pub v: Vec<Mat<f32>>,
    pub next_epoch: usize,
    pub step: u64,
}

#[derive(Debug)]
pub struct FitReport {
    pub history: Vec<EpochStats>,
    pub state: TrainState,
}

/// Deterministic mini-batch training loop.
///
/// `grads_of(model, batch)` returns the summed batch loss and gradients in
/// the same order `params_of` yields parameters. `on_epoch` runs after each
/// epoch (checkpointing, eval, early stop). Aborts with diagnostics if the
/// loss turns non-finite.
pub fn fit<M>(
    model: &mut M,
    n_samples: usize,
    cfg: &TrainConfig,
    mut grads_of: impl FnMut(&M, &[usize]) -> Result<(f64, Vec<Mat<f32>>)>,
    params_of: impl Fn(&mut M) -> Vec<&mut Mat<f32>>,
    mut on_epoch: impl FnMut(&M, &EpochStats) -> Result<FitControl>,
    resume: Option<TrainState>,
) -> Result<FitReport> {
    cfg.validate()?;
    if n_samples == 0 {
        return Err(Error::Train("dataset is empty".to_string()));
    }
    let batches_per_epoch = n_samples.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;

    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut start_epoch = 0;
    if let Some(state) = resume {
        let mut ps = params_of(model);
        if ps.len() != state.params.len() {
            return Err(Error::mismatch("resume state has wrong parameter count".to_string()));
        }
        for (p, s) in ps.iter_mut().zip(state.params.iter()) {
            **p = s.clone();
        }
        optimizer.m = state.m;
        optimizer.v = state.v;
        optimizer.step = state.step;
        start_epoch = state.next_epoch;
    }

    let mut history = Vec::new();
    let mut step = optimizer.step as usize;
    'epochs: for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..n_samples).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_lr = cfg.lr_start;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = grads_of(model, batch)?;
            let lr = cosine_lr(step, total_steps, cfg)?;
            epoch_lr = lr;
            if !loss.is_finite() {
                let gnorm: f64 = grads.iter().map(|g| g.frob_norm().powi(2)).sum::<f64>().sqrt();
                return Err(Error::Train(format!(
                    "non-finite loss at step {step} (epoch {epoch}), lr {lr:.3e}, grad norm {gnorm:.3e}"
                )));
            }
            let mut ps = params_of(model);
            if ps.len() != grads.len() {
                return Err(Error::mismatch(format!(
                    "{} gradients for {} parameters",
                    grads.len(),
                    ps.len()
                )));
            }
            optimizer.apply(&mut ps, &grads, lr, cfg.weight_decay);
            epoch_loss += loss;
            step += 1;
        }
        let stats = EpochStats { epoch, loss: epoch_loss / n_samples as f64, lr: epoch_lr };
        history.push(stats.clone());
        if on_epoch(model, &stats)? == FitControl::Stop {
            let state = snapshot(model, &params_of, &optimizer, epoch + 1);
            history.shrink_to_fit();
            return Ok(FitReport { history, state });
        }
        if epoch + 1 == cfg.epochs {
            break 'epochs;
        }
    }
    let state = snapshot(model, &params_of, &optimizer, cfg.epochs);
    Ok(FitReport { history, state })
}

fn snapshot<M>(
    model: &mut M,
    params_of: &impl Fn(&mut M) -> Vec<&mut Mat<f32>>,
    optimizer: &Optimizer,
    next_epoch: usize,
) -> TrainState {
    let params = params_of(model).iter().map(|p| (**p).clone()).collect();
    TrainState {
        params,
        m: optimizer.m.clone(),
        v: optimizer.v.clone(),
        next_epoch,
        step: optimizer.step,
    }
}

// --- training-state container -----------------------------------------------

const STATE_MAGIC: &[u8; 4] = b"TTRN";
const STATE_VERSION: u16 = 1;

fn write_mats(w: &mut impl Write, mats: &[Mat<f32>]) -> Result<()> {
    io::write_u32(w, mats.len() as u32)?;
    for m in mats {
        io::write_u32(w, m.rows() as u32)?;
        io::write_u32(w, m.cols() as u32)?;
        io::write_f32_slice(w, m.data())?;
    }
    Ok(())
}

fn read_mats(r: &mut impl Read) -> Result<Vec<Mat<f32>>> {
    let n = io::read_u32(r)? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let rows = io::read_u32(r)? as usize;
        let cols = io::read_u32(r)? as usize;
        let data = io::read_f32_vec(r, rows * cols)?;
        out.push(Mat::from_vec(rows, cols, data));
    }
    Ok(out)
}

pub fn save_train_state(path: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    io::write_magic(&mut w, STATE_MAGIC)?;
    io::write_u16(&mut w, STATE_VERSION)?;
    io::write_u32(&mut w, state.next_epoch as u32)?;
    io::write_u64(&mut w, state.step)?;
    write_mats(&mut w, &state.params)?;
    write_mats(&mut w, &state.m)?;
    write_mats(&mut w, &state.v)?;
    Ok(())
}

pub fn load_train_state(path: impl AsRef<Path>) -> Result<TrainState> {
    let mut r = BufReader::new(File::open(path)?);
    io::expect_magic(&mut r, STATE_MAGIC)?;
    let version = io::read_u16(&mut r)?;
    io::check_version(version, STATE_VERSION, "train state")?;
    let next_epoch = io::read_u32(&mut r)? as usize;
    let step = io::read_u64(&mut r)?;
    let params = read_mats(&mut r)?;
    let m = read_mats(&mut r)?;
    let v = read_mats(&mut r)?;
    Ok(TrainState { params, m, v, next_epoch, step })
}

/// `epoch,loss,lr` rows.
pub fn write_loss_csv(path: impl AsRef<Path>, history: &[EpochStats]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,loss,lr")?;
    for h in history {
        writeln!(w, "{},{},{}", h.epoch, h.loss, h.lr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalar {
        theta: Mat<f32>,
    }

    fn quad_grads(s: &Scalar, batch: &[usize]) -> Result<(f64, Vec<Mat<f32>>)> {
        let th = s.theta.data()[0] as f64;
        let n = batch.len() as f64;
        let loss = n * (th - 3.0) * (th - 3.0);
        let grad = Mat::from_vec(1, 1, vec![(n * 2.0 * (th - 3.0)) as f32]);
        Ok((loss, vec![grad]))
    }

    fn quad_cfg() -> TrainConfig {
        TrainConfig {
            lr_start: 0.2,
            lr_end: 1e-3,
            epochs: 300,
            batch_size: 1,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn quadratic_converges() {
        let mut model = Scalar { theta: Mat::zeros(1, 1) };
        let report = fit(
            &mut model,
            1,
            &quad_cfg(),
            |m, b| quad_grads(m, b),
            |m| vec![&mut m.theta],
            |_, _| Ok(FitControl::Continue),
            None,
        )
        .unwrap();
        assert!((model.theta.data()[0] as f64 - 3.0).abs() < 1e-3);
        assert_eq!(report.history.len(), 300);
    }

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig { lr_start: 1e-4, lr_end: 1e-6, ..TrainConfig::default() };
        assert_eq!(cosine_lr(0, 100, &cfg).unwrap(), 1e-4);
        let end = cosine_lr(100, 100, &cfg).unwrap();
        assert!((end - 1e-6).abs() < 1e-18);
        let mid = cosine_lr(50, 100, &cfg).unwrap();
        assert!((mid - 5.05e-5).abs() < 1e-12);
        assert!(cosine_lr(101, 100, &cfg).is_err());
    }

    #[test]
    fn cosine_schedule_monotone_non_increasing() {
        let cfg = TrainConfig::default();
        let mut prev = f64::INFINITY;
        for s in 0..=500 {
            let lr = cosine_lr(s, 500, &cfg).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn fixed_seed_gives_identical_histories() {
        let run = || {
            let mut model = Scalar { theta: Mat::zeros(1, 1) };
            fit(
                &mut model,
                5,
                &TrainConfig { epochs: 8, batch_size: 2, lr_start: 0.05, lr_end: 1e-4, seed: 42, ..TrainConfig::default() },
                |m, b| quad_grads(m, b),
                |m| vec![&mut m.theta],
                |_, _| Ok(FitControl::Continue),
                None,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(b.history.iter()) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        }
        assert_eq!(a.state.params, b.state.params);
    }

    #[test]
    fn nan_loss_aborts_with_step_diagnostics() {
        let mut model = Scalar { theta: Mat::zeros(1, 1) };
        let mut calls = 0usize;
        let err = fit(
            &mut model,
            1,
            &quad_cfg(),
            |m, b| {
                calls += 1;
                if calls == 4 {
                    Ok((f64::NAN, vec![Mat::zeros(1, 1)]))
                } else {
                    quad_grads(m, b)
                }
            },
            |m| vec![&mut m.theta],
            |_, _| Ok(FitControl::Continue),
            None,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("step 3"), "{msg}");
        assert!(msg.contains("grad norm"), "{msg}");
    }

    #[test]
    fn zero_learning_rate_leaves_params_bitwise_unchanged() {
        let mut model = Scalar { theta: Mat::from_vec(1, 1, vec![1.2345f32]) };
        let before = model.theta.clone();
        fit(
            &mut model,
            3,
            &TrainConfig { lr_start: 0.0, lr_end: 0.0, epochs: 5, batch_size: 2, ..TrainConfig::default() },
            |m, b| quad_grads(m, b),
            |m| vec![&mut m.theta],
            |_, _| Ok(FitControl::Continue),
            None,
        )
        .unwrap();
        assert_eq!(model.theta.data()[0].to_bits(), before.data()[0].to_bits());
    }

    #[test]
    fn resume_matches_uninterrupted_run_exactly() {
        let cfg = TrainConfig {
            lr_start: 0.1,
            lr_end: 1e-3,
            epochs: 10,
            batch_size: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        // uninterrupted
        let mut full = Scalar { theta: Mat::zeros(1, 1) };
        let full_report = fit(
            &mut full,
            5,
            &cfg,
            |m, b| quad_grads(m, b),
            |m| vec![&mut m.theta],
            |_, _| Ok(FitControl::Continue),
            None,
        )
        .unwrap();

        // stop after 4 epochs, save/load through the container, continue
        let mut part = Scalar { theta: Mat::zeros(1, 1) };
        let first = fit(
            &mut part,
            5,
            &cfg,
            |m, b| quad_grads(m, b),
            |m| vec![&mut m.theta],
            |_, s| Ok(if s.epoch == 3 { FitControl::Stop } else { FitControl::Continue }),
            None,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ttrn");
        save_train_state(&path, &first.state).unwrap();
        let loaded = load_train_state(&path).unwrap();
        assert_eq!(loaded, first.state);

        let second = fit(
            &mut part,
            5,
            &cfg,
            |m, b| quad_grads(m, b),
            |m| vec![&mut m.theta],
            |_, _| Ok(FitControl::Continue),
            Some(loaded),
        )
        .unwrap();

        assert_eq!(part.theta.data()[0].to_bits(), full.theta.data()[0].to_bits());
        let resumed: Vec<_> = first.history.iter().chain(second.history.iter()).collect();
        assert_eq!(resumed.len(), full_report.history.len());
        for (a, b) in resumed.iter().zip(full_report.history.iter()) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let mut model = Scalar { theta: Mat::zeros(1, 1) };
        let err = fit(
            &mut model,
            0,
            &TrainConfig::default(),
            |m, b| quad_grads(m, b),
            |m| vec![&mut m.theta],
            |_, _| Ok(FitControl::Continue),
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Train(_)));
    }
}
