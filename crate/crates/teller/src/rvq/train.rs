//! Codec training: straight-through gradients for the feed-forward pair,
//! exponential-moving-average updates for the codebooks, and re-seeding of
//! entries whose usage collapses.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::motion::{flatten_window, MotionWindow};
use crate::nn::{grad_check_named, Graph, GradCheckReport, Mat, Var};
use crate::train::{cosine_lr, Optimizer, TrainConfig};

use super::{nearest_entry, RVQCodec};

#[derive(Clone, Debug)]
pub struct RvqTrainConfig {
    pub train: TrainConfig,
    /// EMA decay for codebook counts and sums.
    pub ema_decay: f32,
    /// An entry whose EMA usage drops below this fraction of uniform is
    /// re-seeded from a batch sample.
    pub dead_usage_fraction: f32,
}

impl Default for RvqTrainConfig {
    fn default() -> Self {
        RvqTrainConfig {
            train: TrainConfig { lr_start: 3e-3, lr_end: 1e-5, epochs: 20, ..TrainConfig::default() },
            ema_decay: 0.99,
            dead_usage_fraction: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RvqEpochStats {
    pub epoch: usize,
    pub vq_loss: f64,
    pub recon: f64,
    pub commit: f64,
    pub lr: f64,
    pub reseeded: usize,
    /// End-of-epoch reconstruction error through the full token path,
    /// measured on a fixed training subset.
    pub train_recon: f64,
    pub eval_recon: Option<f64>,
}

/// Train encoder, decoder, and codebooks on a window dataset.
pub fn train_codebooks(
    codec: &mut RVQCodec,
    windows: &[MotionWindow],
    cfg: &RvqTrainConfig,
    eval: Option<&[MotionWindow]>,
) -> Result<Vec<RvqEpochStats>> {
    cfg.train.validate()?;
    if windows.is_empty() {
        return Err(Error::Train("dataset is empty".to_string()));
    }
    for w in windows {
        if w.frames.len() != codec.config.window_frames {
            return Err(Error::validation(format!(
                "dataset window has {} frames, codec expects {}",
                w.frames.len(),
                codec.config.window_frames
            )));
        }
    }
    let n = windows.len();
    let d_in = codec.config.input_dim();
    let mut pool = Mat::zeros(n, d_in);
    for (i, w) in windows.iter().enumerate() {
        pool.row_mut(i).copy_from_slice(&flatten_window(w));
    }

    init_codebooks_from_data(codec, &pool, cfg.train.seed);

    let slots = codec.config.slots();
    let dim = codec.config.latent_dim;
    let k = codec.config.codebook_size;
    let stages = codec.config.residual_stages;
    let cw = codec.config.commitment_weight as f64;

    let mut ema_count: Vec<Vec<f32>> = codec
        .codebooks
        .iter()
        .map(|_| vec![1.0f32; k])
        .collect();
    let mut ema_sum: Vec<Mat<f32>> = codec.codebooks.clone();

    let mut optimizer = Optimizer::new(cfg.train.optimizer);
    let batches_per_epoch = n.div_ceil(cfg.train.batch_size);
    let total_steps = cfg.train.epochs * batches_per_epoch;
    let mut reseed_rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0xD0E5_EED5);

    let probe = &windows[..n.min(256)];
    let mut history = Vec::with_capacity(cfg.train.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.train.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.train.seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
        );
        order.shuffle(&mut rng);

        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut epoch_lr = cfg.train.lr_start;
        let mut reseeded = 0usize;

        for batch in order.chunks(cfg.train.batch_size) {
            let b = batch.len();
            let mut x = Mat::zeros(b, d_in);
            for (row, &i) in batch.iter().enumerate() {
                x.row_mut(row).copy_from_slice(pool.row(i));
            }

            // graph: encoder → (values quantized outside) → straight-through
            // decoder; one graph per batch
            let mut g = Graph::<f32>::new();
            let ffn_vars: [Var; 8] = {
                let ps = codec.ffn_params();
                [
                    g.param(ps[0].clone()), g.param(ps[1].clone()),
                    g.param(ps[2].clone()), g.param(ps[3].clone()),
                    g.param(ps[4].clone()), g.param(ps[5].clone()),
                    g.param(ps[6].clone()), g.param(ps[7].clone()),
                ]
            };
            let x_var = g.leaf(x.clone());

            // encoder first: its value feeds quantization before the
            // straight-through decoder half closes the loss
            let z = super::encoder_graph(&mut g, &ffn_vars, x_var);
            let z_val = g.value(z).clone();

            // quantize each row slot-wise, recording assignments and the
            // per-stage residual pools for EMA updates and re-seeding
            let mut z_hat = Mat::zeros(b, codec.config.latent_total());
            let mut counts = vec![vec![0f32; k]; stages];
            let mut vec_sums = vec![Mat::<f32>::zeros(k, dim); stages];
            let mut stage_residuals: Vec<Vec<Vec<f32>>> = vec![Vec::new(); stages];
            for row in 0..b {
                for slot in 0..slots {
                    let c0 = slot * dim;
                    let mut residual = z_val.row(row)[c0..c0 + dim].to_vec();
                    for (s, book) in codec.codebooks.iter().enumerate() {
                        stage_residuals[s].push(residual.clone());
                        let choice = nearest_entry(book, &residual);
                        counts[s][choice] += 1.0;
                        for (j, r) in residual.iter_mut().enumerate() {
                            let prev = vec_sums[s].get(choice, j);
                            vec_sums[s].set(choice, j, prev + *r);
                            z_hat.set(row, c0 + j, z_hat.get(row, c0 + j) + book.get(choice, j));
                            *r -= book.get(choice, j);
                        }
                    }
                }
            }

            let z_hat_var = g.leaf(z_hat);
            let (recon, commit, total) =
                super::decoder_loss_graph(&mut g, &ffn_vars, z, z_hat_var, x_var, cw);
            let loss = g.scalar(total) as f64;
            let lr = cosine_lr(step, total_steps, &cfg.train)?;
            epoch_lr = lr;
            if !loss.is_finite() {
                return Err(Error::Train(format!(
                    "non-finite codec loss at step {step} (epoch {epoch}), lr {lr:.3e}"
                )));
            }
            sums.0 += loss;
            sums.1 += g.scalar(recon) as f64;
            sums.2 += g.scalar(commit) as f64;

            g.backward(total);
            let grads: Vec<Mat<f32>> = ffn_vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
            let mut params = codec.ffn_params_mut();
            optimizer.apply(&mut params, &grads, lr, cfg.train.weight_decay);
            step += 1;

            // EMA codebook update with Laplace-smoothed division
            let uniform = (b * slots) as f32 / k as f32;
            let dead_floor = cfg.dead_usage_fraction * uniform;
            for s in 0..stages {
                for e in 0..k {
                    ema_count[s][e] =
                        cfg.ema_decay * ema_count[s][e] + (1.0 - cfg.ema_decay) * counts[s][e];
                    for j in 0..dim {
                        let v = cfg.ema_decay * ema_sum[s].get(e, j)
                            + (1.0 - cfg.ema_decay) * vec_sums[s].get(e, j);
                        ema_sum[s].set(e, j, v);
                    }
                    if ema_count[s][e] > 1e-4 {
                        for j in 0..dim {
                            codec.codebooks[s].set(e, j, ema_sum[s].get(e, j) / ema_count[s][e]);
                        }
                    }
                    if ema_count[s][e] < dead_floor && !stage_residuals[s].is_empty() {
                        let pick = reseed_rng.gen_range(0..stage_residuals[s].len());
                        let sample = &stage_residuals[s][pick];
                        for j in 0..dim {
                            codec.codebooks[s].set(e, j, sample[j]);
                            ema_sum[s].set(e, j, sample[j]);
                        }
                        ema_count[s][e] = 1.0;
                        reseeded += 1;
                    }
                }
            }
        }

        let train_recon = codec.mean_recon_error(probe)?;
        let eval_recon = match eval {
            Some(ev) if !ev.is_empty() => Some(codec.mean_recon_error(ev)?),
            _ => None,
        };
        history.push(RvqEpochStats {
            epoch,
            vq_loss: sums.0 / n as f64,
            recon: sums.1 / n as f64,
            commit: sums.2 / n as f64,
            lr: epoch_lr,
            reseeded,
            train_recon,
            eval_recon,
        });
    }
    Ok(history)
}

fn init_codebooks_from_data(codec: &mut RVQCodec, pool: &Mat<f32>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0DE_B00C);
    let k = codec.config.codebook_size;
    let dim = codec.config.latent_dim;
    let slots = codec.config.slots();
    let take = pool.rows().min(4 * k);
    let mut x = Mat::zeros(take, codec.config.input_dim());
    for i in 0..take {
        x.row_mut(i).copy_from_slice(pool.row(i));
    }
    let z = codec.encode_flat(&x);
    // slot latents as the stage-0 sample pool
    let mut samples: Vec<Vec<f32>> = Vec::with_capacity(take * slots);
    for row in 0..take {
        for slot in 0..slots {
            samples.push(z.row(row)[slot * dim..(slot + 1) * dim].to_vec());
        }
    }
    for s in 0..codec.config.residual_stages {
        let mut book = Mat::zeros(k, dim);
        for e in 0..k {
            let pick = rng.gen_range(0..samples.len());
            book.row_mut(e).copy_from_slice(&samples[pick]);
        }
        // subtract assignments to form the next stage's residual pool
        for sample in samples.iter_mut() {
            let choice = nearest_entry(&book, sample);
            for (v, j) in sample.iter_mut().zip(0..dim) {
                *v -= book.get(choice, j);
            }
        }
        codec.codebooks[s] = book;
    }
}

/// Finite-difference check of the straight-through `L_vq` gradients.
///
/// The straight-through estimator is the exact gradient of a surrogate in
/// which the quantization gap `ẑ − z` is frozen at its base-parameter value;
/// that surrogate is what the finite differences probe.
pub fn grad_check_vq(codec: &RVQCodec, windows: &[MotionWindow]) -> Result<GradCheckReport> {
    if windows.is_empty() {
        return Err(Error::validation("need at least one window"));
    }
    let d_in = codec.config.input_dim();
    let mut x = Mat::zeros(windows.len(), d_in);
    for (i, w) in windows.iter().enumerate() {
        if w.frames.len() != codec.config.window_frames {
            return Err(Error::validation("window length mismatch".to_string()));
        }
        x.row_mut(i).copy_from_slice(&flatten_window(w));
    }
    // freeze ẑ and the gap ẑ − z at the base parameters
    let mut z_hat = Mat::zeros(windows.len(), codec.config.latent_total());
    let mut gap = Mat::zeros(windows.len(), codec.config.latent_total());
    for (i, w) in windows.iter().enumerate() {
        let z = codec.encode(w)?;
        let q = codec.quantize(&z)?;
        z_hat.row_mut(i).copy_from_slice(q.z_hat.data());
        for (j, gv) in gap.row_mut(i).iter_mut().enumerate() {
            *gv = q.z_hat.data()[j] - z.data()[j];
        }
    }

    let names = ["enc_w1", "enc_b1", "enc_w2", "enc_b2", "dec_w1", "dec_b1", "dec_w2", "dec_b2"];
    let params: Vec<(String, Mat<f64>)> = codec
        .ffn_params()
        .iter()
        .zip(names.iter())
        .map(|(m, n)| (n.to_string(), m.cast::<f64>()))
        .collect();
    let x64 = x.cast::<f64>();
    let z_hat64 = z_hat.cast::<f64>();
    let gap64 = gap.cast::<f64>();
    let cw = codec.config.commitment_weight as f64;

    Ok(grad_check_named(&params, move |g, vars| {
        let ffn: [Var; 8] = [vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], vars[6], vars[7]];
        let x_var = g.leaf(x64.clone());
        let z = super::encoder_graph(g, &ffn, x_var);
        // decoder input: z plus the frozen gap (value ẑ at base params)
        let gap_var = g.leaf(gap64.clone());
        let st = g.add(z, gap_var);
        let y = super::decoder_forward_graph(g, &ffn, st);
        let diff = g.sub(y, x_var);
        let sq = g.square(diff);
        let recon = g.sum(sq);
        let zh_var = g.leaf(z_hat64.clone());
        let cdiff = g.sub(z, zh_var);
        let csq = g.square(cdiff);
        let commit = g.sum(csq);
        let scaled = g.scale(commit, cw);
        g.add(recon, scaled)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{MotionLatent, FRAME_DIM};
    use crate::rvq::RVQConfig;

    /// Windows living on a 3-dimensional manifold: three seeded "drivers"
    /// blended through a fixed mixing matrix, smooth across the 4 frames.
    pub(crate) fn manifold_windows(n: usize, seed: u64) -> Vec<MotionWindow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mixing: Vec<[f32; 3]> = (0..FRAME_DIM)
            .map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)])
            .collect();
        (0..n)
            .map(|_| {
                let amp: [f32; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let vel: [f32; 3] = [rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)];
                let frames = (0..4)
                    .map(|f| {
                        let t = f as f32;
                        let vals: Vec<f32> = mixing
                            .iter()
                            .map(|m| {
                                (0..3).map(|d| m[d] * (amp[d] + vel[d] * t)).sum::<f32>()
                            })
                            .collect();
                        MotionLatent::from_flat(&vals).unwrap()
                    })
                    .collect();
                MotionWindow::new(frames, 20.0).unwrap()
            })
            .collect()
    }

    fn small_config(tokens: usize, stages: usize) -> RVQConfig {
        RVQConfig {
            window_frames: 4,
            tokens_per_window: tokens,
            latent_dim: 8,
            codebook_size: 32,
            residual_stages: stages,
            commitment_weight: 1.0,
            frame_rate_hz: 20.0,
        }
    }

    #[test]
    fn straight_through_gradients_match_finite_differences() {
        let codec = RVQCodec::seeded(
            RVQConfig {
                window_frames: 4,
                tokens_per_window: 4,
                latent_dim: 3,
                codebook_size: 5,
                residual_stages: 2,
                commitment_weight: 0.8,
                frame_rate_hz: 20.0,
            },
            21,
        )
        .unwrap();
        let windows = manifold_windows(2, 99);
        let report = grad_check_vq(&codec, &windows).unwrap();
        assert!(report.passes(1e-4), "max rel err {} at {}", report.max_rel_err, report.worst);
    }

    #[test]
    fn single_point_dataset_is_learned_below_1e_4() {
        let mut codec = RVQCodec::seeded(small_config(8, 2), 30).unwrap();
        let one = manifold_windows(1, 7).pop().unwrap();
        let data = vec![one; 16];
        let cfg = RvqTrainConfig {
            train: TrainConfig {
                lr_start: 5e-3,
                lr_end: 1e-5,
                epochs: 600,
                batch_size: 16,
                seed: 3,
                ..TrainConfig::default()
            },
            ema_decay: 0.9,
            ..RvqTrainConfig::default()
        };
        let history = train_codebooks(&mut codec, &data, &cfg, None).unwrap();
        let last = history.last().unwrap();
        assert!(last.train_recon < 1e-4, "train recon {}", last.train_recon);
    }

    #[test]
    fn recon_error_strictly_decreases_over_first_epochs() {
        let mut codec = RVQCodec::seeded(small_config(8, 2), 31).unwrap();
        let data = manifold_windows(128, 8);
        let cfg = RvqTrainConfig {
            train: TrainConfig {
                lr_start: 2e-3,
                lr_end: 1e-4,
                epochs: 4,
                batch_size: 32,
                seed: 4,
                ..TrainConfig::default()
            },
            ..RvqTrainConfig::default()
        };
        let history = train_codebooks(&mut codec, &data, &cfg, None).unwrap();
        assert!(history[0].train_recon > history[1].train_recon);
        assert!(history[1].train_recon > history[2].train_recon);
    }

    #[test]
    fn more_residual_stages_do_not_hurt_held_out_recon() {
        // one manifold, split into train and held-out
        let pool = manifold_windows(240, 10);
        let (train_set, held_out) = pool.split_at(192);
        let mut prev = f64::INFINITY;
        for stages in [1usize, 2, 4, 8] {
            let mut codec = RVQCodec::seeded(small_config(4 * stages, stages), 32).unwrap();
            let cfg = RvqTrainConfig {
                train: TrainConfig {
                    lr_start: 5e-3,
                    lr_end: 1e-4,
                    epochs: 40,
                    batch_size: 32,
                    seed: 5,
                    ..TrainConfig::default()
                },
                ..RvqTrainConfig::default()
            };
            let history = train_codebooks(&mut codec, train_set, &cfg, Some(held_out)).unwrap();
            let eval = history.last().unwrap().eval_recon.unwrap();
            assert!(
                eval <= prev * 1.05,
                "stages {stages}: eval recon {eval} worse than previous {prev}"
            );
            prev = prev.min(eval);
        }
    }

    #[test]
    fn commitment_weight_zero_and_one_both_train() {
        for cw in [0.0f32, 1.0] {
            let mut cfgc = small_config(8, 2);
            cfgc.commitment_weight = cw;
            let mut codec = RVQCodec::seeded(cfgc, 33).unwrap();
            let data = manifold_windows(96, 12);
            let cfg = RvqTrainConfig {
                train: TrainConfig {
                    lr_start: 2e-3,
                    lr_end: 1e-4,
                    epochs: 6,
                    batch_size: 32,
                    seed: 6,
                    ..TrainConfig::default()
                },
                ..RvqTrainConfig::default()
            };
            let history = train_codebooks(&mut codec, &data, &cfg, None).unwrap();
            assert!(history.iter().all(|h| h.recon.is_finite()));
            assert!(history.last().unwrap().train_recon < history[0].train_recon);
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut codec = RVQCodec::seeded(small_config(8, 2), 34).unwrap();
        let err = train_codebooks(&mut codec, &[], &RvqTrainConfig::default(), None).unwrap_err();
        assert!(matches!(err, Error::Train(_)));
    }
}
