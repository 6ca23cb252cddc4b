//! Refiner training on synthetic clean/degraded sequence pairs.
//!
//! Each sample carries ten frames: the first five are clean context, the
//! last five are degraded inside the masked region (small pattern shifts
//! plus noise, the kind of accessory inconsistency the refiner corrects).
//! Only the temporal-attention parameters train; the patch encoder that
//! lifts frames to features stays fixed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{grad_check_named, Graph, GradCheckReport, Mat, Var};
use crate::train::{fit, EpochStats, FitControl, TrainConfig, TrainState};

use super::{
    build_mask, etm_loss, loss_mask_matrix, refine, refine_graph, reshape_temporal, ETMParams,
    FeatureVolume, LandmarkSet, RegionMask, LOSS_VOLUME_FRAMES,
};

/// One training example in feature space.
#[derive(Clone, Debug)]
pub struct EtmSample {
    /// Clean frames 1..5, degraded frames 6..10.
    pub input: FeatureVolume,
    pub target: FeatureVolume,
    /// Feature-grid mask, one layer per frame.
    pub mask: RegionMask,
}

impl EtmSample {
    fn validate(&self, params: &ETMParams) -> Result<()> {
        let x = &self.input;
        let y = &self.target;
        if (x.b, x.t, x.h, x.w, x.c) != (y.b, y.t, y.h, y.w, y.c) {
            return Err(Error::mismatch("input/target shapes differ".to_string()));
        }
        if x.t != LOSS_VOLUME_FRAMES {
            return Err(Error::validation(format!("samples must have {LOSS_VOLUME_FRAMES} frames")));
        }
        if x.c != params.config.channels {
            return Err(Error::mismatch("sample channels differ from refiner".to_string()));
        }
        if (self.mask.t, self.mask.h, self.mask.w) != (x.t, x.h, x.w) {
            return Err(Error::mismatch("mask shape differs from sample".to_string()));
        }
        if !x.all_finite() || !y.all_finite() {
            return Err(Error::validation("non-finite sample values"));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct EtmTrainReport {
    pub history: Vec<EpochStats>,
    pub skipped: usize,
    pub state: TrainState,
}

/// Train the temporal-attention parameters to reconstruct clean features on
/// the masked region of frames 6..10. Malformed samples are skipped with a
/// warning.
pub fn train_etm(
    params: &mut ETMParams,
    samples: &[EtmSample],
    cfg: &TrainConfig,
) -> Result<EtmTrainReport> {
    let mut valid = Vec::new();
    let mut skipped = 0usize;
    for (i, s) in samples.iter().enumerate() {
        match s.validate(params) {
            Ok(()) => valid.push(s),
            Err(e) => {
                log::warn!("skipping malformed refiner sample {i}: {e}");
                skipped += 1;
            }
        }
    }
    if valid.is_empty() {
        return Err(Error::Train("no valid refiner samples".to_string()));
    }

    let n_heads = params.config.n_heads;
    let report = fit(
        params,
        valid.len(),
        cfg,
        |p, batch| {
            let mut g = Graph::<f32>::new();
            let attn: [Var; 5] = {
                let ps = p.attn_params();
                [
                    g.param(ps[0].clone()),
                    g.param(ps[1].clone()),
                    g.param(ps[2].clone()),
                    g.param(ps[3].clone()),
                    g.param(ps[4].clone()),
                ]
            };
            // stack the batch along b; views and masks stack identically
            let inputs: Vec<&FeatureVolume> = batch.iter().map(|&i| &valid[i].input).collect();
            let targets: Vec<&FeatureVolume> = batch.iter().map(|&i| &valid[i].target).collect();
            let x = FeatureVolume::concat_batch(&inputs)?;
            let y = FeatureVolume::concat_batch(&targets)?;
            let x_view = reshape_temporal(&x);
            let y_view = reshape_temporal(&y);
            let mut mask_rows = Vec::with_capacity(batch.len());
            for &i in batch {
                mask_rows.push(loss_mask_matrix(&valid[i].mask, 1, x.c));
            }
            let mask_mat = vstack(&mask_rows);

            let x_var = g.leaf(x_view.mat);
            let refined = refine_graph(&mut g, &attn, x_var, x_view.rows, x_view.t, n_heads);
            let y_var = g.leaf(y_view.mat);
            let diff = g.sub(refined, y_var);
            let mask_var = g.leaf(mask_mat);
            let masked = g.mul_elem(diff, mask_var);
            let sq = g.square(masked);
            let loss = g.sum(sq);
            g.backward(loss);
            let grads = attn.iter().map(|&v| g.grad_or_zeros(v)).collect();
            Ok((g.scalar(loss) as f64, grads))
        },
        |p| p.attn_params_mut().into_iter().collect(),
        |_, _| Ok(FitControl::Continue),
        None,
    )?;
    Ok(EtmTrainReport { history: report.history, skipped, state: report.state })
}

fn vstack(mats: &[Mat<f32>]) -> Mat<f32> {
    let cols = mats[0].cols();
    let rows: usize = mats.iter().map(|m| m.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for m in mats {
        data.extend_from_slice(m.data());
    }
    Mat::from_vec(rows, cols, data)
}

/// Mean masked loss of the refined prediction over a sample set.
pub fn mean_refined_loss(params: &ETMParams, samples: &[EtmSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let refined = refine(params, &s.input)?;
        total += etm_loss(&refined, &s.target, &s.mask)?;
    }
    Ok(total / samples.len() as f64)
}

/// Finite-difference check of the masked reconstruction loss gradients.
pub fn grad_check_etm(params: &ETMParams, sample: &EtmSample) -> Result<GradCheckReport> {
    sample.validate(params)?;
    let names = ["wq", "wk", "wv", "wo", "pos_emb"];
    let mats: Vec<(String, Mat<f64>)> = params
        .attn_params()
        .iter()
        .zip(names)
        .map(|(m, n)| (n.to_string(), m.cast::<f64>()))
        .collect();
    let x_view = reshape_temporal(&sample.input);
    let y_view = reshape_temporal(&sample.target);
    let mask = loss_mask_matrix(&sample.mask, sample.input.b, sample.input.c);
    let (rows, t) = (x_view.rows, x_view.t);
    let n_heads = params.config.n_heads;
    let x64 = x_view.mat.cast::<f64>();
    let y64 = y_view.mat.cast::<f64>();
    let m64 = mask.cast::<f64>();
    Ok(grad_check_named(&mats, move |g, vars| {
        let attn: [Var; 5] = [vars[0], vars[1], vars[2], vars[3], vars[4]];
        let x = g.leaf(x64.clone());
        let refined = refine_graph(g, &attn, x, rows, t, n_heads);
        let y = g.leaf(y64.clone());
        let diff = g.sub(refined, y);
        let m = g.leaf(m64.clone());
        let masked = g.mul_elem(diff, m);
        let sq = g.square(masked);
        g.sum(sq)
    }))
}

/// Synthetic ten-frame sequence in pixel space, encoded to features.
///
/// Ground truth: a static "accessory" pattern inside the masked box over a
/// drifting background. Degraded frames 6..10 shift the pattern by a small
/// random offset and add noise, confined to the mask.
pub fn synthetic_sequence(params: &ETMParams, frame_px: usize, seed: u64) -> Result<EtmSample> {
    let p = params.config.patch_size;
    if frame_px % p != 0 {
        return Err(Error::validation(format!(
            "frame size {frame_px} does not tile into {p}-pixel patches"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = LOSS_VOLUME_FRAMES;

    // accessory box: roughly the central region, snapped to patch cells
    let box0 = frame_px / 4;
    let box1 = frame_px * 3 / 4 - 1;
    let pattern: Vec<Vec<f32>> = (0..=box1 - box0)
        .map(|_| (0..=box1 - box0).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        .collect();
    let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);

    let background = |x: usize, y: usize, ti: usize| -> f32 {
        let fx = x as f32 / frame_px as f32;
        let fy = y as f32 / frame_px as f32;
        (std::f32::consts::TAU * (fx + 0.13 * ti as f32) + phase).sin() * 0.3
            + (std::f32::consts::TAU * (fy - 0.07 * ti as f32)).cos() * 0.2
    };

    let mut gt_frames: Vec<Mat<f32>> = Vec::with_capacity(t);
    for ti in 0..t {
        let mut frame = Mat::from_fn(frame_px, frame_px, |y, x| background(x, y, ti));
        for y in box0..=box1 {
            for x in box0..=box1 {
                frame.set(y, x, pattern[y - box0][x - box0]);
            }
        }
        gt_frames.push(frame);
    }

    // landmarks mark the accessory corners; the mask comes from their box
    let mut landmarks = LandmarkSet::new();
    landmarks.insert(93, box0 as f32, box0 as f32);
    landmarks.insert(323, box1 as f32, box0 as f32);
    landmarks.insert(152, (box0 + box1) as f32 / 2.0, box1 as f32);
    let pixel_mask = build_mask(&landmarks, (frame_px, frame_px), &[93, 323, 152], 0.0)?
        .broadcast(t);

    let mut degraded = gt_frames.clone();
    for (ti, frame) in degraded.iter_mut().enumerate().take(t).skip(5) {
        let dx: f32 = rng.gen_range(-1.5..1.5);
        let dy: f32 = rng.gen_range(-1.5..1.5);
        for y in box0..=box1 {
            for x in box0..=box1 {
                if !pixel_mask.get(ti, y, x) {
                    continue;
                }
                let sx = (x - box0) as f32 + dx;
                let sy = (y - box0) as f32 + dy;
                let sample = bilinear(&pattern, sx, sy);
                let noise: f32 = rng.gen_range(-0.1..0.1);
                frame.set(y, x, sample + noise);
            }
        }
    }

    let input = params.encode_frames(&degraded)?;
    let target = params.encode_frames(&gt_frames)?;
    let mask = pixel_mask.downsample(p)?;
    Ok(EtmSample { input, target, mask })
}

fn bilinear(pattern: &[Vec<f32>], x: f32, y: f32) -> f32 {
    let n = pattern.len() as isize;
    let at = |yy: isize, xx: isize| -> f32 {
        let yy = yy.clamp(0, n - 1) as usize;
        let xx = xx.clamp(0, n - 1) as usize;
        pattern[yy][xx]
    };
    let x0 = x.floor() as isize;
    let y0 = y.floor() as isize;
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    at(y0, x0) * (1.0 - fx) * (1.0 - fy)
        + at(y0, x0 + 1) * fx * (1.0 - fy)
        + at(y0 + 1, x0) * (1.0 - fx) * fy
        + at(y0 + 1, x0 + 1) * fx * fy
}
