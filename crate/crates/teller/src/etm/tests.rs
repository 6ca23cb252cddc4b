use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::nn::Graph;
use crate::train::TrainConfig;

use super::*;

fn small_params() -> ETMParams {
    ETMParams::seeded(
        ETMConfig { channels: 4, t_max: 10, n_heads: 2, patch_size: 4, zero_init_output: false },
        1,
    )
    .unwrap()
}

fn random_volume(b: usize, t: usize, h: usize, w: usize, c: usize, seed: u64) -> FeatureVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..b * t * h * w * c).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    FeatureVolume::from_vec(b, t, h, w, c, data).unwrap()
}

#[test]
fn reshape_shapes_and_round_trip() {
    let x = random_volume(1, 5, 2, 2, 3, 2);
    let view = reshape_temporal(&x);
    assert_eq!(view.rows, 4);
    assert_eq!(view.t, 5);
    assert_eq!(view.c, 3);
    assert_eq!(view.mat.rows(), 20);
    let back = view.to_volume();
    assert_eq!(x, back);

    let scalar = random_volume(1, 1, 1, 1, 1, 3);
    let sview = reshape_temporal(&scalar);
    assert_eq!((sview.rows, sview.t, sview.c), (1, 1, 1));
    assert_eq!(sview.to_volume(), scalar);
}

#[test]
fn reshape_places_values_where_expected() {
    let mut x = FeatureVolume::zeros(2, 3, 2, 2, 2);
    x.set(1, 2, 0, 1, 1, 7.5);
    let view = reshape_temporal(&x);
    // location row for (b=1,h=0,w=1) is (1*2+0)*2+1 = 5; temporal row 2
    assert_eq!(view.mat.get(5 * 3 + 2, 1), 7.5);
}

#[test]
fn zero_init_refiner_is_bitwise_identity() {
    let params = ETMParams::seeded(
        ETMConfig { channels: 4, t_max: 10, n_heads: 2, patch_size: 4, zero_init_output: true },
        4,
    )
    .unwrap();
    let x = random_volume(2, 6, 3, 3, 4, 5);
    let y = refine(&params, &x).unwrap();
    assert_eq!(x, y);
}

#[test]
fn single_frame_attention_matches_closed_form() {
    let params = small_params();
    let x = random_volume(1, 1, 2, 2, 4, 6);
    let y = refine(&params, &x).unwrap();
    // t = 1: softmax over one step is 1, so out = x + ((x+pos₀)·Wv)·Wo
    for hi in 0..2 {
        for wi in 0..2 {
            let xin: Vec<f32> = (0..4)
                .map(|ci| x.get(0, 0, hi, wi, ci) + params.pos_emb.get(0, ci))
                .collect();
            let mut v = vec![0.0f32; 4];
            for (j, vv) in v.iter_mut().enumerate() {
                for (i, &xv) in xin.iter().enumerate() {
                    *vv += xv * params.wv.get(i, j);
                }
            }
            for ci in 0..4 {
                let mut o = 0.0f32;
                for (i, &vv) in v.iter().enumerate() {
                    o += vv * params.wo.get(i, ci);
                }
                let want = x.get(0, 0, hi, wi, ci) + o;
                let got = y.get(0, 0, hi, wi, ci);
                assert!((want - got).abs() < 1e-5, "({hi},{wi},{ci}): {want} vs {got}");
            }
        }
    }
}

#[test]
fn refinement_mixes_only_along_time() {
    let params = small_params();
    let x = random_volume(1, 5, 3, 3, 4, 7);
    let base = refine(&params, &x).unwrap();
    let mut bumped = x.clone();
    bumped.set(0, 2, 1, 1, 0, bumped.get(0, 2, 1, 1, 0) + 10.0);
    let out = refine(&params, &bumped).unwrap();
    for ti in 0..5 {
        for hi in 0..3 {
            for wi in 0..3 {
                for ci in 0..4 {
                    let same = base.get(0, ti, hi, wi, ci) == out.get(0, ti, hi, wi, ci);
                    if hi == 1 && wi == 1 {
                        continue; // the perturbed location may change at any frame
                    }
                    assert!(same, "leak at ({ti},{hi},{wi},{ci})");
                }
            }
        }
    }
    // and the perturbed location does change at some other frame
    let mut any_changed = false;
    for ti in 0..5 {
        for ci in 0..4 {
            if base.get(0, ti, 1, 1, ci) != out.get(0, ti, 1, 1, ci) {
                any_changed = true;
            }
        }
    }
    assert!(any_changed);
}

#[test]
fn refine_is_a_single_attention_pass() {
    let params = small_params();
    let x = random_volume(1, 5, 2, 2, 4, 8);
    let view = reshape_temporal(&x);
    let mut g = Graph::<f32>::new();
    let attn = {
        let ps = params.attn_params();
        [g.leaf(ps[0].clone()), g.leaf(ps[1].clone()), g.leaf(ps[2].clone()), g.leaf(ps[3].clone()), g.leaf(ps[4].clone())]
    };
    let x_var = g.leaf(view.mat.clone());
    let _ = refine_graph(&mut g, &attn, x_var, view.rows, view.t, params.config.n_heads);
    assert_eq!(g.attention_op_count(), 1);
}

#[test]
fn refine_commutes_with_batch_concat() {
    let params = small_params();
    let a = random_volume(1, 5, 2, 2, 4, 9);
    let b = random_volume(1, 5, 2, 2, 4, 10);
    let both = FeatureVolume::concat_batch(&[&a, &b]).unwrap();
    let refined = refine(&params, &both).unwrap();
    let ra = refine(&params, &a).unwrap();
    let rb = refine(&params, &b).unwrap();
    assert_eq!(refined.slice_batch(0), ra);
    assert_eq!(refined.slice_batch(1), rb);
}

#[test]
fn mask_rectangle_area_oracle() {
    let mut lm = LandmarkSet::new();
    lm.insert(93, 10.0, 10.0);
    lm.insert(323, 30.0, 10.0);
    lm.insert(152, 20.0, 40.0);
    let mask = build_mask(&lm, (64, 64), &[93, 323, 152], 0.0).unwrap();
    // rows 10..40 inclusive × cols 10..30 inclusive
    assert_eq!(mask.count_ones(), 31 * 21);
    assert!(mask.get(0, 10, 10));
    assert!(mask.get(0, 40, 30));
    assert!(!mask.get(0, 9, 10));
    assert!(!mask.get(0, 10, 31));
}

#[test]
fn mask_degenerate_points_still_non_empty() {
    let mut lm = LandmarkSet::new();
    lm.insert(1, 5.0, 20.0);
    lm.insert(2, 15.0, 20.0);
    lm.insert(3, 25.0, 20.0);
    let mask = build_mask(&lm, (32, 32), &[1, 2, 3], DEFAULT_MARGIN_FRACTION).unwrap();
    assert!(mask.count_ones() > 0);
    // zero-height box expanded by 10% of the 20-pixel diagonal = 2 pixels
    assert!(mask.get(0, 18, 5));
    assert!(mask.get(0, 22, 25));
}

#[test]
fn mask_missing_index_is_an_error() {
    let lm = LandmarkSet::new();
    let err = build_mask(&lm, (8, 8), &DEFAULT_LANDMARK_INDICES, 0.1).unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
    assert!(err.to_string().contains("93"));
}

#[test]
fn etm_loss_zero_cases_and_scalar_oracle() {
    let params = ETMParams::seeded(
        ETMConfig { channels: 1, t_max: 10, n_heads: 1, patch_size: 1, zero_init_output: true },
        11,
    )
    .unwrap();
    let _ = params;
    let mut lm = LandmarkSet::new();
    lm.insert(93, 10.0, 10.0);
    lm.insert(323, 30.0, 10.0);
    lm.insert(152, 20.0, 40.0);
    let mask = build_mask(&lm, (64, 64), &[93, 323, 152], 0.0).unwrap().broadcast(10);

    let gt = random_volume(1, 10, 64, 64, 1, 12);
    assert_eq!(etm_loss(&gt, &gt, &mask).unwrap(), 0.0);

    // differences confined outside the mask contribute nothing
    let mut outside = gt.clone();
    for ti in 0..10 {
        outside.set(0, ti, 0, 0, 0, 99.0);
        outside.set(0, ti, 63, 63, 0, -99.0);
    }
    assert_eq!(etm_loss(&outside, &gt, &mask).unwrap(), 0.0);

    // +1 everywhere: only the 651 masked cells of frames 6..10 count
    let mut plus = gt.clone();
    for v in plus.data_mut() {
        *v += 1.0;
    }
    let loss = etm_loss(&plus, &gt, &mask).unwrap();
    assert!((loss - 5.0 * 651.0).abs() < 1e-6, "loss {loss}");
}

#[test]
fn etm_loss_gradient_is_zero_outside_mask_and_frames() {
    let c = 2;
    let mask = {
        let mut m = RegionMask::empty(10, 3, 3);
        m.add_box(5, 1, 1, 1, 1);
        m.add_box(6, 1, 1, 1, 1);
        m.add_box(7, 1, 1, 1, 1);
        m.add_box(8, 1, 1, 1, 1);
        m.add_box(9, 1, 1, 1, 1);
        // also mark an early frame: it must still not contribute
        m.add_box(0, 0, 2, 0, 2);
        m
    };
    let pred = random_volume(1, 10, 3, 3, c, 13);
    let gt = random_volume(1, 10, 3, 3, c, 14);
    let pv = reshape_temporal(&pred);
    let gv = reshape_temporal(&gt);
    let mm = loss_mask_matrix(&mask, 1, c);

    let mut g = Graph::<f32>::new();
    let p_var = g.param(pv.mat.clone());
    let gt_var = g.leaf(gv.mat.clone());
    let m_var = g.leaf(mm);
    let diff = g.sub(p_var, gt_var);
    let masked = g.mul_elem(diff, m_var);
    let sq = g.square(masked);
    let loss = g.sum(sq);
    g.backward(loss);
    let grad = g.grad_or_zeros(p_var);

    // view rows: location (h,w) block of 10 temporal rows
    for hi in 0..3 {
        for wi in 0..3 {
            for ti in 0..10 {
                let row = (hi * 3 + wi) * 10 + ti;
                let in_loss = LOSS_FRAMES.contains(&ti) && mask.get(ti, hi, wi);
                for ci in 0..c {
                    let gv = grad.get(row, ci);
                    if in_loss {
                        assert!(gv != 0.0, "expected gradient at ({ti},{hi},{wi},{ci})");
                    } else {
                        assert_eq!(gv, 0.0, "leak at ({ti},{hi},{wi},{ci})");
                    }
                }
            }
        }
    }
}

#[test]
fn mask_bitmap_round_trip_and_downsample() {
    let mut lm = LandmarkSet::new();
    lm.insert(93, 3.0, 2.0);
    lm.insert(323, 12.0, 2.0);
    lm.insert(152, 7.0, 13.0);
    let mask = build_mask(&lm, (16, 16), &[93, 323, 152], 0.05).unwrap().broadcast(3);
    let mut buf = Vec::new();
    mask.write(&mut buf).unwrap();
    let back = RegionMask::read(&mut buf.as_slice()).unwrap();
    assert_eq!(back.t, 3);
    for ti in 0..3 {
        for hi in 0..16 {
            for wi in 0..16 {
                assert_eq!(mask.get(ti, hi, wi), back.get(ti, hi, wi));
            }
        }
    }
    let coarse = mask.downsample(4).unwrap();
    assert_eq!((coarse.h, coarse.w), (4, 4));
    for ti in 0..3 {
        for hi in 0..4 {
            for wi in 0..4 {
                let mut any = false;
                for dy in 0..4 {
                    for dx in 0..4 {
                        any |= mask.get(ti, hi * 4 + dy, wi * 4 + dx);
                    }
                }
                assert_eq!(coarse.get(ti, hi, wi), any);
            }
        }
    }
}

#[test]
fn landmark_json_parses() {
    let frame = parse_landmark_frame(r#"{"93": [10.5, 20.0], "323": [30.0, 20.0]}"#).unwrap();
    assert_eq!(frame.get(93), Some((10.5, 20.0)));
    assert_eq!(frame.get(323), Some((30.0, 20.0)));
    assert!(parse_landmark_frame(r#"{"x": [1, 2]}"#).is_err());
}

#[test]
fn refiner_checkpoint_round_trip() {
    let params = small_params();
    let mut buf = Vec::new();
    params.write(&mut buf).unwrap();
    let back = ETMParams::read(&mut buf.as_slice()).unwrap();
    assert_eq!(params, back);
}

#[test]
fn gradients_match_finite_differences() {
    let params = ETMParams::seeded(
        ETMConfig { channels: 4, t_max: 10, n_heads: 2, patch_size: 4, zero_init_output: false },
        15,
    )
    .unwrap();
    let sample = synthetic_sequence(&params, 8, 16).unwrap();
    let report = grad_check_etm(&params, &sample).unwrap();
    assert!(report.passes(1e-4), "max rel err {} at {}", report.max_rel_err, report.worst);
}

#[test]
fn identity_degradation_starts_near_zero_loss() {
    let params = ETMParams::seeded(ETMConfig::default(), 17).unwrap();
    let clean = synthetic_sequence(&params, 16, 18).unwrap();
    let undegraded = EtmSample {
        input: clean.target.clone(),
        target: clean.target.clone(),
        mask: clean.mask.clone(),
    };
    // zero-init refiner is the identity, so the loss is exactly zero
    let loss = mean_refined_loss(&params, &[undegraded]).unwrap();
    assert_eq!(loss, 0.0);
}

#[test]
fn training_reduces_masked_loss_below_quarter_of_initial() {
    let params_cfg = ETMConfig { channels: 8, t_max: 10, n_heads: 2, patch_size: 4, zero_init_output: true };
    let mut params = ETMParams::seeded(params_cfg, 19).unwrap();
    let samples: Vec<EtmSample> =
        (0..48).map(|i| synthetic_sequence(&params, 16, 100 + i as u64).unwrap()).collect();
    let initial = mean_refined_loss(&params, &samples).unwrap();
    let cfg = TrainConfig {
        lr_start: 3e-2,
        lr_end: 1e-3,
        epochs: 60,
        batch_size: 16,
        seed: 20,
        ..TrainConfig::default()
    };
    let report = train_etm(&mut params, &samples, &cfg).unwrap();
    assert_eq!(report.skipped, 0);
    let trained = mean_refined_loss(&params, &samples).unwrap();
    assert!(
        trained < 0.25 * initial,
        "trained {trained} vs initial {initial} (not below 25%)"
    );
}

#[test]
fn malformed_samples_are_skipped() {
    let mut params = ETMParams::seeded(ETMConfig::default(), 21).unwrap();
    let good = synthetic_sequence(&params, 16, 22).unwrap();
    let bad = EtmSample {
        input: random_volume(1, 6, 4, 4, 8, 23), // wrong frame count
        target: random_volume(1, 6, 4, 4, 8, 24),
        mask: RegionMask::empty(6, 4, 4),
    };
    let cfg = TrainConfig { epochs: 1, batch_size: 4, ..TrainConfig::default() };
    let report = train_etm(&mut params, &[good, bad], &cfg).unwrap();
    assert_eq!(report.skipped, 1);
}
