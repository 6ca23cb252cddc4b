use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::AudioEmbedding;
use crate::nn::{Graph, Mat};
use crate::rvq::TokenSequence;

use super::*;

fn tiny_config(mode: HeadMode) -> ARConfig {
    ARConfig {
        head_mode: mode,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        vocab: 5,
        audio_dim: 4,
        tokens_per_chunk: 4,
        rope_base: 10000.0,
    }
}

fn random_embedding(cfg: &ARConfig, chunk_index: usize, rng: &mut ChaCha8Rng) -> AudioEmbedding {
    let vals: Vec<f32> = (0..10 * cfg.audio_dim).map(|_| rng.gen_range(-8.0..2.0)).collect();
    AudioEmbedding::new(vals, cfg.audio_dim, chunk_index).unwrap()
}

fn random_layout(cfg: &ARConfig, chunks: usize, seed: u64) -> SequenceLayout {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let audio: Vec<AudioEmbedding> =
        (0..chunks).map(|c| random_embedding(cfg, c, &mut rng)).collect();
    let tokens: Vec<u16> = (0..chunks * cfg.tokens_per_chunk)
        .map(|_| rng.gen_range(0..cfg.vocab as u16))
        .collect();
    let seq = TokenSequence::new(tokens, cfg.tokens_per_chunk, cfg.vocab).unwrap();
    build_sequence(&audio, &seq, cfg).unwrap()
}

#[test]
fn build_sequence_position_counts() {
    let cfg = ARConfig::default();
    let layout = {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let audio: Vec<AudioEmbedding> =
            (0..1).map(|c| random_embedding(&cfg, c, &mut rng)).collect();
        let tokens: Vec<u16> = (0..32).map(|i| (i % 256) as u16).collect();
        let seq = TokenSequence::new(tokens, 32, 256).unwrap();
        build_sequence(&audio, &seq, &cfg).unwrap()
    };
    // 10 audio + 16 pair positions per chunk
    assert_eq!(layout.position_count(&cfg), 26);

    let empty = build_sequence(&[], &TokenSequence::new(vec![], 32, 256).unwrap(), &cfg).unwrap();
    assert_eq!(empty.position_count(&cfg), 0);

    let five = {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let audio: Vec<AudioEmbedding> =
            (0..5).map(|c| random_embedding(&cfg, c, &mut rng)).collect();
        let tokens: Vec<u16> = (0..5 * 32).map(|i| (i % 256) as u16).collect();
        let seq = TokenSequence::new(tokens, 32, 256).unwrap();
        build_sequence(&audio, &seq, &cfg).unwrap()
    };
    assert_eq!(five.position_count(&cfg), 130);
}

#[test]
fn build_sequence_rejects_mismatches() {
    let cfg = ARConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let audio = vec![random_embedding(&cfg, 0, &mut rng)];
    // two windows of tokens for one audio chunk
    let seq = TokenSequence::new(vec![0u16; 64], 32, 256).unwrap();
    assert!(build_sequence(&audio, &seq, &cfg).is_err());
}

#[test]
fn pairing_follows_token_order() {
    let cfg = tiny_config(HeadMode::Dual);
    let layout = random_layout(&cfg, 2, 4);
    let pairs = layout.pairs();
    assert_eq!(pairs.len(), 4); // 2 chunks × 2 pairs
    assert_eq!(pairs[0].first, layout.tokens[0]);
    assert_eq!(pairs[0].second, layout.tokens[1]);
    assert_eq!(pairs[1].first, layout.tokens[2]);
}

#[test]
fn zeroed_heads_give_uniform_logits() {
    let mut params = ARParams::seeded(tiny_config(HeadMode::Dual), 5).unwrap();
    params.head0_w.scale_assign(0.0);
    params.head0_b.scale_assign(0.0);
    if let Some(w) = params.head1_w.as_mut() {
        w.scale_assign(0.0);
    }
    let layout = random_layout(&params.config, 1, 6);
    let logits = forward(&params, &layout).unwrap();
    assert!(logits.head0.data().iter().all(|&v| v == 0.0));
    assert!(logits.head1.unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_emits_one_logit_row_per_pair_position() {
    let params = ARParams::seeded(tiny_config(HeadMode::Dual), 7).unwrap();
    let layout = random_layout(&params.config, 3, 8);
    let logits = forward(&params, &layout).unwrap();
    assert_eq!(logits.head0.rows(), 6); // 3 chunks × 2 pairs
    assert_eq!(logits.head0.cols(), 5);
    assert!(logits.head1.is_some());
}

/// Independent dense recomputation of the whole forward pass for one tiny
/// layout, using only plain loops (no graph, no shared kernels).
#[test]
fn forward_matches_dense_recomputation() {
    let cfg = ARConfig {
        head_mode: HeadMode::Dual,
        d_model: 4,
        n_layers: 1,
        n_heads: 1,
        vocab: 4,
        audio_dim: 3,
        tokens_per_chunk: 4,
        rope_base: 10000.0,
    };
    let params = ARParams::seeded(cfg.clone(), 9).unwrap();
    let layout = random_layout(&cfg, 1, 10);
    let got = forward(&params, &layout).unwrap();

    let d = cfg.d_model;
    // input rows
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for fr in 0..10 {
        let raw: Vec<f64> = layout.audio[0].row(fr).iter().map(|&v| v as f64).collect();
        let ms: f64 = raw.iter().map(|v| v * v).sum::<f64>() / raw.len() as f64;
        let r = 1.0 / (ms + 1e-6).sqrt();
        let normed: Vec<f64> = raw
            .iter()
            .zip(params.audio_norm.row(0))
            .map(|(&v, &g)| v * r * g as f64)
            .collect();
        let mut row = vec![0.0f64; d];
        for (j, rv) in row.iter_mut().enumerate() {
            let mut acc = params.audio_b.get(0, j) as f64;
            for (i, &nv) in normed.iter().enumerate() {
                acc += nv * params.audio_w.get(i, j) as f64;
            }
            *rv = acc;
        }
        rows.push(row);
    }
    for p in layout.pairs() {
        let bias = params.pair_bias.as_ref().unwrap();
        let mut cat = Vec::new();
        for (slot, tok) in [(0usize, p.first), (1, p.second)] {
            for j in 0..d {
                cat.push(params.token_emb.get(tok as usize, j) as f64 + bias.get(slot, j) as f64);
            }
        }
        let pw = params.pair_w.as_ref().unwrap();
        let pb = params.pair_b.as_ref().unwrap();
        let mut row = vec![0.0f64; d];
        for (j, rv) in row.iter_mut().enumerate() {
            let mut acc = pb.get(0, j) as f64;
            for (i, &cv) in cat.iter().enumerate() {
                acc += cv * pw.get(i, j) as f64;
            }
            *rv = acc;
        }
        rows.push(row);
    }

    let rms = |x: &[f64], gain: &Mat<f32>| -> Vec<f64> {
        let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let r = 1.0 / (ms + 1e-6).sqrt();
        x.iter().zip(gain.row(0)).map(|(&v, &g)| v * r * g as f64).collect()
    };
    let matv = |x: &[f64], w: &Mat<f32>| -> Vec<f64> {
        let mut out = vec![0.0f64; w.cols()];
        for (j, o) in out.iter_mut().enumerate() {
            for (i, &xv) in x.iter().enumerate() {
                *o += xv * w.get(i, j) as f64;
            }
        }
        out
    };
    let rot = |v: &mut [f64], pos: usize| {
        let half = v.len() / 2;
        for i in 0..half {
            let freq = 1.0 / cfg.rope_base.powf(2.0 * i as f64 / v.len() as f64);
            let ang = pos as f64 * freq;
            let (s, c) = (ang.sin(), ang.cos());
            let (a, b) = (v[i], v[i + half]);
            v[i] = a * c - b * s;
            v[i + half] = a * s + b * c;
        }
    };

    let block = &params.blocks[0];
    let s = rows.len();
    // q,k,v for all positions (single head, dh = d)
    let mut qs = Vec::new();
    let mut ks = Vec::new();
    let mut vs = Vec::new();
    for (pos, row) in rows.iter().enumerate() {
        let a_in = rms(row, &block.norm1);
        let mut q = matv(&a_in, &block.wq);
        let mut k = matv(&a_in, &block.wk);
        rot(&mut q, pos);
        rot(&mut k, pos);
        qs.push(q);
        ks.push(k);
        vs.push(matv(&a_in, &block.wv));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut hs: Vec<Vec<f64>> = Vec::new();
    for i in 0..s {
        let mut scores: Vec<f64> = (0..=i)
            .map(|j| qs[i].iter().zip(ks[j].iter()).map(|(&a, &b)| a * b).sum::<f64>() * scale)
            .collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = scores.iter().map(|&v| (v - mx).exp()).sum();
        for v in scores.iter_mut() {
            *v = (*v - mx).exp() / denom;
        }
        let mut attn = vec![0.0f64; d];
        for (j, &w) in scores.iter().enumerate() {
            for (a, &x) in attn.iter_mut().zip(vs[j].iter()) {
                *a += w * x;
            }
        }
        let o = matv(&attn, &block.wo);
        let mut h: Vec<f64> = rows[i].iter().zip(o.iter()).map(|(&a, &b)| a + b).collect();
        let f_in = rms(&h, &block.norm2);
        let mut f1 = matv(&f_in, &block.ffn_w1);
        for (x, &b) in f1.iter_mut().zip(block.ffn_b1.row(0)) {
            *x += b as f64;
            let sg = 1.0 / (1.0 + (-*x).exp());
            *x *= sg;
        }
        let mut f2 = matv(&f1, &block.ffn_w2);
        for (x, &b) in f2.iter_mut().zip(block.ffn_b2.row(0)) {
            *x += b as f64;
        }
        for (hx, &fx) in h.iter_mut().zip(f2.iter()) {
            *hx += fx;
        }
        hs.push(h);
    }
    // predictors: positions 9 and 10 (chunk base 0, pairs at 10, 11)
    for (out_row, pos) in [(0usize, 9usize), (1, 10)] {
        let y = rms(&hs[pos], &params.final_norm);
        for j in 0..cfg.vocab {
            let mut acc = params.head0_b.get(0, j) as f64;
            for (i, &yv) in y.iter().enumerate() {
                acc += yv * params.head0_w.get(i, j) as f64;
            }
            let want = got.head0.get(out_row, j) as f64;
            assert!(
                (acc - want).abs() < 1e-4,
                "row {out_row} col {j}: dense {acc} vs graph {want}"
            );
        }
    }
}

#[test]
fn uniform_logits_loss_is_ln_k_per_head() {
    let k = 4usize;
    let n = 3usize;
    let logits = PairLogits {
        head0: Mat::zeros(n, k),
        head1: Some(Mat::zeros(n, k)),
    };
    let labels: Vec<TokenPair> =
        (0..n).map(|i| TokenPair { first: (i % k) as u16, second: 0 }).collect();
    let loss = ar_loss(&logits, &labels).unwrap();
    let ln4 = (k as f64).ln();
    assert!((loss.head0 - n as f64 * ln4).abs() < 1e-9);
    assert!((loss.head1 - n as f64 * ln4).abs() < 1e-9);
    assert!(loss.regularizer.abs() < 1e-12);
    assert!((loss.total - n as f64 * 2.0 * ln4).abs() < 1e-9);
}

#[test]
fn scalar_loss_arithmetic_one_position() {
    // head0 CE = 1.0, head1 CE = 0.5 → total = 1.0 + 0.5 + 0.25
    // construct two-way logits with the desired cross-entropies
    let ce_to_logit = |ce: f64| {
        // two classes, label 0: ce = ln(1 + e^{-x}) where x = l0 - l1
        let x = (ce.exp() - 1.0).recip().ln();
        Mat::from_vec(1, 2, vec![x as f32, 0.0])
    };
    let logits = PairLogits {
        head0: ce_to_logit(1.0),
        head1: Some(ce_to_logit(0.5)),
    };
    let labels = vec![TokenPair { first: 0, second: 0 }];
    let loss = ar_loss(&logits, &labels).unwrap();
    assert!((loss.head0 - 1.0).abs() < 1e-5, "{}", loss.head0);
    assert!((loss.head1 - 0.5).abs() < 1e-5);
    assert!((loss.regularizer - 0.25).abs() < 1e-4);
    assert!((loss.total - 1.75).abs() < 1e-4);
}

#[test]
fn loss_graph_matches_value_loss_and_regularizer_is_loss_gap_squared() {
    let params = ARParams::seeded(tiny_config(HeadMode::Dual), 11).unwrap();
    let layout = random_layout(&params.config, 2, 12);
    let logits = forward(&params, &layout).unwrap();
    let value_loss = ar_loss(&logits, &layout.pairs()).unwrap();

    let mut g = Graph::<f32>::new();
    let pv = insert_params(&mut g, &params, false);
    let (total, s0, s1, reg) = loss_graph(&mut g, &pv, &params.config, &[&layout], true).unwrap();
    assert!((g.scalar(total) as f64 - value_loss.total).abs() < 1e-3);
    assert!((g.scalar(s0) as f64 - value_loss.head0).abs() < 1e-3);
    assert!((g.scalar(s1.unwrap()) as f64 - value_loss.head1).abs() < 1e-3);
    assert!((g.scalar(reg.unwrap()) as f64 - value_loss.regularizer).abs() < 1e-3);

    // without the regularizer the objective is the Σ CE over all 32 tokens,
    // the same accounting as unrolled single-token scoring
    let mut g2 = Graph::<f32>::new();
    let pv2 = insert_params(&mut g2, &params, false);
    let (plain, _, _, _) = loss_graph(&mut g2, &pv2, &params.config, &[&layout], false).unwrap();
    assert!(
        (g2.scalar(plain) as f64 - (value_loss.head0 + value_loss.head1)).abs() < 1e-3
    );
}

#[test]
fn causality_perturbing_position_p_only_affects_later_logits() {
    let params = ARParams::seeded(tiny_config(HeadMode::Dual), 13).unwrap();
    let cfg = &params.config;
    let base = random_layout(cfg, 2, 14);
    let logits_base = forward(&params, &base).unwrap();

    // perturb the second chunk's first pair token: sequence position 22
    // (chunk 1 base 12 + 10 audio); predictors at positions ≥ 22 are pair
    // index ≥ 3 of the flattened pair list
    let mut changed = base.clone();
    changed.tokens[cfg.tokens_per_chunk] = (changed.tokens[cfg.tokens_per_chunk] + 1) % cfg.vocab as u16;
    let logits_changed = forward(&params, &changed).unwrap();

    // pairs 0..2 predicted from positions 9, 10, 21 — all before 22
    for j in 0..3 {
        assert_eq!(logits_base.head0.row(j), logits_changed.head0.row(j), "pair {j}");
    }
    // pair 3 is predicted from position 22 itself (its own input changed)
    assert_ne!(logits_base.head0.row(3), logits_changed.head0.row(3));
}

#[test]
fn incremental_decode_matches_full_forward_bitwise() {
    let params = ARParams::seeded(tiny_config(HeadMode::Dual), 15).unwrap();
    let cfg = &params.config;
    let layout = random_layout(cfg, 3, 16);
    let full = forward(&params, &layout).unwrap();

    // teacher-forced incremental replay
    let mut state = DecodeState::new(&params, SamplerConfig::default());
    let pairs = layout.pairs();
    let ppc = cfg.pairs_per_chunk();
    let mut pred = 0usize;
    for (c, emb) in layout.audio.iter().enumerate() {
        let mut last = vec![0.0; cfg.d_model];
        for fr in 0..10 {
            last = state.step(&params, &audio_input_row(&params, emb, fr));
        }
        for j in 0..ppc {
            let (l0, l1) = head_logits(&params, &last);
            for (a, b) in l0.iter().zip(full.head0.row(pred)) {
                assert_eq!(a.to_bits(), b.to_bits(), "head0 pred {pred}");
            }
            for (a, b) in l1.unwrap().iter().zip(full.head1.as_ref().unwrap().row(pred)) {
                assert_eq!(a.to_bits(), b.to_bits(), "head1 pred {pred}");
            }
            let p = pairs[c * ppc + j];
            last = state.step(&params, &pair_input_row(&params, p.first, p.second));
            pred += 1;
        }
    }
}

#[test]
fn greedy_decode_incremental_equals_full_reforward() {
    let params = ARParams::seeded(tiny_config(HeadMode::Dual), 17).unwrap();
    let cfg = &params.config;
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let audio: Vec<AudioEmbedding> = (0..3).map(|c| random_embedding(cfg, c, &mut rng)).collect();

    // cached path
    let sampler = SamplerConfig { k: 1, temperature: 1.0, seed: 4 };
    let mut state = DecodeState::new(&params, sampler);
    let mut cached_tokens = Vec::new();
    for emb in &audio {
        cached_tokens.extend(decode_chunk(&params, &mut state, emb).unwrap());
    }

    // uncached path: re-forward the whole prefix at every step
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut uncached_tokens: Vec<u16> = Vec::new();
    let mut rng2 = ChaCha8Rng::seed_from_u64(4);
    for emb in &audio {
        for fr in 0..10 {
            rows.push(audio_input_row(&params, emb, fr));
        }
        for _ in 0..cfg.pairs_per_chunk() {
            let hidden = full_hidden(&params, &rows);
            let (l0, l1) = head_logits(&params, &hidden);
            let (t0, _) = sample_top_k(&l0, 1, 1.0, &mut rng2);
            let (t1, _) = sample_top_k(&l1.unwrap(), 1, 1.0, &mut rng2);
            uncached_tokens.push(t0);
            uncached_tokens.push(t1);
            rows.push(pair_input_row(&params, t0, t1));
        }
    }
    assert_eq!(cached_tokens, uncached_tokens);
    assert_eq!(cached_tokens.len(), 3 * cfg.tokens_per_chunk);
}

/// Final-block hidden state of the last row via the graph forward.
fn full_hidden(params: &ARParams, rows: &[Vec<f32>]) -> Vec<f32> {
    let d = params.config.d_model;
    let mut x = Mat::zeros(rows.len(), d);
    for (i, r) in rows.iter().enumerate() {
        x.row_mut(i).copy_from_slice(r);
    }
    let mut g = Graph::<f32>::new();
    let pv = insert_params(&mut g, params, false);
    let x_var = g.leaf(x);
    // final norm is applied by head_logits, so stop before it
    let cfg = &params.config;
    let attn_cfg = crate::nn::AttnCfg {
        heads: cfg.n_heads,
        blocks: 1,
        causal: true,
        rope: Some(crate::nn::Rope { base: cfg.rope_base, offset: 0 }),
    };
    let mut h = x_var;
    for l in 0..cfg.n_layers {
        let b = pv.block(l);
        let a_in = g.rms_norm(h, b[0]);
        let q = g.matmul(a_in, b[1]);
        let k = g.matmul(a_in, b[2]);
        let v = g.matmul(a_in, b[3]);
        let attn = g.attention(q, k, v, attn_cfg);
        let attn = g.matmul(attn, b[4]);
        h = g.add(h, attn);
        let f_in = g.rms_norm(h, b[5]);
        let f1 = g.matmul(f_in, b[6]);
        let f1 = g.add_row_broadcast(f1, b[7]);
        let f1 = g.silu(f1);
        let f2 = g.matmul(f1, b[8]);
        let f2 = g.add_row_broadcast(f2, b[9]);
        h = g.add(h, f2);
    }
    g.value(h).row(rows.len() - 1).to_vec()
}

#[test]
fn topk_samples_stay_in_topk_set_and_seeds_diverge() {
    let params = ARParams::seeded(tiny_config(HeadMode::Dual), 19).unwrap();
    let cfg = &params.config;
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let audio: Vec<AudioEmbedding> = (0..2).map(|c| random_embedding(cfg, c, &mut rng)).collect();

    let run = |seed: u64| {
        let mut state = DecodeState::new(&params, SamplerConfig { k: 3, temperature: 1.0, seed });
        let mut toks = Vec::new();
        for emb in &audio {
            toks.extend(decode_chunk(&params, &mut state, emb).unwrap());
        }
        (toks, state.events)
    };
    let (a, events_a) = run(1);
    let (b, _) = run(2);
    assert_ne!(a, b, "different seeds should explore different tokens");
    // every sampled token ranked within the top-k of its head
    for e in &events_a {
        assert!(e.logit_rank < 3, "rank {} outside top-k", e.logit_rank);
    }
    // same seed twice is identical
    let (a2, _) = run(1);
    assert_eq!(a, a2);
}

#[test]
fn greedy_all_equal_logits_picks_token_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let logits = vec![0.25f32; 7];
    let (t, rank) = sample_top_k(&logits, 1, 1.0, &mut rng);
    assert_eq!(t, 0);
    assert_eq!(rank, 0);
}

#[test]
fn single_head_mode_decodes_and_scores() {
    let params = ARParams::seeded(tiny_config(HeadMode::Single), 22).unwrap();
    let cfg = &params.config;
    let layout = random_layout(cfg, 2, 23);
    // 10 audio + 4 token positions per chunk
    assert_eq!(layout.position_count(cfg), 28);
    let logits = forward(&params, &layout).unwrap();
    assert_eq!(logits.head0.rows(), 8);
    assert!(logits.head1.is_none());

    let mut state = DecodeState::new(&params, SamplerConfig { k: 1, temperature: 1.0, seed: 0 });
    let toks = decode_chunk(&params, &mut state, &layout.audio[0]).unwrap();
    assert_eq!(toks.len(), cfg.tokens_per_chunk);
}

#[test]
fn checkpoint_round_trip_both_modes() {
    for mode in [HeadMode::Dual, HeadMode::Single] {
        let params = ARParams::seeded(tiny_config(mode), 24).unwrap();
        let mut buf = Vec::new();
        params.write(&mut buf).unwrap();
        let back = ARParams::read(&mut buf.as_slice()).unwrap();
        assert_eq!(params, back);
    }
}

#[test]
fn gradients_match_finite_differences() {
    let cfg = ARConfig {
        head_mode: HeadMode::Dual,
        d_model: 6,
        n_layers: 1,
        n_heads: 1,
        vocab: 4,
        audio_dim: 3,
        tokens_per_chunk: 4,
        rope_base: 10000.0,
    };
    let params = ARParams::seeded(cfg.clone(), 25).unwrap();
    let layout = random_layout(&cfg, 1, 26);
    let report = grad_check_ar(&params, &layout).unwrap();
    assert!(report.passes(1e-4), "max rel err {} at {}", report.max_rel_err, report.worst);
}

#[test]
fn regularizer_changes_gradients() {
    let cfg = tiny_config(HeadMode::Dual);
    let params = ARParams::seeded(cfg.clone(), 27).unwrap();
    let layout = random_layout(&cfg, 1, 28);
    let grads_with = {
        let mut g = Graph::<f32>::new();
        let pv = insert_params(&mut g, &params, true);
        let (total, _, _, _) = loss_graph(&mut g, &pv, &cfg, &[&layout], true).unwrap();
        g.backward(total);
        g.grad_or_zeros(pv.all[0])
    };
    let grads_without = {
        let mut g = Graph::<f32>::new();
        let pv = insert_params(&mut g, &params, true);
        let (total, _, _, _) = loss_graph(&mut g, &pv, &cfg, &[&layout], false).unwrap();
        g.backward(total);
        g.grad_or_zeros(pv.all[0])
    };
    assert_ne!(grads_with, grads_without);
}

#[test]
fn near_one_hot_logits_give_near_zero_loss_and_gradients() {
    let cfg = ARConfig {
        head_mode: HeadMode::Dual,
        d_model: 6,
        n_layers: 1,
        n_heads: 1,
        vocab: 4,
        audio_dim: 3,
        tokens_per_chunk: 4,
        rope_base: 10000.0,
    };
    let mut params = ARParams::seeded(cfg.clone(), 29).unwrap();
    // all-zero labels with a huge head bias on class 0
    params.head0_w.scale_assign(0.0);
    params.head0_b = Mat::from_vec(1, 4, vec![30.0, 0.0, 0.0, 0.0]);
    if let Some(w) = params.head1_w.as_mut() {
        w.scale_assign(0.0);
    }
    params.head1_b = Some(Mat::from_vec(1, 4, vec![30.0, 0.0, 0.0, 0.0]));
    let mut layout = random_layout(&cfg, 1, 30);
    layout.tokens.iter_mut().for_each(|t| *t = 0);

    let mut g = Graph::<f32>::new();
    let pv = insert_params(&mut g, &params, true);
    let (total, _, _, _) = loss_graph(&mut g, &pv, &cfg, &[&layout], true).unwrap();
    assert!(g.scalar(total) < 1e-8, "loss {}", g.scalar(total));
    g.backward(total);
    for &v in &pv.all {
        let gmax = g.grad_or_zeros(v).data().iter().fold(0.0f32, |m, &x| m.max(x.abs()));
        assert!(gmax < 1e-8, "gradient {gmax}");
    }
}

#[test]
fn batched_loss_equals_sum_of_per_clip_losses() {
    let cfg = tiny_config(HeadMode::Dual);
    let params = ARParams::seeded(cfg.clone(), 31).unwrap();
    let a = random_layout(&cfg, 2, 32);
    let b = random_layout(&cfg, 2, 33);
    let single = |l: &SequenceLayout| {
        let mut g = Graph::<f32>::new();
        let pv = insert_params(&mut g, &params, false);
        let (total, _, _, _) = loss_graph(&mut g, &pv, &cfg, &[l], true).unwrap();
        g.scalar(total) as f64
    };
    let mut g = Graph::<f32>::new();
    let pv = insert_params(&mut g, &params, false);
    let (total, _, _, _) = loss_graph(&mut g, &pv, &cfg, &[&a, &b], true).unwrap();
    let batched = g.scalar(total) as f64;
    assert!((batched - (single(&a) + single(&b))).abs() < 1e-3);
}
