use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gridvqa::Sample;
use crate::numcore::{softmax_in_place, Tape};
use crate::selfcheck::{micro_config, micro_samples};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn layer_norm(x: &[f64], g: &Tensor, b: &Tensor, eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - m) / (var + eps).sqrt() * g.data()[i] + b.data()[i])
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Brute-force single-head, single-layer question decoder: returns the
/// `[CLS]` row of the cross-attention.
fn reference_alpha(params: &ModelParams, query: &[u32], grid: &FeatureGrid) -> Vec<f64> {
    let cfg = params.config();
    let d = cfg.d_model;
    let p = |n: &str| params.get(n).unwrap();
    let lin = |n: &str| params.linear(n).unwrap();
    let eps = cfg.ln_eps;

    let mut x: Vec<Vec<f64>> = Vec::new();
    for (pos, tok) in std::iter::once(None).chain(query.iter().map(Some)).enumerate() {
        let emb = match tok {
            None => p("dec_q.cls").row(0).to_vec(),
            Some(&t) => p("lang.tok_emb").row(t as usize).to_vec(),
        };
        let pe = p("dec_q.pos_emb").row(pos);
        x.push(emb.iter().zip(pe).map(|(a, b)| a + b).collect());
    }

    // Self-attention over the query tokens.
    let h: Vec<Vec<f64>> = x
        .iter()
        .map(|r| layer_norm(r, p("dec_q.layer0.ln1.g"), p("dec_q.layer0.ln1.b"), eps))
        .collect();
    let (wq, wk, wv, wo) = (
        lin("dec_q.layer0.self.q"),
        lin("dec_q.layer0.self.k"),
        lin("dec_q.layer0.self.v"),
        lin("dec_q.layer0.self.o"),
    );
    let keys: Vec<Vec<f64>> = h.iter().map(|r| wk.apply(r)).collect();
    let vals: Vec<Vec<f64>> = h.iter().map(|r| wv.apply(r)).collect();
    let q0 = wq.apply(&h[0]);
    let mut s: Vec<f64> = keys.iter().map(|k| dot(&q0, k) / (d as f64).sqrt()).collect();
    softmax_in_place(&mut s);
    let mixed: Vec<f64> = (0..d).map(|c| (0..vals.len()).map(|j| s[j] * vals[j][c]).sum()).collect();
    let attn = wo.apply(&mixed);
    let cls: Vec<f64> = x[0].iter().zip(&attn).map(|(a, b)| a + b).collect();

    // Cross-attention of the [CLS] row onto the image tokens.
    let hc = layer_norm(&cls, p("dec_q.layer0.ln2.g"), p("dec_q.layer0.ln2.b"), eps);
    let q = lin("dec_q.layer0.cross.q").apply(&hc);
    let in_proj = lin("dec_q.in_proj");
    let ck = lin("dec_q.layer0.cross.k");
    let geo = p("geo.emb");
    let mut scores = Vec::new();
    for r in 0..grid.h() {
        for c in 0..grid.w() {
            let cell = r * grid.w() + c;
            let m: Vec<f64> = in_proj
                .apply(grid.cell(r, c))
                .iter()
                .zip(geo.row(cell))
                .map(|(a, b)| a + b)
                .collect();
            let m = layer_norm(&m, p("dec_q.mem_ln.g"), p("dec_q.mem_ln.b"), eps);
            scores.push(dot(&q, &ck.apply(&m)) / (d as f64).sqrt());
        }
    }
    softmax_in_place(&mut scores);
    scores
}

/// Micro parameters with weights large enough that attention is far from
/// uniform.
fn spicy_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        init_std: 0.5,
        ..cfg.clone()
    };
    ModelParams::init(&cfg, seed).unwrap()
}

#[test]
fn single_head_decoder_matches_brute_force_oracle() {
    for (h, w) in [(2, 2), (3, 3), (2, 3)] {
        let cfg = ModelConfig {
            n_heads: 1,
            n_dec_layers: 1,
            ..micro_config(h, w)
        };
        for seed in 0..5 {
            let params = spicy_params(&cfg, seed);
            let s = &micro_samples(&cfg, 1, seed + 100)[0];
            let (alpha, seq) = cross_attention_decode(&s.question, &s.grid, &params, DecoderKind::Question).unwrap();
            assert_eq!(seq.shape(), [s.question.len() + 1, cfg.d_model]);
            let want = reference_alpha(&params, &s.question, &s.grid);
            for (got, want) in alpha.weights().data().iter().zip(&want) {
                assert!((got - want).abs() <= 1e-9, "{h}×{w} seed {seed}: {got} vs {want}");
            }
            let spread = want.iter().cloned().fold(0.0, f64::max) - want.iter().cloned().fold(1.0, f64::min);
            assert!(spread > 1e-3, "oracle case is degenerate");
        }
    }
}

#[test]
fn batched_decoder_agrees_with_single_sample_decode() {
    let cfg = micro_config(3, 3);
    let params = spicy_params(&cfg, 2);
    let samples = micro_samples(&cfg, 5, 8);
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut tape = Tape::new();
    let mut b = Binder::frozen(&params);
    let fwd = forward_batch(&mut tape, &mut b, &refs, Mode::Train).unwrap();
    for (i, s) in samples.iter().enumerate() {
        let out = fwd.output(&tape, i, &cfg).unwrap();
        let (aq, _) = cross_attention_decode(&s.question, &s.grid, &params, DecoderKind::Question).unwrap();
        let (ar, _) =
            cross_attention_decode(s.rationale.as_ref().unwrap(), &s.grid, &params, DecoderKind::Reasoning).unwrap();
        assert!(out.alpha_q.weights().max_abs_diff(aq.weights()) < 1e-12);
        assert!(out.reasoning.unwrap().alpha_r.weights().max_abs_diff(ar.weights()) < 1e-12);
        let single = forward(s, &params, Mode::Train).unwrap();
        assert!(single.y_q.max_abs_diff(&out.y_q) < 1e-12);
    }
}

#[test]
fn attention_maps_are_distributions() {
    let cfg = micro_config(3, 2);
    for seed in 0..20 {
        let params = spicy_params(&cfg, seed);
        for s in micro_samples(&cfg, 3, seed) {
            let out = forward(&s, &params, Mode::Train).unwrap();
            let r = out.reasoning.unwrap();
            for a in [&out.alpha_q, &r.alpha_r] {
                assert!((a.weights().sum() - 1.0).abs() <= 1e-6);
                assert!(a.weights().data().iter().all(|&x| x >= 0.0));
            }
            for y in [&out.y_q, &r.y_r] {
                assert!((y.sum() - 1.0).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn without_geometry_attention_is_permutation_equivariant() {
    let cfg = micro_config(3, 3);
    let mut params = spicy_params(&cfg, 4);
    params.get_mut("geo.emb").unwrap().data_mut().fill(0.0);
    let s = &micro_samples(&cfg, 1, 9)[0];
    let cells = cfg.cells();
    let mut perm: Vec<usize> = (0..cells).collect();
    perm.reverse();
    perm.swap(0, 4);
    let mut permuted = FeatureGrid::zeros(3, 3, cfg.d_visual);
    for (dst, &src) in perm.iter().enumerate() {
        permuted
            .cell_mut(dst / 3, dst % 3)
            .copy_from_slice(s.grid.cell(src / 3, src % 3));
    }
    for kind in [DecoderKind::Question, DecoderKind::Reasoning] {
        let (a, _) = cross_attention_decode(&s.question, &s.grid, &params, kind).unwrap();
        let (b, _) = cross_attention_decode(&s.question, &permuted, &params, kind).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            let (x, y) = (b.weights().data()[dst], a.weights().data()[src]);
            assert!((x - y).abs() < 1e-12, "cell {dst}: {x} vs {y}");
        }
    }
}

#[test]
fn permuting_candidates_permutes_answer_distribution() {
    let cfg = micro_config(2, 2);
    let params = spicy_params(&cfg, 6);
    let s = micro_samples(&cfg, 1, 1).remove(0);
    let base = forward(&s, &params, Mode::Test).unwrap();
    let perm = [2usize, 0, 3, 1];
    let mut p = s.clone();
    p.candidates = perm.iter().map(|&i| s.candidates[i].clone()).collect();
    let out = forward(&p, &params, Mode::Test).unwrap();
    for (k, &i) in perm.iter().enumerate() {
        // Per-candidate encodings and logits are bit-exact; the softmax
        // denominator is summed in candidate order, so allow one ulp.
        assert_eq!(out.x_cls.row(k), base.x_cls.row(i));
        let (a, b) = (out.y_q.data()[k], base.y_q.data()[i]);
        assert!((a - b).abs() <= 1e-15, "{a} vs {b}");
    }
}

#[test]
fn test_mode_answer_is_bit_identical_to_train_mode() {
    let cfg = micro_config(2, 3);
    for seed in 0..5 {
        let params = spicy_params(&cfg, seed);
        for s in micro_samples(&cfg, 4, seed) {
            let test = forward(&s, &params, Mode::Test).unwrap();
            let train = forward(&s, &params, Mode::Train).unwrap();
            assert!(test.reasoning.is_none());
            assert!(train.reasoning.is_some());
            assert_eq!(test.y_q.data(), train.y_q.data());
            assert_eq!(test.alpha_q, train.alpha_q);
        }
    }
}

#[test]
fn train_mode_needs_a_rationale() {
    let cfg = micro_config(2, 2);
    let params = ModelParams::init(&cfg, 0).unwrap();
    let mut s = micro_samples(&cfg, 1, 0).remove(0);
    s.rationale = None;
    assert!(matches!(forward(&s, &params, Mode::Train), Err(Error::Input(_))));
    assert!(forward(&s, &params, Mode::Test).is_ok());
}

#[test]
fn zero_parameters_give_zero_language_vector() {
    let cfg = micro_config(2, 2);
    let mut params = ModelParams::init(&cfg, 0).unwrap();
    params.zero_all();
    let x = encode_language(&[5, 6, 7], &[8], &params).unwrap();
    assert_eq!(x.shape(), [cfg.d_model]);
    assert!(x.data().iter().all(|&v| v == 0.0));
}

#[test]
fn language_vector_shape_and_length_limit() {
    let cfg = micro_config(2, 2);
    let params = spicy_params(&cfg, 1);
    // Total length is q + a + 3 special tokens.
    for q in 1..=cfg.max_seq_len - 4 {
        let x = encode_language(&vec![5; q], &[9], &params).unwrap();
        assert_eq!(x.shape(), [cfg.d_model]);
    }
    let too_long = vec![5; cfg.max_seq_len - 3];
    assert!(matches!(encode_language(&too_long, &[9], &params), Err(Error::Input(_))));
    assert!(matches!(
        encode_language(&[cfg.vocab_size as u32], &[9], &params),
        Err(Error::Input(_))
    ));
}

#[test]
fn different_candidates_give_different_language_vectors() {
    let cfg = micro_config(2, 2);
    let params = spicy_params(&cfg, 1);
    let a = encode_language(&[5, 6], &[20], &params).unwrap();
    let b = encode_language(&[5, 6], &[21], &params).unwrap();
    assert!(a.max_abs_diff(&b) > 0.0);
}

#[test]
fn grid_mismatch_is_a_dimension_error() {
    let cfg = micro_config(2, 2);
    let params = ModelParams::init(&cfg, 0).unwrap();
    let grid = FeatureGrid::zeros(3, 2, cfg.d_visual);
    assert!(matches!(
        cross_attention_decode(&[5], &grid, &params, DecoderKind::Question),
        Err(Error::Dimension(_))
    ));
}

fn random_grid(h: usize, w: usize, d: usize, r: &mut ChaCha8Rng) -> FeatureGrid {
    FeatureGrid::new(Tensor::randn(&[h, w, d], 1.0, r)).unwrap()
}

fn random_linear(din: usize, dout: usize, r: &mut ChaCha8Rng) -> Linear {
    Linear {
        weight: Tensor::randn(&[din, dout], 1.0, r),
        bias: Tensor::randn(&[dout], 1.0, r),
    }
}

#[test]
fn attended_representation_examples() {
    let mut r = rng(3);
    let grid = random_grid(3, 3, 5, &mut r);
    let proj = random_linear(5, 4, &mut r);

    let hot = AttentionMap::one_hot(3, 3, 1, 2);
    let v = attended_representation(&hot, &grid, &proj).unwrap();
    let want = proj.apply(grid.cell(1, 2));
    assert!(v.max_abs_diff(&Tensor::vector(&want)) < 1e-12);

    let mut same = FeatureGrid::zeros(3, 3, 5);
    for i in 0..9 {
        same.cell_mut(i / 3, i % 3).copy_from_slice(grid.cell(0, 0));
    }
    let mut raw: Vec<f64> = (0..9).map(|_| r.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter_mut().for_each(|x| *x /= total);
    let alpha = AttentionMap::new(Tensor::new(vec![3, 3], raw.clone()).unwrap()).unwrap();
    let v = attended_representation(&alpha, &same, &proj).unwrap();
    assert!(v.max_abs_diff(&Tensor::vector(&proj.apply(grid.cell(0, 0)))) < 1e-12);

    let v = attended_representation(&alpha, &grid, &proj).unwrap();
    let mut pooled = vec![0.0; 5];
    for i in 0..3 {
        for j in 0..3 {
            for (c, p) in pooled.iter_mut().enumerate() {
                *p += alpha.at(i, j) * grid.cell(i, j)[c];
            }
        }
    }
    assert!(v.max_abs_diff(&Tensor::vector(&proj.apply(&pooled))) < 1e-12);
}

#[test]
fn fuse_and_score_examples() {
    let mut r = rng(5);
    let head = random_linear(4, 1, &mut r);
    let v = Tensor::randn(&[4], 1.0, &mut r);
    let zero = fuse_and_score(&Tensor::zeros(&[4]), &v, &head).unwrap();
    assert_eq!(zero, head.bias.data()[0]);

    let x = Tensor::randn(&[4], 1.0, &mut r);
    let ones = fuse_and_score(&x, &Tensor::ones(&[4]), &head).unwrap();
    assert!((ones - head.apply(x.data())[0]).abs() < 1e-12);

    let x = Tensor::vector(&[1.0, -2.0, 0.5, 3.0]);
    let v = Tensor::vector(&[2.0, 1.0, -4.0, 0.5]);
    let head = Linear {
        weight: Tensor::matrix(&[&[1.0], &[0.5], &[2.0], &[-1.0]]),
        bias: Tensor::vector(&[0.25]),
    };
    // fused = [2, -2, -2, 1.5] → 2 − 1 − 4 − 1.5 + 0.25
    assert!((fuse_and_score(&x, &v, &head).unwrap() - (-4.25)).abs() < 1e-12);
}

#[test]
fn zero_score_head_gives_uniform_answers() {
    let cfg = micro_config(2, 2);
    let mut params = spicy_params(&cfg, 2);
    params.get_mut("dec_q.score.w").unwrap().data_mut().fill(0.0);
    let s = &micro_samples(&cfg, 1, 3)[0];
    let out = forward(s, &params, Mode::Test).unwrap();
    for &p in out.y_q.data() {
        assert!((p - 0.25).abs() < 1e-15);
    }
    assert!((out.y_q.sum() - 1.0).abs() <= 1e-6);
}

#[test]
fn test_mode_never_reads_reasoning_parameters() {
    let cfg = micro_config(2, 2);
    let params = spicy_params(&cfg, 2);
    let s = &micro_samples(&cfg, 1, 3)[0];
    let mut poisoned = params.clone();
    for i in 0..poisoned.len() {
        if poisoned.params()[i].group == ParamGroup::ReasoningDecoder {
            poisoned.value_at_mut(i).data_mut().fill(f64::NAN);
        }
    }
    let a = forward(s, &params, Mode::Test).unwrap();
    let b = forward(s, &poisoned, Mode::Test).unwrap();
    assert_eq!(a, b);
}

#[test]
fn parameter_groups_are_disjoint_and_cover_the_model() {
    let params = ModelParams::init(&ModelConfig::default(), 0).unwrap();
    for p in params.params() {
        let expected = if p.name.starts_with("lang.") {
            ParamGroup::Language
        } else if p.name.starts_with("dec_q.") {
            ParamGroup::QuestionDecoder
        } else if p.name.starts_with("dec_r.") {
            ParamGroup::ReasoningDecoder
        } else {
            assert_eq!(p.name, "geo.emb");
            ParamGroup::Geometric
        };
        assert_eq!(p.group, expected, "{}", p.name);
    }
}

#[test]
fn initialization_is_seeded() {
    let cfg = micro_config(2, 2);
    assert_eq!(ModelParams::init(&cfg, 7).unwrap(), ModelParams::init(&cfg, 7).unwrap());
    assert_ne!(ModelParams::init(&cfg, 7).unwrap(), ModelParams::init(&cfg, 8).unwrap());
    let p = ModelParams::init(&cfg, 7).unwrap();
    assert!(p.get("dec_q.attend.b").unwrap().data().iter().all(|&x| x == 0.0));
}

#[test]
fn config_rejects_bad_head_count() {
    let cfg = ModelConfig {
        n_heads: 3,
        ..ModelConfig::default()
    };
    assert!(cfg.validate().is_err());
}
