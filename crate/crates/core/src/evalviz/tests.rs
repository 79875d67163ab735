use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::heatmap::parse_ppm;
use super::*;
use crate::gridvqa::GenConfig;
use crate::numcore::Tensor;
use crate::selfcheck::{micro_config, micro_samples};

fn small_dataset() -> Dataset {
    let gen = GenConfig {
        d_visual: 8,
        ..GenConfig::default()
    };
    Dataset::generate(4, 120, &gen, 11).unwrap()
}

fn model_for(ds: &Dataset, seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        d_visual: ds.config.d_visual,
        vocab_size: ds.vocab.len(),
        ..micro_config(ds.config.grid_h, ds.config.grid_w)
    };
    ModelParams::init(&cfg, seed).unwrap()
}

fn random_map(h: usize, w: usize, r: &mut ChaCha8Rng) -> AttentionMap {
    let mut v: Vec<f64> = (0..h * w).map(|_| r.random::<f64>().powi(3)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    AttentionMap::new(Tensor::new(vec![h, w], v).unwrap()).unwrap()
}

#[test]
fn uniform_attention_puts_one_cell_worth_on_target() {
    let ds = small_dataset();
    let mut params = model_for(&ds, 0);
    params.zero_all();
    let r = evaluate(&params, &ds.val).unwrap();
    assert!((r.mean_attn_on_target - 1.0 / 64.0).abs() < 1e-12);
    assert_eq!(r.mean_kl_q_r, Some(0.0));
    // Every answer distribution is uniform, so the lowest index wins.
    let zeros = ds.val.iter().filter(|s| s.correct_index == 0).count();
    assert_eq!(r.accuracy, zeros as f64 / ds.val.len() as f64);
    assert_eq!(r.n_samples, ds.val.len());
}

#[test]
fn evaluation_is_deterministic_across_worker_counts() {
    let ds = small_dataset();
    let params = model_for(&ds, 3);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| evaluate(&params, &ds.val).unwrap())
    };
    let a = run(1);
    assert_eq!(a, run(1));
    assert_eq!(a, run(3));
    assert!((0.0..=1.0).contains(&a.accuracy));
    assert!((0.0..=1.0).contains(&a.mean_attn_on_target));
}

#[test]
fn missing_rationales_drop_the_divergence() {
    let ds = small_dataset();
    let params = model_for(&ds, 3);
    let mut val = ds.val.clone();
    val[0].rationale = None;
    let r = evaluate(&params, &val).unwrap();
    assert_eq!(r.mean_kl_q_r, None);
    assert_eq!(r.accuracy, evaluate(&params, &ds.val).unwrap().accuracy);
}

#[test]
fn masking_is_local() {
    let cfg = micro_config(3, 3);
    let s = micro_samples(&cfg, 1, 2).remove(0);
    let m = mask_referenced_objects(&s);
    let changed = s
        .grid
        .features()
        .data()
        .iter()
        .zip(m.grid.features().data())
        .filter(|(a, b)| a != b)
        .count();
    assert_eq!(changed, s.target_cells.len() * cfg.d_visual);
    for &(r, c) in &s.target_cells {
        assert!(m.grid.cell(r, c).iter().all(|&x| x == 0.0));
    }
    assert_eq!(m.question, s.question);
    assert_eq!(m.candidates, s.candidates);

    let mut none = s.clone();
    none.target_cells.clear();
    assert_eq!(mask_referenced_objects(&none), none);

    let mut all = s.clone();
    all.target_cells = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).collect();
    assert!(mask_referenced_objects(&all).grid.features().data().iter().all(|&x| x == 0.0));
}

#[test]
fn ablation_is_coherent() {
    let ds = small_dataset();
    let params = model_for(&ds, 5);
    let r = ablation(&params, &ds.val).unwrap();
    assert_eq!(r.drop, r.accuracy_clean - r.accuracy_masked);
    assert_eq!(r.accuracy_clean, evaluate(&params, &ds.val).unwrap().accuracy);

    let mut unmasked = ds.val.clone();
    unmasked.iter_mut().for_each(|s| s.target_cells.clear());
    assert_eq!(ablation(&params, &unmasked).unwrap().drop, 0.0);
}

#[test]
fn heatmap_pixels() {
    let hot = AttentionMap::one_hot(8, 8, 2, 5);
    let (w, h, px) = parse_pgm16(&pgm16_bytes(&hot)).unwrap();
    assert_eq!((w, h), (8, 8));
    assert_eq!(px.iter().filter(|&&p| p == 65535).count(), 1);
    assert_eq!(px[2 * 8 + 5], 65535);
    assert_eq!(px.iter().filter(|&&p| p == 0).count(), 63);

    let (_, _, px) = parse_pgm16(&pgm16_bytes(&AttentionMap::uniform(4, 6))).unwrap();
    assert!(px.iter().all(|&p| p == 65535));
}

#[test]
fn graymap_argmax_matches_attention_argmax() {
    let mut r = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let (h, w) = (r.random_range(1..10), r.random_range(1..10));
        let a = random_map(h, w, &mut r);
        let (pw, ph, px) = parse_pgm16(&pgm16_bytes(&a)).unwrap();
        assert_eq!((pw, ph), (w, h));
        let best = px.iter().enumerate().max_by_key(|&(i, &p)| (p, std::cmp::Reverse(i))).unwrap().0;
        assert_eq!((best / w, best % w), a.argmax_cell());
    }
}

#[test]
fn pixmap_is_upscaled_with_red_outlines() {
    let a = AttentionMap::one_hot(2, 3, 0, 0);
    let (w, h, px) = parse_ppm(&ppm_bytes(&a, &[(1, 2)]));
    assert_eq!((w, h), (3 * HEATMAP_SCALE, 2 * HEATMAP_SCALE));
    let at = |x: usize, y: usize| px[y * w + x];
    assert_eq!(at(10, 10), [255, 255, 255]);
    assert_eq!(at(40, 10), [0, 0, 0]);
    // Cell (1, 2) spans x 64..96, y 32..64.
    assert_eq!(at(64, 40), OUTLINE);
    assert_eq!(at(95, 63), OUTLINE);
    assert_eq!(at(80, 48), [0, 0, 0]);
    assert!(px.iter().filter(|&&p| p == OUTLINE).count() > 0);
    assert_eq!(at(63, 40), [0, 0, 0]);
}

#[test]
fn export_writes_both_images() {
    let dir = tempfile::tempdir().unwrap();
    let a = AttentionMap::uniform(8, 8);
    let (pgm, ppm) = export_heatmap(&a, &[(1, 1)], &dir.path().join("sub/map")).unwrap();
    assert!(pgm.ends_with("sub/map.pgm") && ppm.ends_with("sub/map.ppm"));
    assert_eq!(std::fs::read(&pgm).unwrap(), pgm16_bytes(&a));
    assert!(export_heatmap(&a, &[(8, 0)], &dir.path().join("bad")).is_err());
}

#[test]
fn comparing_a_checkpoint_with_itself() {
    let ds = small_dataset();
    let params = model_for(&ds, 1);
    let dir = tempfile::tempdir().unwrap();
    let r = compare_checkpoints(&params, &params, &ds.val, 3, Some(dir.path())).unwrap();
    assert_eq!(r.baseline, r.distilled);
    assert_eq!(r.baseline.accuracy, evaluate(&params, &ds.val).unwrap().accuracy);
    assert_eq!(r.heatmaps.len(), 3);
    for hm in &r.heatmaps {
        for p in hm.baseline.iter().chain(&hm.distilled) {
            assert!(p.exists());
        }
    }
    assert!(dir.path().join("summary.json").exists());

    let other = ModelParams::init(
        &ModelConfig {
            d_model: 8,
            ..params.config().clone()
        },
        0,
    )
    .unwrap();
    assert!(matches!(
        compare_checkpoints(&params, &other, &ds.val, 0, None),
        Err(Error::Mismatch(_))
    ));
}

#[test]
fn incompatible_model_is_refused() {
    let ds = small_dataset();
    let cfg = ModelConfig {
        vocab_size: ds.vocab.len() + 1,
        ..model_for(&ds, 0).config().clone()
    };
    assert!(matches!(check_compatible(&cfg, &ds), Err(Error::Mismatch(_))));
    assert!(check_compatible(model_for(&ds, 0).config(), &ds).is_ok());
}
