//! Small models and datasets for fast invariant checks.

//!
//! [`run_selfcheck`] is the fast invariant suite behind `attd selfcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gridvqa::{derive_seed, render_features, Dataset, FeatureCodes, GenConfig, Sample, SceneSpec, Vocabulary};
use crate::losses::{cross_entropy, forward_kl, stage1_objective, stage2_objective, EPS};
use crate::model::{
    forward_batch, AttentionMap, Binder, GroupSet, Mode, ModelConfig, ModelParams, ParamGroup, N_CANDIDATES,
};
use crate::numcore::{relative_error, softmax_in_place, Tape, Tensor, Var};
use crate::trainloop::{train_stage1, train_stage2, MetricsLog, TrainConfig, TrainState};

/// A tiny model over an `h × w` grid with the standard vocabulary.
pub fn micro_config(grid_h: usize, grid_w: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 2,
        d_visual: 8,
        grid_h,
        grid_w,
        vocab_size: Vocabulary::standard().len(),
        max_seq_len: 16,
        d_ff: 32,
        ..ModelConfig::default()
    }
}

/// Random samples shaped for `cfg`, on grids of any size. Tokens are drawn
/// uniformly from the non-special ids, so the samples carry no task
/// structure; they exercise shapes and numerics only. Grids need at least
/// two cells.
pub fn micro_samples(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<Sample> {
    assert!(cfg.cells() >= 2, "micro samples need at least two grid cells");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes = FeatureCodes::random(cfg.d_visual, rng.random());
    let vocab = cfg.vocab_size as u32;
    let max_q = (cfg.max_seq_len - 4).clamp(1, 5);
    (0..n as u64)
        .map(|id| {
            let mut tokens = |len: usize| -> Vec<u32> {
                (0..len).map(|_| rng.random_range(3..vocab)).collect()
            };
            let q_len = 1 + (id as usize % max_q);
            let question = tokens(q_len);
            let mut candidates: Vec<Vec<u32>> = Vec::with_capacity(N_CANDIDATES);
            while candidates.len() < N_CANDIDATES {
                let c = tokens(1);
                if !candidates.contains(&c) {
                    candidates.push(c);
                }
            }
            let r_len = (cfg.max_seq_len - 1).min(6);
            let rationale = Some(tokens(r_len));
            let scene = SceneSpec::random(cfg.grid_h, cfg.grid_w, 0.3, &mut rng);
            let grid = render_features(&scene, &codes, rng.random()).expect("valid scene");
            let target = scene.objects[0];
            Sample {
                id,
                scene,
                grid,
                question,
                candidates,
                correct_index: rng.random_range(0..N_CANDIDATES),
                rationale,
                target_cells: vec![(target.row, target.col)],
            }
        })
        .collect()
}

/// Step for central finite differences.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error between tape and finite-difference
/// gradients.
pub const GRAD_TOL: f64 = 1e-4;
/// Allowed deviation of an attention map's total mass from 1.
pub const ATTN_SUM_TOL: f64 = 1e-6;

pub type KlFn = fn(&AttentionMap, &AttentionMap) -> Result<f64>;

/// One named property and its verdict.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SelfCheckReport {
    pub passed: bool,
    pub checks: Vec<CheckOutcome>,
}

impl SelfCheckReport {
    pub fn first_failure(&self) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| !c.passed)
    }
}

/// Functions under test that fixtures may swap out.
#[derive(Clone, Copy, Debug)]
pub struct SelfCheckOptions {
    pub forward_kl: KlFn,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        Self { forward_kl }
    }
}

/// Runs the fast invariant suite with the library's own functions.
pub fn run_selfcheck() -> SelfCheckReport {
    run_selfcheck_with(&SelfCheckOptions::default())
}

pub fn run_selfcheck_with(opts: &SelfCheckOptions) -> SelfCheckReport {
    type Check<'a> = (&'static str, Box<dyn Fn() -> Result<(bool, String)> + 'a>);
    let checks: Vec<Check> = vec![
        ("softmax/cross_entropy closed form", Box::new(check_cross_entropy)),
        ("forward_kl nonnegativity", Box::new(|| check_kl_nonnegative(opts.forward_kl, 500, 11))),
        ("forward_kl closed form", Box::new(|| check_kl_closed_form(opts.forward_kl))),
        ("stage-1 gradient check", Box::new(|| grad_verdict(1))),
        ("stage-2 gradient check", Box::new(|| grad_verdict(2))),
        ("attention normalization", Box::new(|| {
            let s = attention_normalization(200, 13)?;
            Ok((s.passed(), format!("{} maps, max |sum-1| {:.1e}, min weight {:.1e}", s.n_maps, s.max_sum_dev, s.min_weight)))
        })),
        ("stage-2 freezing", Box::new(check_freezing)),
    ];
    let checks: Vec<CheckOutcome> = checks
        .into_iter()
        .map(|(name, f)| {
            let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
            CheckOutcome { name: name.into(), passed, detail }
        })
        .collect();
    SelfCheckReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

fn check_cross_entropy() -> Result<(bool, String)> {
    let mut y = vec![0.3, -1.2, 0.3, 2.0];
    softmax_in_place(&mut y);
    let sum_dev = (y.iter().sum::<f64>() - 1.0).abs();
    let uniform = Tensor::filled(&[4], 0.25);
    let ce_uniform = cross_entropy(&uniform, 2)?;
    let ce_onehot = cross_entropy(&Tensor::vector(&[0.0, 1.0, 0.0, 0.0]), 1)?;
    let ce_zero = cross_entropy(&Tensor::vector(&[0.0, 1.0, 0.0, 0.0]), 0)?;
    let ok = sum_dev <= 1e-12
        && y[0] == y[2]
        && (ce_uniform - 4f64.ln()).abs() <= 1e-9
        && ce_onehot == 0.0
        && (ce_zero + EPS.ln()).abs() <= 1e-9;
    Ok((ok, format!("CE(uniform) = {ce_uniform:.12}, CE(onehot) = {ce_onehot}, CE(0) = {ce_zero:.6}")))
}

/// A random point of the simplex over `n` cells, sometimes with exact zeros.
fn random_distribution<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let sparse = rng.random_bool(0.3);
    let mut p: Vec<f64> = (0..n)
        .map(|_| {
            if sparse && rng.random_bool(0.5) {
                0.0
            } else {
                -(1.0 - rng.random::<f64>()).ln()
            }
        })
        .collect();
    if p.iter().all(|&x| x == 0.0) {
        p[rng.random_range(0..n)] = 1.0;
    }
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

fn check_kl_nonnegative(kl: KlFn, n: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min = f64::INFINITY;
    for _ in 0..n {
        let (h, w) = (rng.random_range(1..=4), rng.random_range(2..=4));
        let map = |p: Vec<f64>| AttentionMap::new(Tensor::new(vec![h, w], p)?);
        let p = map(random_distribution(h * w, &mut rng))?;
        let q = if rng.random_bool(0.1) {
            p.clone()
        } else {
            map(random_distribution(h * w, &mut rng))?
        };
        min = min.min(kl(&p, &q)?);
    }
    Ok((min >= -1e-12, format!("{n} random pairs, min KL {min:.3e}")))
}

fn check_kl_closed_form(kl: KlFn) -> Result<(bool, String)> {
    let onehot = kl(&AttentionMap::one_hot(2, 2, 0, 0), &AttentionMap::uniform(2, 2))?;
    let half = AttentionMap::new(Tensor::new(vec![1, 2], vec![0.5, 0.5])?)?;
    let skew = AttentionMap::new(Tensor::new(vec![1, 2], vec![0.25, 0.75])?)?;
    let mixed = kl(&half, &skew)?;
    let expected_mixed = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    let same = kl(&skew, &skew)?;
    let ok = (onehot - 4f64.ln()).abs() <= 1e-9 && (mixed - expected_mixed).abs() <= 1e-9 && same.abs() <= 1e-12;
    Ok((ok, format!("KL(onehot‖uniform) = {onehot:.12}, KL([.5,.5]‖[.25,.75]) = {mixed:.12}")))
}

/// Outcome of comparing tape gradients of a stage objective with central
/// finite differences on randomly chosen parameter components.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageGradCheck {
    pub stage: u8,
    pub n_components: usize,
    pub max_rel_error: f64,
    /// `name[flat index]` of the worst component.
    pub worst: String,
}

impl StageGradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= GRAD_TOL
    }
}

fn grad_verdict(stage: u8) -> Result<(bool, String)> {
    let g = stage_gradient_check(stage, 24, 7)?;
    Ok((
        g.passed(),
        format!("{} components, max rel error {:.2e} at {}", g.n_components, g.max_rel_error, g.worst),
    ))
}

fn stage_loss<'p>(params: &'p ModelParams, trainable: GroupSet, samples: &[&Sample], stage: u8) -> Result<(Tape, Var, Binder<'p>)> {
    let targets: Vec<usize> = samples.iter().map(|s| s.correct_index).collect();
    let mut tape = Tape::new();
    let mut b = Binder::new(params, trainable);
    let fwd = forward_batch(&mut tape, &mut b, samples, Mode::Train)?;
    let (loss, _) = match stage {
        1 => stage1_objective(&mut tape, &fwd, &targets)?,
        _ => stage2_objective(&mut tape, &fwd, &targets, 1.0)?,
    };
    Ok((tape, loss, b))
}

/// Checks `n_components` randomly drawn scalar parameters of a micro model
/// (d_model 16, 2×2 grid). Stage 2 draws only from the groups it trains.
pub fn stage_gradient_check(stage: u8, n_components: usize, seed: u64) -> Result<StageGradCheck> {
    let cfg = ModelConfig {
        init_std: 0.3,
        ..micro_config(2, 2)
    };
    let params = ModelParams::init(&cfg, seed)?;
    let samples = micro_samples(&cfg, 3, seed);
    let refs: Vec<&Sample> = samples.iter().collect();
    let trainable = match stage {
        1 => GroupSet::all(),
        2 => {
            let frozen = TrainConfig::default().stage2_frozen();
            ParamGroup::ALL.into_iter().filter(|&g| !frozen.contains(g)).collect()
        }
        s => return Err(Error::Input(format!("stage must be 1 or 2, got {s}"))),
    };

    let (mut tape, loss, b) = stage_loss(&params, trainable, &refs, stage)?;
    tape.backward(loss)?;
    let grads = b.gradients(&tape);

    let pool: Vec<(usize, usize)> = params
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| trainable.contains(p.group))
        .flat_map(|(i, p)| (0..p.value.numel()).map(move |j| (i, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stage as u64));
    let picks = rand::seq::index::sample(&mut rng, pool.len(), n_components.min(pool.len()));

    let eval = |p: &ModelParams| -> Result<f64> {
        let (tape, loss, _) = stage_loss(p, GroupSet::empty(), &refs, stage)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut worst = (0.0, String::new());
    let mut probe = params.clone();
    for k in picks.iter() {
        let (i, j) = pool[k];
        let analytic = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
        let orig = probe.params()[i].value.data()[j];
        probe.value_at_mut(i).data_mut()[j] = orig + FD_STEP;
        let up = eval(&probe)?;
        probe.value_at_mut(i).data_mut()[j] = orig - FD_STEP;
        let down = eval(&probe)?;
        probe.value_at_mut(i).data_mut()[j] = orig;
        let e = relative_error(analytic, (up - down) / (2.0 * FD_STEP));
        if e >= worst.0 {
            worst = (e, format!("{}[{j}]", params.params()[i].name));
        }
    }
    Ok(StageGradCheck {
        stage,
        n_components: picks.len(),
        max_rel_error: worst.0,
        worst: worst.1,
    })
}

/// Extremes over every α^Q and α^R produced by random forward passes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionStats {
    pub n_passes: usize,
    pub n_maps: usize,
    pub max_sum_dev: f64,
    pub min_weight: f64,
}

impl AttentionStats {
    pub fn passed(&self) -> bool {
        self.max_sum_dev <= ATTN_SUM_TOL && self.min_weight >= 0.0
    }
}

/// Train-mode forward passes of freshly drawn micro models on grids from
/// 2×2 to 4×4, `n_passes` samples in all.
pub fn attention_normalization(n_passes: usize, seed: u64) -> Result<AttentionStats> {
    const PER_MODEL: usize = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = AttentionStats {
        n_passes: 0,
        n_maps: 0,
        max_sum_dev: 0.0,
        min_weight: f64::INFINITY,
    };
    while stats.n_passes < n_passes {
        let cfg = ModelConfig {
            init_std: rng.random_range(0.02..1.5),
            ..micro_config(rng.random_range(2..=4), rng.random_range(2..=4))
        };
        let params = ModelParams::init(&cfg, rng.random())?;
        let n = PER_MODEL.min(n_passes - stats.n_passes);
        let samples = micro_samples(&cfg, n, rng.random());
        let refs: Vec<&Sample> = samples.iter().collect();
        let mut tape = Tape::new();
        let fwd = forward_batch(&mut tape, &mut Binder::frozen(&params), &refs, Mode::Train)?;
        let r = fwd.reasoning.expect("train mode");
        for var in [fwd.alpha_q, r.alpha_r] {
            let t = tape.value(var);
            for i in 0..n {
                let row = t.row(i);
                stats.max_sum_dev = stats.max_sum_dev.max((row.iter().sum::<f64>() - 1.0).abs());
                stats.min_weight = row.iter().copied().fold(stats.min_weight, f64::min);
                stats.n_maps += 1;
            }
        }
        stats.n_passes += n;
    }
    Ok(stats)
}

/// Two stage-2 steps on a 16-sample generated dataset must leave the
/// reasoning decoder bit-identical while the question decoder moves.
fn check_freezing() -> Result<(bool, String)> {
    let gen = GenConfig {
        grid_h: 4,
        grid_w: 4,
        d_visual: 8,
        noise_sigma: 0.1,
    };
    let data = Dataset::generate(16, 4, &gen, 5)?;
    let cfg = ModelConfig {
        vocab_size: data.vocab.len(),
        ..micro_config(4, 4)
    };
    let tc = TrainConfig {
        stage1_epochs: 1,
        stage2_epochs: 1,
        batch_size: 8,
        log_every: 0,
        ..TrainConfig::default()
    };
    let mut log = MetricsLog::in_memory();
    let s1 = train_stage1(&data, &tc, TrainState::init(&cfg, 5)?, &mut log)?;
    let s2 = train_stage2(&data, &tc, s1.clone(), &mut log)?;
    let group = |s: &TrainState, g| s.params.group_params(g).cloned().collect::<Vec<_>>();
    let frozen_same = group(&s1, ParamGroup::ReasoningDecoder) == group(&s2, ParamGroup::ReasoningDecoder);
    let moved = group(&s1, ParamGroup::QuestionDecoder) != group(&s2, ParamGroup::QuestionDecoder);
    let steps = s2.step - s1.step;
    Ok((
        frozen_same && moved && steps == 2,
        format!("{steps} steps, reasoning decoder unchanged: {frozen_same}, question decoder updated: {moved}"),
    ))
}
