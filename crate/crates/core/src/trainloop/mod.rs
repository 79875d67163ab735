//! Two-stage training: joint cross-entropy on both branches, then
//! attention distillation with the reasoning decoder frozen.

mod checkpoint;
mod metrics;
mod optim;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use metrics::{read_metrics, MetricRecord, MetricsLog, RecordKind};
pub use optim::{clip_global_norm, OptimizerConfig, OptimizerState};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalviz::{check_compatible, evaluate};
use crate::gridvqa::{derive_seed, Dataset, Sample};
use crate::losses::{stage1_objective, stage2_objective, LossReport};
use crate::model::{forward_batch, Binder, GroupSet, Mode, ModelConfig, ModelParams, ParamGroup};
use crate::numcore::{argmax, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub stage1_optimizer: OptimizerConfig,
    pub stage2_optimizer: OptimizerConfig,
    /// Global gradient-norm cap.
    pub clip_norm: f64,
    /// Weight of the KL term in stage 2.
    pub kl_scale: f64,
    pub seed: u64,
    /// Per-epoch checkpoints go here when set.
    pub checkpoint_dir: Option<PathBuf>,
    /// Log every n-th batch; 0 logs epoch summaries only.
    pub log_every: usize,
    /// Also update the language stream in stage 2.
    pub train_language_in_stage2: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 11,
            stage2_epochs: 5,
            batch_size: 32,
            stage1_optimizer: OptimizerConfig::adam(1e-3),
            stage2_optimizer: OptimizerConfig::adam(3e-4),
            clip_norm: 5.0,
            kl_scale: 1.0,
            seed: 1,
            checkpoint_dir: None,
            log_every: 25,
            train_language_in_stage2: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Input("batch_size must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) || !(self.kl_scale >= 0.0) || !self.kl_scale.is_finite() {
            return Err(Error::Input("clip_norm must be positive and kl_scale non-negative".into()));
        }
        self.stage1_optimizer.validate()?;
        self.stage2_optimizer.validate()
    }

    /// Groups held fixed during stage 2.
    pub fn stage2_frozen(&self) -> GroupSet {
        let frozen = GroupSet::empty()
            .with(ParamGroup::ReasoningDecoder)
            .with(ParamGroup::Geometric);
        if self.train_language_in_stage2 {
            frozen
        } else {
            frozen.with(ParamGroup::Language)
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub stage: u8,
    /// Epochs completed in the current stage.
    pub epoch: usize,
    /// Optimizer steps taken across both stages.
    pub step: u64,
    /// Shuffle generator.
    pub rng: ChaCha8Rng,
    /// Best validation accuracy seen in the current stage.
    pub best_val: Option<f64>,
    pub frozen: GroupSet,
}

impl TrainState {
    /// Fresh stage-1 state: parameters and shuffle order both follow `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(config, seed)?;
        let values: Vec<&Tensor> = params.params().iter().map(|p| &p.value).collect();
        Ok(Self {
            optimizer: OptimizerState::zeros_like(&values),
            params,
            stage: 1,
            epoch: 0,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5eed)),
            best_val: None,
            frozen: GroupSet::empty(),
        })
    }

    fn trainable(&self) -> GroupSet {
        ParamGroup::ALL
            .into_iter()
            .filter(|&g| !self.frozen.contains(g))
            .collect()
    }
}

/// Checkpoint written after `epoch` of `stage`.
pub fn checkpoint_path(dir: &Path, stage: u8, epoch: usize) -> PathBuf {
    dir.join(format!("stage{stage}_epoch{epoch:02}.ckpt"))
}

/// Latest checkpoint of `stage`.
pub fn final_checkpoint_path(dir: &Path, stage: u8) -> PathBuf {
    dir.join(format!("stage{stage}.ckpt"))
}

/// Best-validation checkpoint of `stage`.
pub fn best_checkpoint_path(dir: &Path, stage: u8) -> PathBuf {
    dir.join(format!("stage{stage}_best.ckpt"))
}

/// Moves a stage-1 state into stage 2: freezes the reasoning decoder (and
/// whatever else `config` holds fixed), resets the optimizer moments and
/// restarts the epoch count.
pub fn begin_stage2(mut state: TrainState, config: &TrainConfig) -> Result<TrainState> {
    if state.stage != 1 {
        return Err(Error::Contract("begin_stage2 needs a stage-1 state".into()));
    }
    state.stage = 2;
    state.epoch = 0;
    state.best_val = None;
    state.frozen = config.stage2_frozen();
    state.optimizer.reset();
    Ok(state)
}

/// Runs stage 1 from `state.epoch` up to `config.stage1_epochs`.
pub fn train_stage1(data: &Dataset, config: &TrainConfig, mut state: TrainState, log: &mut MetricsLog) -> Result<TrainState> {
    config.validate()?;
    check_compatible(state.params.config(), data)?;
    if state.stage != 1 {
        return Err(Error::Contract(format!("stage-1 training got a stage-{} state", state.stage)));
    }
    while state.epoch < config.stage1_epochs {
        run_epoch(data, config, &mut state, log)?;
    }
    Ok(state)
}

/// Runs stage 2 up to `config.stage2_epochs`. A stage-1 state is first
/// moved into stage 2 with [`begin_stage2`]; a stage-2 state whose reasoning
/// decoder is not frozen is refused.
pub fn train_stage2(data: &Dataset, config: &TrainConfig, mut state: TrainState, log: &mut MetricsLog) -> Result<TrainState> {
    config.validate()?;
    check_compatible(state.params.config(), data)?;
    if state.stage == 1 {
        state = begin_stage2(state, config)?;
    }
    if !state.frozen.contains(ParamGroup::ReasoningDecoder) {
        return Err(Error::Contract(
            "stage-2 training needs the reasoning decoder frozen".into(),
        ));
    }
    while state.epoch < config.stage2_epochs {
        run_epoch(data, config, &mut state, log)?;
    }
    Ok(state)
}

fn batch_label(stage: u8, epoch: usize, batch: usize, samples: &[&Sample]) -> String {
    let ids: Vec<String> = samples.iter().take(4).map(|s| s.id.to_string()).collect();
    let more = if samples.len() > 4 { ", …" } else { "" };
    format!(
        "stage {stage} epoch {epoch} batch {batch} (sample ids {}{more})",
        ids.join(", ")
    )
}

/// Forward, backward and one optimizer update. Returns the batch loss and
/// the number of correct question-branch predictions.
fn train_step(
    config: &TrainConfig,
    state: &mut TrainState,
    samples: &[&Sample],
    label: impl Fn() -> String,
) -> Result<(LossReport, usize)> {
    let targets: Vec<usize> = samples.iter().map(|s| s.correct_index).collect();
    let labelled = |e: Error| match e {
        Error::Numeric(msg) => Error::Numeric(format!("{msg} at {}", label())),
        other => other,
    };
    let (report, correct, mut grads) = (|| -> Result<_> {
        let mut tape = Tape::new();
        let mut b = Binder::new(&state.params, state.trainable());
        let fwd = forward_batch(&mut tape, &mut b, samples, Mode::Train)?;
        let (loss, report) = match state.stage {
            1 => stage1_objective(&mut tape, &fwd, &targets)?,
            _ => stage2_objective(&mut tape, &fwd, &targets, config.kl_scale)?,
        };
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", report.total)));
        }
        let y = tape.value(fwd.y_q);
        let correct = (0..samples.len()).filter(|&i| argmax(y.row(i)) == targets[i]).count();
        tape.backward(loss)?;
        Ok((report, correct, b.gradients(&tape)))
    })()
    .map_err(labelled)?;
    clip_global_norm(&mut grads, config.clip_norm);

    let opt = match state.stage {
        1 => &config.stage1_optimizer,
        _ => &config.stage2_optimizer,
    };
    state.optimizer.t += 1;
    let t = state.optimizer.t;
    let frozen = state.frozen;
    for (i, grad) in grads.iter().enumerate() {
        let group = state.params.params()[i].group;
        if frozen.contains(group) {
            continue;
        }
        let value = state.params.value_at_mut(i);
        let zero;
        let g = match grad {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(value.shape());
                &zero
            }
        };
        optim::update(
            opt,
            t,
            value,
            g,
            &mut state.optimizer.m[i],
            &mut state.optimizer.v[i],
        );
    }
    state.step += 1;
    Ok((report, correct))
}

fn run_epoch(data: &Dataset, config: &TrainConfig, state: &mut TrainState, log: &mut MetricsLog) -> Result<()> {
    let stage = state.stage;
    let epoch = state.epoch + 1;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut state.rng);

    let (mut sum_q, mut sum_aux, mut correct) = (0.0, 0.0, 0usize);
    for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
        let samples: Vec<&Sample> = chunk.iter().map(|&i| &data.train[i]).collect();
        let (report, c) = train_step(config, state, &samples, || batch_label(stage, epoch, bi, &samples))?;
        let n = samples.len() as f64;
        sum_q += report.l_q * n;
        sum_aux += report.l_r.or(report.kl).unwrap_or(0.0) * n;
        correct += c;
        if config.log_every > 0 && state.step % config.log_every as u64 == 0 {
            log.push(MetricRecord {
                stage,
                epoch,
                step: state.step,
                kind: RecordKind::Batch,
                l_q: report.l_q,
                l_r: report.l_r,
                kl: report.kl,
                train_acc: None,
                val_acc: None,
                attn_on_target: None,
                val_kl: None,
            })?;
        }
    }

    let n = data.train.len() as f64;
    let val = evaluate(&state.params, &data.val)?;
    let (l_r, kl) = match stage {
        1 => (Some(sum_aux / n), None),
        _ => (None, Some(sum_aux / n)),
    };
    log.push(MetricRecord {
        stage,
        epoch,
        step: state.step,
        kind: RecordKind::Epoch,
        l_q: sum_q / n,
        l_r,
        kl,
        train_acc: Some(correct as f64 / n),
        val_acc: Some(val.accuracy),
        attn_on_target: Some(val.mean_attn_on_target),
        val_kl: val.mean_kl_q_r,
    })?;
    state.epoch = epoch;
    let improved = state.best_val.is_none_or(|b| val.accuracy > b);
    if improved {
        state.best_val = Some(val.accuracy);
    }

    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let c = encode_checkpoint(state);
        c.write(&checkpoint_path(dir, stage, epoch))?;
        c.write(&final_checkpoint_path(dir, stage))?;
        if improved {
            c.write(&best_checkpoint_path(dir, stage))?;
        }
    }
    Ok(())
}
