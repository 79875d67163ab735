//! Answer cross-entropy, forward KL between attention maps, and the two
//! stage objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionMap, BatchForward, ForwardOutput};
use crate::numcore::{kl_row, Tape, Tensor, Var};

/// Clamp inside every logarithm.
pub const EPS: f64 = 1e-12;

/// Batch-mean loss components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_q: f64,
    /// Stage 1 only.
    pub l_r: Option<f64>,
    /// Stage 2 only, unscaled.
    pub kl: Option<f64>,
    pub total: f64,
    pub batch_size: usize,
}

/// `−ln max(y[a], ε)`.
pub fn cross_entropy(y: &Tensor, a: usize) -> Result<f64> {
    let n = y.numel();
    if a >= n {
        return Err(Error::Input(format!("answer index {a} out of range for {n} candidates")));
    }
    Ok(0.0 - y.data()[a].max(EPS).ln())
}

/// `Σ p·ln((p+ε)/(q+ε))` over the flattened grid; cells with `p = 0` add 0.
pub fn forward_kl(p: &AttentionMap, q: &AttentionMap) -> Result<f64> {
    if p.weights().shape() != q.weights().shape() {
        return Err(Error::Dimension(format!(
            "forward_kl: {:?} vs {:?}",
            p.weights().shape(),
            q.weights().shape()
        )));
    }
    Ok(kl_row(p.weights().data(), q.weights().data(), EPS))
}

fn check_batch(outputs: &[ForwardOutput], targets: &[usize]) -> Result<()> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return Err(Error::Input(format!(
            "{} outputs for {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    Ok(())
}

fn mean(values: impl Iterator<Item = Result<f64>>, n: usize) -> Result<f64> {
    let mut s = 0.0;
    for v in values {
        s += v?;
    }
    Ok(s / n as f64)
}

fn reasoning(o: &ForwardOutput) -> Result<&crate::model::ReasoningOutput> {
    o.reasoning
        .as_ref()
        .ok_or_else(|| Error::Contract("stage losses need train-mode outputs with the reasoning branch".into()))
}

/// `(1/N)ΣCE(y_q, a) + (1/N)ΣCE(y_r, a)`
pub fn stage1_loss(outputs: &[ForwardOutput], targets: &[usize]) -> Result<LossReport> {
    check_batch(outputs, targets)?;
    let n = outputs.len();
    let l_q = mean(outputs.iter().zip(targets).map(|(o, &a)| cross_entropy(&o.y_q, a)), n)?;
    let l_r = mean(
        outputs
            .iter()
            .zip(targets)
            .map(|(o, &a)| cross_entropy(&reasoning(o)?.y_r, a)),
        n,
    )?;
    Ok(LossReport {
        l_q,
        l_r: Some(l_r),
        kl: None,
        total: l_q + l_r,
        batch_size: n,
    })
}

/// `(1/N)ΣCE(y_q, a) + λ·(1/N)ΣKL(α^Q ‖ α^R)`
pub fn stage2_loss(outputs: &[ForwardOutput], targets: &[usize], kl_scale: f64) -> Result<LossReport> {
    check_batch(outputs, targets)?;
    let n = outputs.len();
    let l_q = mean(outputs.iter().zip(targets).map(|(o, &a)| cross_entropy(&o.y_q, a)), n)?;
    let kl = mean(
        outputs.iter().map(|o| forward_kl(&o.alpha_q, &reasoning(o)?.alpha_r)),
        n,
    )?;
    Ok(LossReport {
        l_q,
        l_r: None,
        kl: Some(kl),
        total: l_q + kl_scale * kl,
        batch_size: n,
    })
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

/// Stage-1 objective recorded on `tape`; returns the scalar to
/// backpropagate and its report.
pub fn stage1_objective(tape: &mut Tape, fwd: &BatchForward, targets: &[usize]) -> Result<(Var, LossReport)> {
    let r = fwd
        .reasoning
        .ok_or_else(|| Error::Contract("stage-1 objective needs the reasoning branch".into()))?;
    let ce_q = tape.cross_entropy(fwd.y_q, targets, EPS)?;
    let l_q = tape.mean(ce_q);
    let ce_r = tape.cross_entropy(r.y_r, targets, EPS)?;
    let l_r = tape.mean(ce_r);
    let total = tape.add(l_q, l_r)?;
    let report = LossReport {
        l_q: scalar(tape, l_q),
        l_r: Some(scalar(tape, l_r)),
        kl: None,
        total: scalar(tape, total),
        batch_size: fwd.batch,
    };
    Ok((total, report))
}

/// Stage-2 objective recorded on `tape`. `α^R` enters through a
/// stop-gradient, so nothing upstream of it receives gradient from the KL
/// term even when its parameters are bound as trainable.
pub fn stage2_objective(
    tape: &mut Tape,
    fwd: &BatchForward,
    targets: &[usize],
    kl_scale: f64,
) -> Result<(Var, LossReport)> {
    let r = fwd
        .reasoning
        .ok_or_else(|| Error::Contract("stage-2 objective needs the reasoning attention".into()))?;
    let ce_q = tape.cross_entropy(fwd.y_q, targets, EPS)?;
    let l_q = tape.mean(ce_q);
    let alpha_r = tape.detach(r.alpha_r);
    let kls = tape.forward_kl(fwd.alpha_q, alpha_r, EPS)?;
    let kl = tape.mean(kls);
    let scaled = tape.scale(kl, kl_scale);
    let total = tape.add(l_q, scaled)?;
    let report = LossReport {
        l_q: scalar(tape, l_q),
        l_r: None,
        kl: Some(scalar(tape, kl)),
        total: scalar(tape, total),
        batch_size: fwd.batch,
    };
    Ok((total, report))
}
