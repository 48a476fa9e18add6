//! Training objective: per-source cross-entropy, class-conditional kernel
//! discrepancy on external-extractor and fused features, and the
//! disagreement between classifiers on target samples.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::lmmd::{
    class_weights_from_labels, class_weights_from_soft, lmmd_with_grad, Bandwidth, BandwidthBase, ClassWeights,
    KernelConfig,
};
use crate::network::{PairActivations, PairVars};
use crate::tape::{Tape, Var};

pub const PROB_FLOOR: f64 = 1e-12;

/// `2 / (1 + exp(-alpha * epoch / epochs))`, optionally shifted down by one so
/// the weight starts at zero. `epoch` ranges over `0..=epochs`.
pub fn lambda_schedule(alpha: f64, epoch: usize, epochs: usize, minus_one: bool) -> Result<f64> {
    if epochs == 0 || epoch > epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside 0..={epochs}"
        )));
    }
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!("alpha {alpha} must be positive")));
    }
    let l = 2.0 / (1.0 + (-alpha * epoch as f64 / epochs as f64).exp());
    Ok(if minus_one { l - 1.0 } else { l })
}

/// Mean negative log-likelihood of integer labels.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = tape.value(probs).dim();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
    }
    let mut y = Array2::zeros((n, k));
    for (i, &l) in labels.iter().enumerate() {
        y[[i, l]] = 1.0;
    }
    Ok(tape.cross_entropy(probs, y, PROB_FLOOR))
}

/// Mean over classifier pairs of the mean absolute difference of their
/// target probabilities. Needs at least two classifiers.
pub fn classifier_discrepancy(tape: &mut Tape, probs: &[Var]) -> Result<Var> {
    if probs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "classifier discrepancy needs at least 2 classifiers, got {}",
            probs.len()
        )));
    }
    let shape = tape.value(probs[0]).dim();
    if probs.iter().any(|&p| tape.value(p).dim() != shape) {
        return Err(Error::Shape("classifier outputs differ in shape".into()));
    }
    let mut terms = Vec::new();
    for i in 0..probs.len() {
        for j in i + 1..probs.len() {
            terms.push(tape.mean_abs_diff(probs[i], probs[j]));
        }
    }
    let n = terms.len() as f64;
    let s = tape.sum_scalars(&terms);
    Ok(tape.scale(s, 1.0 / n))
}

/// Base bandwidth used during training. A zero median (more than half of the
/// pairs coincide) falls back to the mean of the positive distances; `None`
/// means every sample coincides and the discrepancy is identically zero.
pub fn training_bandwidth(cfg: &KernelConfig, src: &Array2<f64>, tgt: &Array2<f64>) -> Option<Bandwidth> {
    match cfg.bandwidth {
        BandwidthBase::Fixed(b) => Some(Bandwidth::fixed(b)),
        BandwidthBase::Median => {
            let m = Bandwidth::median(src, tgt);
            if m.value > 0.0 && m.value.is_finite() {
                Some(m)
            } else {
                Bandwidth::mean_positive(src, tgt)
            }
        }
    }
}

/// Statistics held constant during a backward pass: the target class
/// weights of each pair.
#[derive(Debug, Clone)]
pub struct DetachedStats {
    pub target_weights: Vec<ClassWeights>,
}

/// Discrepancy node between source and target activations.
pub fn lmmd_loss(
    tape: &mut Tape,
    src: Var,
    tgt: Var,
    ws: &ClassWeights,
    wt: &ClassWeights,
    multipliers: &[f64],
    bandwidth: Option<&Bandwidth>,
) -> Result<Var> {
    let Some(bw) = bandwidth else {
        return Ok(tape.constant(Array2::zeros((1, 1))));
    };
    let e = lmmd_with_grad(tape.value(src), tape.value(tgt), ws, wt, multipliers, bw)?;
    Ok(tape.precomputed(e.value, vec![(src, e.grad_src), (tgt, e.grad_tgt)]))
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub cross: Var,
    pub lmmd_external: Var,
    pub lmmd_fused: Var,
    pub diff: Var,
    pub total: Var,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub cross: f64,
    pub lmmd_external: f64,
    pub lmmd_fused: f64,
    pub diff: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossVars {
    pub fn breakdown(&self, tape: &Tape, lambda: f64) -> LossBreakdown {
        LossBreakdown {
            cross: tape.scalar(self.cross),
            lmmd_external: tape.scalar(self.lmmd_external),
            lmmd_fused: tape.scalar(self.lmmd_fused),
            diff: tape.scalar(self.diff),
            lambda,
            total: tape.scalar(self.total),
        }
    }
}

/// Checks the components and combines them as
/// `cross + lambda * (lmmd_external + lmmd_fused + diff)`.
pub fn combine_losses(
    cross: f64,
    lmmd_external: f64,
    lmmd_fused: f64,
    diff: f64,
    lambda: f64,
) -> Result<LossBreakdown> {
    for (name, v) in [
        ("cross-entropy", cross),
        ("external discrepancy", lmmd_external),
        ("fused discrepancy", lmmd_fused),
        ("classifier discrepancy", diff),
        ("lambda", lambda),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss term")));
        }
    }
    Ok(LossBreakdown {
        cross,
        lmmd_external,
        lmmd_fused,
        diff,
        lambda,
        total: cross + lambda * (lmmd_external + lmmd_fused + diff),
    })
}

fn mean_of(tape: &mut Tape, xs: &[Var]) -> Var {
    let s = tape.sum_scalars(xs);
    tape.scale(s, 1.0 / xs.len() as f64)
}

/// Records the full objective. Pass `detached` to reuse previously measured
/// target weights (for finite-difference checks); the
/// statistics actually used are returned.
pub fn objective(
    tape: &mut Tape,
    pairs: &[PairVars],
    labels: &[&[usize]],
    lambda: f64,
    kernel: &KernelConfig,
    detached: Option<&DetachedStats>,
) -> Result<(LossVars, DetachedStats)> {
    kernel.validate()?;
    if pairs.is_empty() || labels.len() != pairs.len() {
        return Err(Error::Shape(format!(
            "{} label sets for {} pairs",
            labels.len(),
            pairs.len()
        )));
    }
    let mut ce = Vec::new();
    let mut lm_ex = Vec::new();
    let mut lm_fu = Vec::new();
    let mut stats = DetachedStats {
        target_weights: Vec::new(),
    };
    for (j, (p, y)) in pairs.iter().zip(labels).enumerate() {
        ce.push(cross_entropy(tape, p.prob_src, y)?);
        let k = tape.value(p.prob_src).ncols();
        let ws = class_weights_from_labels(y, k)?;
        let wt = match detached {
            Some(d) => d.target_weights[j].clone(),
            None => class_weights_from_soft(tape.value(p.prob_tgt))?,
        };
        let bw_ex = training_bandwidth(kernel, tape.value(p.external_src), tape.value(p.external_tgt));
        let bw_fu = training_bandwidth(kernel, tape.value(p.fused_src), tape.value(p.fused_tgt));
        lm_ex.push(lmmd_loss(tape, p.external_src, p.external_tgt, &ws, &wt, &kernel.multipliers, bw_ex.as_ref())?);
        lm_fu.push(lmmd_loss(tape, p.fused_src, p.fused_tgt, &ws, &wt, &kernel.multipliers, bw_fu.as_ref())?);
        stats.target_weights.push(wt);
    }
    let cross = tape.sum_scalars(&ce);
    let lmmd_external = mean_of(tape, &lm_ex);
    let lmmd_fused = mean_of(tape, &lm_fu);
    let diff = if pairs.len() >= 2 {
        let tgt_probs: Vec<Var> = pairs.iter().map(|p| p.prob_tgt).collect();
        classifier_discrepancy(tape, &tgt_probs)?
    } else {
        tape.constant(Array2::zeros((1, 1)))
    };
    let reg = tape.sum_scalars(&[lmmd_external, lmmd_fused, diff]);
    let reg = tape.scale(reg, lambda);
    let total = tape.add(cross, reg);
    Ok((
        LossVars {
            cross,
            lmmd_external,
            lmmd_fused,
            diff,
            total,
        },
        stats,
    ))
}

fn constant_pairs(tape: &mut Tape, acts: &[PairActivations]) -> Vec<PairVars> {
    acts.iter()
        .map(|a| PairVars {
            internal_src: tape.constant(a.internal_src.clone()),
            internal_tgt: tape.constant(a.internal_tgt.clone()),
            external_src: tape.constant(a.external_src.clone()),
            external_tgt: tape.constant(a.external_tgt.clone()),
            fused_src: tape.constant(a.fused_src.clone()),
            fused_tgt: tape.constant(a.fused_tgt.clone()),
            prob_src: tape.constant(a.prob_src.clone()),
            prob_tgt: tape.constant(a.prob_tgt.clone()),
        })
        .collect()
}

/// Sum over sources of the mean source cross-entropy.
pub fn cross_entropy_total(acts: &[PairActivations], labels: &[&[usize]]) -> Result<f64> {
    if acts.len() != labels.len() {
        return Err(Error::Shape(format!("{} label sets for {} pairs", labels.len(), acts.len())));
    }
    let mut tape = Tape::new();
    let mut total = 0.0;
    for (a, y) in acts.iter().zip(labels) {
        let p = tape.constant(a.prob_src.clone());
        let ce = cross_entropy(&mut tape, p, y)?;
        total += tape.scalar(ce);
    }
    Ok(total)
}

/// Classifier discrepancy over the target probabilities of every pair.
pub fn target_discrepancy(acts: &[PairActivations]) -> Result<f64> {
    let mut tape = Tape::new();
    let probs: Vec<Var> = acts.iter().map(|a| tape.constant(a.prob_tgt.clone())).collect();
    let d = classifier_discrepancy(&mut tape, &probs)?;
    Ok(tape.scalar(d))
}

/// Objective evaluated on stored activations.
pub fn total_loss(
    acts: &[PairActivations],
    labels: &[&[usize]],
    lambda: f64,
    kernel: &KernelConfig,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let pairs = constant_pairs(&mut tape, acts);
    let (vars, _) = objective(&mut tape, &pairs, labels, lambda, kernel, None)?;
    let b = vars.breakdown(&tape, lambda);
    combine_losses(b.cross, b.lmmd_external, b.lmmd_fused, b.diff, lambda)
}
