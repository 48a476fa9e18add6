//! Central finite-difference verification of every differentiable block.
//!
//! Each check compares the tape gradient with `(f(x+h) - f(x-h)) / 2h` and
//! reports the block-normalized error `max|a - n| / max(max|a|, max|n|)`.
//! Target class weights are measured once at the base point and held fixed,
//! matching how they are treated in training; kernel bandwidths are
//! recomputed at every evaluation since training differentiates through
//! them. Dropout
//! masks are regenerated from the same seed for every evaluation.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lmmd::{class_weights_from_labels, class_weights_from_soft, KernelConfig};
use crate::losses::{lmmd_loss, objective, training_bandwidth, DetachedStats, LossVars};
use crate::network::{ArchConfig, Ctx, Mode, Model};
use crate::tape::{Tape, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Relative change applied to the analytic gradient of a corrupted block.
const CORRUPTION: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockCheck {
    pub block: String,
    pub max_rel_err: f64,
    pub entries: usize,
}

impl BlockCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < FD_TOLERANCE
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockCheck>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed())
    }

    pub fn get(&self, block: &str) -> Option<&BlockCheck> {
        self.blocks.iter().find(|b| b.block == block)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for b in &self.blocks {
            s.push_str(&format!(
                "{:<28} {:>6} entries  max rel err {:.3e}  {}\n",
                b.block,
                b.entries,
                b.max_rel_err,
                if b.passed() { "PASS" } else { "FAIL" }
            ));
        }
        s
    }
}

fn block_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Report group of a parameter name.
pub fn block_of(name: &str) -> &'static str {
    let head = name.split('.').next().unwrap_or("");
    let second = name.split('.').nth(1).unwrap_or("");
    match head.chars().next() {
        Some('S') if second.starts_with("block") => "shared attention",
        Some('S') => "shared mlp",
        Some('G') if second.starts_with("block") => "external attention",
        Some('G') => "external mlp",
        Some('P') => "internal conv",
        Some('F') => "iaff fusion",
        Some('C') => "classifier",
        _ => "other",
    }
}

struct Problem {
    sources: Vec<Array2<f64>>,
    labels: Vec<Vec<usize>>,
    target: Array2<f64>,
    lambda: f64,
    kernel: KernelConfig,
    dropout_seed: u64,
}

impl Problem {
    fn random(arch: &ArchConfig, rows: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut mat = |r: usize| Array2::from_shape_simple_fn((r, arch.input_dim()), || rng.gen_range(-1.0..1.0));
        let sources: Vec<_> = (0..arch.num_sources).map(|_| mat(rows)).collect();
        let target = mat(rows + 1);
        let labels = (0..arch.num_sources)
            .map(|_| (0..rows).map(|i| i % arch.num_classes).collect())
            .collect();
        Problem {
            sources,
            labels,
            target,
            lambda: 1.3,
            kernel: KernelConfig::default(),
            dropout_seed: 17,
        }
    }

    fn run(&self, model: &Model, detached: Option<&DetachedStats>) -> Result<(Tape, LossVars, DetachedStats)> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(Mode::Train, self.dropout_seed);
        let src: Vec<Var> = self.sources.iter().map(|x| tape.constant(x.clone())).collect();
        let tgt = tape.constant(self.target.clone());
        let pairs = model.model_forward(&mut tape, &mut ctx, &src, tgt)?;
        let labels: Vec<&[usize]> = self.labels.iter().map(|l| l.as_slice()).collect();
        let (vars, stats) = objective(&mut tape, &pairs, &labels, self.lambda, &self.kernel, detached)?;
        Ok((tape, vars, stats))
    }
}

fn terms(tape: &Tape, v: &LossVars) -> [f64; 5] {
    [
        tape.scalar(v.cross),
        tape.scalar(v.lmmd_external),
        tape.scalar(v.lmmd_fused),
        tape.scalar(v.diff),
        tape.scalar(v.total),
    ]
}

const TERM_BLOCKS: [&str; 5] = [
    "loss: cross-entropy",
    "loss: lmmd external",
    "loss: lmmd fused",
    "loss: classifier diff",
    "loss: total",
];

/// Checks every parameter block against the total objective and each loss
/// term against all parameters.
fn check_parameters(model: &mut Model, problem: &Problem, corrupt: Option<&str>) -> Result<Vec<BlockCheck>> {
    let (tape, vars, stats) = problem.run(model, None)?;
    let outs = [vars.cross, vars.lmmd_external, vars.lmmd_fused, vars.diff, vars.total];
    let analytic: Vec<Vec<Array2<f64>>> = outs
        .iter()
        .map(|&o| tape.backward(o).params(model.store()))
        .collect();
    drop(tape);

    let nparams = model.store().len();
    let mut numeric: Vec<Vec<Array2<f64>>> = (0..5)
        .map(|_| model.store().iter().map(|p| Array2::zeros(p.value.raw_dim())).collect())
        .collect();
    for pi in 0..nparams {
        let len = model.store().get(crate::params::ParamId(pi)).value.len();
        for e in 0..len {
            let orig = model.store().get(crate::params::ParamId(pi)).value.as_slice().unwrap()[e];
            let at = |v: f64, model: &mut Model| -> Result<[f64; 5]> {
                model.store_mut().get_mut(crate::params::ParamId(pi)).value.as_slice_mut().unwrap()[e] = v;
                let (t, vs, _) = problem.run(model, Some(&stats))?;
                Ok(terms(&t, &vs))
            };
            let plus = at(orig + FD_STEP, model)?;
            let minus = at(orig - FD_STEP, model)?;
            at(orig, model)?;
            for (t, blocks) in numeric.iter_mut().enumerate() {
                blocks[pi].as_slice_mut().unwrap()[e] = (plus[t] - minus[t]) / (2.0 * FD_STEP);
            }
        }
    }

    let names: Vec<String> = model.store().iter().map(|p| p.name.clone()).collect();
    let mut groups: Vec<&'static str> = Vec::new();
    for n in &names {
        let g = block_of(n);
        if !groups.contains(&g) {
            groups.push(g);
        }
    }
    let mut out = Vec::new();
    let factor = |block: &str| if corrupt == Some(block) { 1.0 + CORRUPTION } else { 1.0 };
    for g in groups {
        let mut a = Vec::new();
        let mut n = Vec::new();
        for (pi, name) in names.iter().enumerate() {
            if block_of(name) == g {
                a.extend(analytic[4][pi].iter().map(|v| v * factor(g)));
                n.extend(numeric[4][pi].iter().copied());
            }
        }
        out.push(BlockCheck {
            block: g.to_string(),
            max_rel_err: block_error(&a, &n),
            entries: a.len(),
        });
    }
    for (t, name) in TERM_BLOCKS.iter().enumerate() {
        let a: Vec<f64> = analytic[t].iter().flat_map(|g| g.iter().map(|v| v * factor(name))).collect();
        let n: Vec<f64> = numeric[t].iter().flat_map(|g| g.iter().copied()).collect();
        out.push(BlockCheck {
            block: name.to_string(),
            max_rel_err: block_error(&a, &n),
            entries: a.len(),
        });
    }
    Ok(out)
}

/// Finite-difference check of a scalar function of several input matrices.
fn check_inputs(
    block: &str,
    inputs: &[Array2<f64>],
    corrupt: Option<&str>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<BlockCheck> {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &leaves)?;
    let grads = tape.backward(out);
    let factor = if corrupt == Some(block) { 1.0 + CORRUPTION } else { 1.0 };
    let mut a = Vec::new();
    let mut n = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        let g = grads
            .wrt(leaves[i])
            .cloned()
            .unwrap_or_else(|| Array2::zeros(x.raw_dim()));
        a.extend(g.iter().map(|v| v * factor));
        for e in 0..x.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut moved = inputs.to_vec();
                moved[i].as_slice_mut().unwrap()[e] += delta;
                let mut t = Tape::new();
                let ls: Vec<Var> = moved.into_iter().map(|m| t.leaf(m)).collect();
                let o = f(&mut t, &ls)?;
                Ok(t.scalar(o))
            };
            n.push((eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP));
        }
    }
    Ok(BlockCheck {
        block: block.to_string(),
        max_rel_err: block_error(&a, &n),
        entries: a.len(),
    })
}

/// Small architecture used by the checks: 2 tokens of width 4, two sources.
pub fn gradcheck_arch() -> ArchConfig {
    let mut a = ArchConfig::tiny();
    a.dropout = 0.1;
    a
}

/// Runs every check. `corrupt` names a block whose analytic gradient is
/// deliberately perturbed (used to test the harness itself).
pub fn run_gradcheck(arch: &ArchConfig, seed: u64, corrupt: Option<&str>) -> Result<GradcheckReport> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(arch.clone(), seed)?;
    // Move biases and normalization affines off their initial values: a zero
    // bias behind an all-zero input sits exactly on a ReLU kink, where central
    // differences are not meaningful.
    for p in model.store_mut().iter_mut() {
        if p.name.contains(".bn") || p.name.ends_with(".b") || p.name.ends_with(".beta") || p.name.ends_with(".gamma") {
            p.value.mapv_inplace(|v| v + rng.gen_range(-0.3..0.3));
        }
    }
    let problem = Problem::random(arch, 4, &mut rng);
    let mut blocks = check_parameters(&mut model, &problem, corrupt)?;

    let width = arch.fused_width();
    let mut mat = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || rng.gen_range(-1.0..1.0));
    let x = mat(3, arch.input_dim());
    let wx = mat(3, arch.shared_widths[1]);
    let model_ref = &model;
    blocks.push(check_inputs("attention input", std::slice::from_ref(&x), corrupt, |t, v| {
        let mut ctx = Ctx::new(Mode::Train, 5);
        let y = model_ref.shared_forward(t, &mut ctx, v[0])?;
        Ok(t.weighted_sum(y, wx.clone()))
    })?);
    let s = mat(3, arch.shared_widths[1]);
    let wc = mat(3, width);
    blocks.push(check_inputs("conv input", &[s], corrupt, |t, v| {
        let y = model_ref.internal_preactivation(t, v[0], 0)?;
        Ok(t.weighted_sum(y, wc.clone()))
    })?);
    let f1 = mat(5, width);
    let f2 = mat(5, width);
    let wm = mat(5, width);
    blocks.push(check_inputs("ms-cam", std::slice::from_ref(&f1), corrupt, |t, v| {
        let mut ctx = Ctx::new(Mode::Train, 0);
        let (_, y) = model_ref.mscam_forward(t, &mut ctx, v[0], 0, 0)?;
        Ok(t.weighted_sum(y, wm.clone()))
    })?);
    blocks.push(check_inputs("iaff", &[f1, f2], corrupt, |t, v| {
        let mut ctx = Ctx::new(Mode::Train, 0);
        let y = model_ref.iaff_fuse(t, &mut ctx, v[0], v[1], 1)?;
        Ok(t.weighted_sum(y, wm.clone()))
    })?);
    let h = mat(4, width);
    let wk = mat(4, arch.num_classes);
    blocks.push(check_inputs("classifier input", &[h], corrupt, |t, v| {
        let (_, p) = model_ref.classifier_forward(t, v[0], 0)?;
        Ok(t.weighted_sum(p, wk.clone()))
    })?);

    let a = mat(6, 3);
    let b = mat(5, 3);
    let probs = {
        let mut p = mat(5, 3).mapv(f64::exp);
        for mut r in p.rows_mut() {
            let s = r.sum();
            r /= s;
        }
        p
    };
    let ws = class_weights_from_labels(&[0, 1, 2, 0, 1, 1], 3)?;
    let wt = class_weights_from_soft(&probs)?;
    let kernel = KernelConfig::default();
    blocks.push(check_inputs("lmmd", &[a, b], corrupt, |t, v| {
        let bw = training_bandwidth(&kernel, t.value(v[0]), t.value(v[1]));
        lmmd_loss(t, v[0], v[1], &ws, &wt, &kernel.multipliers, bw.as_ref())
    })?);

    if let Some(c) = corrupt {
        if !blocks.iter().any(|b| b.block == c) {
            return Err(Error::InvalidArgument(format!("no gradient block named {c:?}")));
        }
    }
    Ok(GradcheckReport { blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_names() {
        assert_eq!(block_of("S.block0.attn.q.w"), "shared attention");
        assert_eq!(block_of("S.fc1.w"), "shared mlp");
        assert_eq!(block_of("G2.block1.ffn.0.b"), "external attention");
        assert_eq!(block_of("P1.conv.w"), "internal conv");
        assert_eq!(block_of("F2.cam1.bn2.gamma"), "iaff fusion");
        assert_eq!(block_of("C1.fc2.w"), "classifier");
    }

    #[test]
    fn block_error_scale() {
        assert_eq!(block_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((block_error(&[1.0, 2.0], &[1.0, 2.02]) - 0.02 / 2.02).abs() < 1e-15);
    }
}
