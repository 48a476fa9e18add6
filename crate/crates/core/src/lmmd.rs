//! Class-weighted local maximum mean discrepancy with a multi-kernel
//! Gaussian family.
//!
//! For each class `k` the estimator compares the `k`-weighted kernel means of
//! the two domains:
//!
//! ```text
//! d_k = ws_k' Kss ws_k + wt_k' Ktt wt_k - 2 ws_k' Kst wt_k
//! ```
//!
//! and averages `d_k` over the classes that carry mass in both domains.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Columns whose total mass is below this are treated as absent.
pub const MASS_FLOOR: f64 = 1e-8;

/// Per-sample, per-class probability coefficients. Each column sums to 1, or
/// is all zero when the class is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    weights: Array2<f64>,
    present: Vec<bool>,
}

impl ClassWeights {
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    pub fn num_samples(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.ncols()
    }

    fn from_mass(mass: &Array2<f64>) -> Self {
        let mut weights = mass.clone();
        let mut present = Vec::with_capacity(mass.ncols());
        for mut col in weights.columns_mut() {
            let total = col.sum();
            if total < MASS_FLOOR {
                col.fill(0.0);
                present.push(false);
            } else {
                col.mapv_inplace(|v| v / total);
                present.push(true);
            }
        }
        ClassWeights { weights, present }
    }
}

/// Weights from one-hot label rows.
pub fn class_weights_from_onehot(labels: &Array2<f64>) -> Result<ClassWeights> {
    for (i, row) in labels.rows().into_iter().enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::InvalidArgument(format!("row {i} is not one-hot")));
        }
    }
    Ok(ClassWeights::from_mass(labels))
}

pub fn onehot(labels: &[usize], num_classes: usize) -> Array2<f64> {
    let mut m = Array2::zeros((labels.len(), num_classes));
    for (i, &l) in labels.iter().enumerate() {
        m[[i, l]] = 1.0;
    }
    m
}

pub fn class_weights_from_labels(labels: &[usize], num_classes: usize) -> Result<ClassWeights> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} >= num_classes {num_classes}"
        )));
    }
    Ok(ClassWeights::from_mass(&onehot(labels, num_classes)))
}

/// Weights from soft predictions (rows are probability vectors).
pub fn class_weights_from_soft(probs: &Array2<f64>) -> Result<ClassWeights> {
    for (i, row) in probs.rows().into_iter().enumerate() {
        if row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "row {i} has a negative or non-finite probability"
            )));
        }
        let s = row.sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "row {i} sums to {s}, expected 1"
            )));
        }
    }
    Ok(ClassWeights::from_mass(probs))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandwidthBase {
    /// Median pairwise squared distance over the joined batch.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub multipliers: Vec<f64>,
    pub bandwidth: BandwidthBase,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            bandwidth: BandwidthBase::Median,
        }
    }
}

impl KernelConfig {
    pub fn fixed(bandwidth: f64) -> Self {
        KernelConfig {
            bandwidth: BandwidthBase::Fixed(bandwidth),
            ..Default::default()
        }
    }

    pub fn num_kernels(&self) -> usize {
        self.multipliers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.multipliers.is_empty() || self.multipliers.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::InvalidArgument(
                "kernel multipliers must be non-empty and positive".into(),
            ));
        }
        if let BandwidthBase::Fixed(b) = self.bandwidth {
            if !(b > 0.0) {
                return Err(Error::InvalidArgument(format!("fixed bandwidth {b} must be > 0")));
            }
        }
        Ok(())
    }

    /// Base bandwidth for the joined batch `a ∪ b`.
    pub fn resolve(&self, a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
        match self.bandwidth {
            BandwidthBase::Fixed(v) => Ok(v),
            BandwidthBase::Median => {
                let m = median_pairwise_sq_dist(a, b);
                if m > 0.0 && m.is_finite() {
                    Ok(m)
                } else {
                    Err(Error::ZeroBandwidth)
                }
            }
        }
    }
}

/// Squared Euclidean distances between rows of `a` and rows of `b`.
pub fn pairwise_sq_dists(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    // Direct differences rather than the |a|^2 + |b|^2 - 2ab expansion, which
    // loses precision for nearby points.
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| {
        a.row(i)
            .iter()
            .zip(b.row(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    })
}

fn joined(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching widths")
}

/// Median of the squared distances over all unordered pairs of distinct rows
/// of the joined batch. Zero when fewer than two rows.
pub fn median_pairwise_sq_dist(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let x = joined(a, b);
    let d = pairwise_sq_dists(&x, &x);
    let n = x.nrows();
    let mut vals = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            vals.push(d[[i, j]]);
        }
    }
    median(&mut vals)
}

fn median(vals: &mut [f64]) -> f64 {
    let n = vals.len();
    if n == 0 {
        return 0.0;
    }
    let mid = n / 2;
    let (_, hi, _) = vals.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let hi = *hi;
    if n % 2 == 1 {
        hi
    } else {
        let lo = vals[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}

/// Base bandwidth and where it comes from: `value` is `sum(w * D[p][q])` over
/// `pairs` (row indices into the joined batch), so the discrepancy can be
/// differentiated through it. Empty `pairs` means a constant.
#[derive(Debug, Clone, PartialEq)]
pub struct Bandwidth {
    pub value: f64,
    pub pairs: Vec<(usize, usize, f64)>,
}

impl Bandwidth {
    pub fn fixed(value: f64) -> Self {
        Bandwidth {
            value,
            pairs: Vec::new(),
        }
    }

    /// Median pairwise squared distance of the joined batch, tracking the
    /// pair (or the two middle pairs) that realize it.
    pub fn median(a: &Array2<f64>, b: &Array2<f64>) -> Self {
        let x = joined(a, b);
        let d = pairwise_sq_dists(&x, &x);
        let n = x.nrows();
        let mut vals = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                vals.push((d[[i, j]], i, j));
            }
        }
        if vals.is_empty() {
            return Bandwidth::fixed(0.0);
        }
        let odd = vals.len() % 2 == 1;
        let mid = vals.len() / 2;
        let (lower, &mut (hi, hi_i, hi_j), _) = vals.select_nth_unstable_by(mid, |a, b| a.0.total_cmp(&b.0));
        if odd {
            return Bandwidth {
                value: hi,
                pairs: vec![(hi_i, hi_j, 1.0)],
            };
        }
        let &(lo, lo_i, lo_j) = lower.iter().max_by(|a, b| a.0.total_cmp(&b.0)).unwrap();
        Bandwidth {
            value: 0.5 * (lo + hi),
            pairs: vec![(lo_i, lo_j, 0.5), (hi_i, hi_j, 0.5)],
        }
    }

    /// Mean of the positive pairwise squared distances; `None` when every
    /// row coincides.
    pub fn mean_positive(a: &Array2<f64>, b: &Array2<f64>) -> Option<Self> {
        let x = joined(a, b);
        let d = pairwise_sq_dists(&x, &x);
        let mut pairs = Vec::new();
        let mut sum = 0.0;
        for i in 0..x.nrows() {
            for j in i + 1..x.nrows() {
                let v = d[[i, j]];
                if v > 0.0 && v.is_finite() {
                    pairs.push((i, j, 1.0));
                    sum += v;
                }
            }
        }
        if pairs.is_empty() {
            return None;
        }
        let w = 1.0 / pairs.len() as f64;
        for p in &mut pairs {
            p.2 = w;
        }
        Some(Bandwidth {
            value: sum * w,
            pairs,
        })
    }
}

fn kernel_from_dists(d: &Array2<f64>, multipliers: &[f64], base: f64) -> Array2<f64> {
    let inv: Vec<f64> = multipliers.iter().map(|m| 1.0 / (m * base)).collect();
    d.mapv(|v| inv.iter().map(|iv| (-v * iv).exp()).sum())
}

/// Sum-of-Gaussians kernel matrix between rows of `a` and rows of `b`.
pub fn gaussian_kernel_matrix(
    a: &Array2<f64>,
    b: &Array2<f64>,
    cfg: &KernelConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "kernel inputs have widths {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let base = cfg.resolve(a, b)?;
    Ok(kernel_from_dists(&pairwise_sq_dists(a, b), &cfg.multipliers, base))
}

fn check_inputs(
    src: &Array2<f64>,
    tgt: &Array2<f64>,
    ws: &ClassWeights,
    wt: &ClassWeights,
) -> Result<()> {
    if src.ncols() != tgt.ncols() {
        return Err(Error::Shape(format!(
            "activation widths {} and {}",
            src.ncols(),
            tgt.ncols()
        )));
    }
    if ws.num_samples() != src.nrows() || wt.num_samples() != tgt.nrows() {
        return Err(Error::Shape("weight rows do not match activation rows".into()));
    }
    if ws.num_classes() != wt.num_classes() {
        return Err(Error::Shape(format!(
            "class counts {} and {}",
            ws.num_classes(),
            wt.num_classes()
        )));
    }
    if src.iter().chain(tgt.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("activations".into()));
    }
    Ok(())
}

fn valid_classes(ws: &ClassWeights, wt: &ClassWeights) -> Vec<usize> {
    (0..ws.num_classes())
        .filter(|&k| ws.present[k] && wt.present[k])
        .collect()
}

/// Value and partial derivatives of the estimator. Weights are held
/// constant; the gradient flows through the bandwidth's source pairs.
#[derive(Debug, Clone)]
pub struct LmmdEval {
    pub value: f64,
    pub grad_src: Array2<f64>,
    pub grad_tgt: Array2<f64>,
}

pub fn lmmd_with_grad(
    src: &Array2<f64>,
    tgt: &Array2<f64>,
    ws: &ClassWeights,
    wt: &ClassWeights,
    multipliers: &[f64],
    bandwidth: &Bandwidth,
) -> Result<LmmdEval> {
    check_inputs(src, tgt, ws, wt)?;
    let (m, n) = (src.nrows(), tgt.nrows());
    let classes = valid_classes(ws, wt);
    if classes.is_empty() {
        return Ok(LmmdEval {
            value: 0.0,
            grad_src: Array2::zeros(src.raw_dim()),
            grad_tgt: Array2::zeros(tgt.raw_dim()),
        });
    }
    // Signed coefficient columns: source weights over target weights negated.
    let mut w = Array2::zeros((m + n, classes.len()));
    for (c, &k) in classes.iter().enumerate() {
        for i in 0..m {
            w[[i, c]] = ws.weights[[i, k]];
        }
        for j in 0..n {
            w[[m + j, c]] = -wt.weights[[j, k]];
        }
    }
    let coeff = w.dot(&w.t()) / classes.len() as f64;
    let x = joined(src, tgt);
    let d = pairwise_sq_dists(&x, &x);
    let base = bandwidth.value;
    let inv: Vec<f64> = multipliers.iter().map(|mu| 1.0 / (mu * base)).collect();
    let mut value = 0.0;
    // d value / d base
    let mut dbase = 0.0;
    // c_pq = coeff_pq * dk/dD evaluated at D_pq
    let mut c = Array2::zeros(d.raw_dim());
    for ((idx, &dv), cv) in d.indexed_iter().zip(c.iter_mut()) {
        let mut kval = 0.0;
        let mut kder = 0.0;
        for &iv in &inv {
            let e = (-dv * iv).exp();
            kval += e;
            kder -= e * iv;
        }
        value += coeff[idx] * kval;
        dbase -= coeff[idx] * kder * dv / base;
        *cv = coeff[idx] * kder;
    }
    // c is indexed by ordered pairs, so each unordered source pair is split.
    for &(p, q, w) in &bandwidth.pairs {
        let g = 0.5 * dbase * w;
        c[[p, q]] += g;
        c[[q, p]] += g;
    }
    let rowsum = c.sum_axis(Axis(1));
    let mut grad = c.dot(&x) * -4.0;
    for (mut row, (xr, rs)) in grad.rows_mut().into_iter().zip(x.rows().into_iter().zip(rowsum.iter())) {
        row.scaled_add(4.0 * rs, &xr);
    }
    let grad_src = grad.slice(ndarray::s![..m, ..]).to_owned();
    let grad_tgt = grad.slice(ndarray::s![m.., ..]).to_owned();
    Ok(LmmdEval {
        value,
        grad_src,
        grad_tgt,
    })
}

/// Vectorized estimator.
pub fn lmmd_estimate(
    src: &Array2<f64>,
    tgt: &Array2<f64>,
    ws: &ClassWeights,
    wt: &ClassWeights,
    cfg: &KernelConfig,
) -> Result<f64> {
    cfg.validate()?;
    check_inputs(src, tgt, ws, wt)?;
    if valid_classes(ws, wt).is_empty() {
        return Ok(0.0);
    }
    let base = cfg.resolve(src, tgt)?;
    Ok(lmmd_with_grad(src, tgt, ws, wt, &cfg.multipliers, &Bandwidth::fixed(base))?.value)
}

/// Reference estimator: explicit loops over classes and sample pairs, with its
/// own sort-based median and per-coordinate distances.
pub fn lmmd_oracle(
    src: &Array2<f64>,
    tgt: &Array2<f64>,
    ws: &ClassWeights,
    wt: &ClassWeights,
    cfg: &KernelConfig,
) -> Result<f64> {
    cfg.validate()?;
    check_inputs(src, tgt, ws, wt)?;
    let sq = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        let mut s = 0.0;
        for i in 0..a.len() {
            s += (a[i] - b[i]) * (a[i] - b[i]);
        }
        s
    };
    let base = match cfg.bandwidth {
        BandwidthBase::Fixed(v) => v,
        BandwidthBase::Median => {
            let rows: Vec<_> = src.rows().into_iter().chain(tgt.rows()).collect();
            let mut all = Vec::new();
            for i in 0..rows.len() {
                for j in i + 1..rows.len() {
                    all.push(sq(rows[i], rows[j]));
                }
            }
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = all.len();
            let med = if n == 0 {
                0.0
            } else if n % 2 == 1 {
                all[n / 2]
            } else {
                (all[n / 2 - 1] + all[n / 2]) / 2.0
            };
            if !(med > 0.0) {
                return Err(Error::ZeroBandwidth);
            }
            med
        }
    };
    let k = |a, b| {
        let d = sq(a, b);
        cfg.multipliers
            .iter()
            .map(|mu| (-d / (mu * base)).exp())
            .sum::<f64>()
    };
    let (ws, wt) = (&ws.weights, &wt.weights);
    let mut total = 0.0;
    let mut used = 0usize;
    for class in 0..ws.ncols() {
        let ms: f64 = ws.column(class).sum();
        let mt: f64 = wt.column(class).sum();
        if ms < 0.5 || mt < 0.5 {
            continue;
        }
        used += 1;
        let mut ss = 0.0;
        for i in 0..src.nrows() {
            for j in 0..src.nrows() {
                ss += ws[[i, class]] * ws[[j, class]] * k(src.row(i), src.row(j));
            }
        }
        let mut tt = 0.0;
        for i in 0..tgt.nrows() {
            for j in 0..tgt.nrows() {
                tt += wt[[i, class]] * wt[[j, class]] * k(tgt.row(i), tgt.row(j));
            }
        }
        let mut st = 0.0;
        for i in 0..src.nrows() {
            for j in 0..tgt.nrows() {
                st += ws[[i, class]] * wt[[j, class]] * k(src.row(i), tgt.row(j));
            }
        }
        total += ss + tt - 2.0 * st;
    }
    Ok(if used == 0 { 0.0 } else { total / used as f64 })
}
