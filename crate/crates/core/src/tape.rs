//! A small reverse-mode autodiff tape over dense row-major matrices.
//!
//! Every value is an `Array2<f64>`; scalars are 1x1. Nodes are appended in
//! evaluation order, so a single reverse sweep yields all gradients.

use ndarray::{Array2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Mask(Var, Array2<f64>),
    Reshape(Var),
    SpatialMean {
        x: Var,
        spatial: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        tokens: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    CrossEntropy {
        probs: Var,
        targets: Array2<f64>,
        floor: f64,
    },
    MeanAbsDiff(Var, Var),
    WeightedSum(Var, Array2<f64>),
    /// Loss node whose partial derivatives were computed during the forward
    /// pass (used for the kernel discrepancy).
    Precomputed {
        inputs: Vec<(Var, Array2<f64>)>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub len: usize,
    pub ksize: usize,
}

impl ConvGeom {
    fn pad(&self) -> usize {
        (self.ksize - 1) / 2
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    param_of: Vec<Option<ParamId>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Accumulated gradient per parameter (a parameter may appear on the tape
    /// several times). Parameters not reached get zeros.
    pub fn params(&self, store: &ParamStore) -> Vec<Array2<f64>> {
        let mut out: Vec<Array2<f64>> = store
            .iter()
            .map(|p| Array2::zeros(p.value.raw_dim()))
            .collect();
        for (g, pid) in self.grads.iter().zip(&self.param_of) {
            if let (Some(g), Some(pid)) = (g, pid) {
                out[pid.0] += g;
            }
        }
        out
    }
}

fn colsum(g: &Array2<f64>) -> Array2<f64> {
    g.sum_axis(Axis(0)).insert_axis(Axis(0))
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A differentiable input that is not a parameter.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// `a + row`, broadcasting a 1xD row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let (xhat, inv_std) = normalize_rows(self.value(x));
        let rg = self.rg(x);
        self.push(
            xhat.clone(),
            Op::LayerNorm { x, xhat, inv_std },
            rg,
        )
    }

    /// Normalizes each column with the batch statistics (no affine part).
    /// Returns the variable along with the batch mean and biased variance.
    pub fn batch_norm(&mut self, x: Var) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let n = xv.nrows() as f64;
        let mean: Vec<f64> = xv.mean_axis(Axis(0)).unwrap().to_vec();
        let var: Vec<f64> = xv
            .columns()
            .into_iter()
            .zip(&mean)
            .map(|(c, m)| c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
            .collect();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut xhat = xv.clone();
        for (mut col, (m, is)) in xhat.columns_mut().into_iter().zip(mean.iter().zip(&inv_std)) {
            col.mapv_inplace(|v| (v - m) * is);
        }
        let rg = self.rg(x);
        let out = self.push(
            xhat.clone(),
            Op::BatchNorm { x, xhat, inv_std },
            rg,
        );
        (out, mean, var)
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask(&mut self, a: Var, mask: Array2<f64>) -> Var {
        let v = self.value(a) * &mask;
        let rg = self.rg(a);
        self.push(v, Op::Mask(a, mask), rg)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape size mismatch");
        let data: Vec<f64> = src.iter().copied().collect();
        let v = Array2::from_shape_vec((rows, cols), data).unwrap();
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    /// Global average pooling over the spatial positions of a
    /// `(batch, channels * spatial)` channel-major layout.
    pub fn spatial_mean(&mut self, x: Var, spatial: usize) -> Var {
        let xv = self.value(x);
        let ch = xv.ncols() / spatial;
        let mut v = Array2::zeros((xv.nrows(), ch));
        for (mut out, row) in v.rows_mut().into_iter().zip(xv.rows()) {
            for c in 0..ch {
                out[c] = (0..spatial).map(|s| row[c * spatial + s]).sum::<f64>() / spatial as f64;
            }
        }
        let rg = self.rg(x);
        self.push(v, Op::SpatialMean { x, spatial }, rg)
    }

    /// Scaled dot-product self-attention. `q`, `k`, `v` are
    /// `(batch * tokens, dim)`; heads split the feature axis.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, tokens: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let rows = qv.nrows();
        let dim = qv.ncols();
        assert_eq!(rows % tokens, 0);
        assert_eq!(dim % heads, 0);
        let batch = rows / tokens;
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (qv.as_standard_layout(), kv.as_standard_layout(), vv.as_standard_layout());
        let (qs, ks, vs) = (qs.as_slice().unwrap(), ks.as_slice().unwrap(), vs.as_slice().unwrap());
        let mut probs = vec![0.0; batch * heads * tokens * tokens];
        let mut out = vec![0.0; rows * dim];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * tokens * tokens;
                let p = &mut probs[base..base + tokens * tokens];
                let head = |r: usize| {
                    let start = (b * tokens + r) * dim + h * dh;
                    start..start + dh
                };
                for i in 0..tokens {
                    let qi = &qs[head(i)];
                    let prow = &mut p[i * tokens..(i + 1) * tokens];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let s: f64 = qi.iter().zip(&ks[head(j)]).map(|(a, c)| a * c).sum::<f64>() * scale;
                        *pj = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0;
                    for pj in prow.iter_mut() {
                        *pj = (*pj - mx).exp();
                        z += *pj;
                    }
                    for pj in prow.iter_mut() {
                        *pj /= z;
                    }
                    let r = head(i);
                    let orow = &mut out[r];
                    for (j, &pj) in prow.iter().enumerate() {
                        for (o, &vd) in orow.iter_mut().zip(&vs[head(j)]) {
                            *o += pj * vd;
                        }
                    }
                }
            }
        }
        let out = Array2::from_shape_vec((rows, dim), out).unwrap();
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                tokens,
                heads,
                probs,
            },
            rg,
        )
    }

    /// 1-D convolution, stride 1, "same" zero padding, with bias.
    /// `x` is `(batch, in_ch * len)`, `w` is `(out_ch, in_ch * ksize)`,
    /// `b` is `(1, out_ch)`; output is `(batch, out_ch * len)`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.ncols(), geom.in_ch * geom.len, "conv input width");
        assert_eq!(wv.dim(), (geom.out_ch, geom.in_ch * geom.ksize), "conv weight shape");
        let cols = im2col(xv, geom);
        let mut mat = cols.dot(&wv.t());
        mat += &bv.row(0);
        let out = from_position_major(&mat, xv.nrows(), geom);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Conv1d { x, w, b, geom }, rg)
    }

    /// Mean negative log-likelihood of `targets` (rows of class weights, usually
    /// one-hot) under `probs`, with probabilities floored at `floor`.
    pub fn cross_entropy(&mut self, probs: Var, targets: Array2<f64>, floor: f64) -> Var {
        let p = self.value(probs);
        assert_eq!(p.dim(), targets.dim(), "cross-entropy shape");
        let n = p.nrows().max(1) as f64;
        let mut total = 0.0;
        Zip::from(p).and(&targets).for_each(|&pv, &y| {
            if y != 0.0 {
                total -= y * pv.max(floor).ln();
            }
        });
        let rg = self.rg(probs);
        self.push(
            Array2::from_elem((1, 1), total / n),
            Op::CrossEntropy {
                probs,
                targets,
                floor,
            },
            rg,
        )
    }

    /// Mean of |a - b| over all entries.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let d = self.value(a) - self.value(b);
        let v = d.mapv(f64::abs).mean().unwrap_or(0.0);
        let rg = self.rg(a) || self.rg(b);
        self.push(Array2::from_elem((1, 1), v), Op::MeanAbsDiff(a, b), rg)
    }

    /// `sum(a * weights)`, a scalar.
    pub fn weighted_sum(&mut self, a: Var, weights: Array2<f64>) -> Var {
        let v = (self.value(a) * &weights).sum();
        let rg = self.rg(a);
        self.push(Array2::from_elem((1, 1), v), Op::WeightedSum(a, weights), rg)
    }

    /// Scalar node with externally supplied partial derivatives.
    pub fn precomputed(&mut self, value: f64, inputs: Vec<(Var, Array2<f64>)>) -> Var {
        for (v, g) in &inputs {
            assert_eq!(self.value(*v).dim(), g.dim(), "precomputed gradient shape");
        }
        let rg = inputs.iter().any(|(v, _)| self.rg(*v));
        self.push(Array2::from_elem((1, 1), value), Op::Precomputed { inputs }, rg)
    }

    pub fn sum_scalars(&mut self, xs: &[Var]) -> Var {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        acc
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).dim(), (1, 1), "backward needs a scalar output");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            let acc = |grads: &mut Vec<Option<Array2<f64>>>, v: Var, d: Array2<f64>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Constant | Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -&g);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        acc(&mut grads, *row, colsum(&g));
                    }
                    acc(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, row) => {
                    if self.rg(*row) {
                        acc(&mut grads, *row, colsum(&(&g * self.value(*a))));
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, &g * self.value(*row));
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::Relu(a) => {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(self.value(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0
                            }
                        });
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let s = &node.value;
                    let d = &g * &s.mapv(|s| s * (1.0 - s));
                    acc(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let p = &node.value;
                    let mut d = &g * p;
                    for (mut drow, prow) in d.rows_mut().into_iter().zip(p.rows()) {
                        let s = drow.sum();
                        Zip::from(&mut drow).and(&prow).for_each(|dv, &pv| *dv -= pv * s);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm { x, xhat, inv_std } => {
                    let d = norm_backward_rows(&g, xhat, inv_std);
                    acc(&mut grads, *x, d);
                }
                Op::BatchNorm { x, xhat, inv_std } => {
                    let gt = g.t().as_standard_layout().into_owned();
                    let xt = xhat.t().as_standard_layout().into_owned();
                    let d = norm_backward_rows(&gt, &xt, inv_std)
                        .t()
                        .as_standard_layout()
                        .into_owned();
                    acc(&mut grads, *x, d);
                }
                Op::Mask(a, m) => acc(&mut grads, *a, &g * m),
                Op::Reshape(a) => {
                    let shape = self.value(*a).raw_dim();
                    let data: Vec<f64> = g.iter().copied().collect();
                    acc(&mut grads, *a, Array2::from_shape_vec(shape, data).unwrap());
                }
                Op::SpatialMean { x, spatial } => {
                    let shape = self.value(*x).raw_dim();
                    let mut d = Array2::zeros(shape);
                    for (mut drow, grow) in d.rows_mut().into_iter().zip(g.rows()) {
                        for (c, &gv) in grow.iter().enumerate() {
                            for s in 0..*spatial {
                                drow[c * spatial + s] = gv / *spatial as f64;
                            }
                        }
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    tokens,
                    heads,
                    probs,
                } => {
                    let (dq, dk, dv) = attention_backward(
                        &g,
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        *tokens,
                        *heads,
                        probs,
                    );
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::Conv1d { x, w, b, geom } => {
                    let (dx, dw, db) =
                        conv1d_backward(&g, self.value(*x), self.value(*w), *geom);
                    if self.rg(*x) {
                        acc(&mut grads, *x, dx);
                    }
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::CrossEntropy {
                    probs,
                    targets,
                    floor,
                } => {
                    let p = self.value(*probs);
                    let n = p.nrows().max(1) as f64;
                    let up = g[[0, 0]];
                    let mut d = Array2::zeros(p.raw_dim());
                    Zip::from(&mut d).and(p).and(targets).for_each(|d, &pv, &y| {
                        if y != 0.0 && pv >= *floor {
                            *d = -up * y / (pv * n);
                        }
                    });
                    acc(&mut grads, *probs, d);
                }
                Op::MeanAbsDiff(a, b) => {
                    let diff = self.value(*a) - self.value(*b);
                    let cnt = diff.len().max(1) as f64;
                    let up = g[[0, 0]];
                    let d = diff.mapv(|x| {
                        if x > 0.0 {
                            up / cnt
                        } else if x < 0.0 {
                            -up / cnt
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *b, -&d);
                    acc(&mut grads, *a, d);
                }
                Op::WeightedSum(a, w) => acc(&mut grads, *a, w * g[[0, 0]]),
                Op::Precomputed { inputs } => {
                    let up = g[[0, 0]];
                    for (v, d) in inputs {
                        acc(&mut grads, *v, d * up);
                    }
                }
            }
            grads[idx] = Some(g);
        }

        let param_of = self
            .nodes
            .iter()
            .map(|n| match n.op {
                Op::Param(id) => Some(id),
                _ => None,
            })
            .collect();
        Gradients { grads, param_of }
    }
}

fn normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Vec<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let m = row.sum() / d;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        row.mapv_inplace(|v| (v - m) * is);
        inv_std.push(is);
    }
    (xhat, inv_std)
}

/// Backward of per-row standardization.
fn norm_backward_rows(g: &Array2<f64>, xhat: &Array2<f64>, inv_std: &[f64]) -> Array2<f64> {
    let d = g.ncols() as f64;
    let mut out = Array2::zeros(g.raw_dim());
    for (((mut orow, grow), xrow), &is) in out
        .rows_mut()
        .into_iter()
        .zip(g.rows())
        .zip(xhat.rows())
        .zip(inv_std)
    {
        let mg = grow.sum() / d;
        let mgx = grow.iter().zip(xrow.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        for ((o, &gv), &xv) in orow.iter_mut().zip(grow.iter()).zip(xrow.iter()) {
            *o = is * (gv - mg - xv * mgx);
        }
    }
    out
}

fn attention_backward(
    g: &Array2<f64>,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    tokens: usize,
    heads: usize,
    probs: &[f64],
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let rows = q.nrows();
    let dim = q.ncols();
    let batch = rows / tokens;
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (gs, qs, ks, vs) = (
        g.as_standard_layout(),
        q.as_standard_layout(),
        k.as_standard_layout(),
        v.as_standard_layout(),
    );
    let (gs, qs, ks, vs) = (
        gs.as_slice().unwrap(),
        qs.as_slice().unwrap(),
        ks.as_slice().unwrap(),
        vs.as_slice().unwrap(),
    );
    let mut dq = vec![0.0; rows * dim];
    let mut dk = vec![0.0; rows * dim];
    let mut dv = vec![0.0; rows * dim];
    let mut dp = vec![0.0; tokens];
    for b in 0..batch {
        for h in 0..heads {
            let base = (b * heads + h) * tokens * tokens;
            let p = &probs[base..base + tokens * tokens];
            let head = |r: usize| {
                let start = (b * tokens + r) * dim + h * dh;
                start..start + dh
            };
            for i in 0..tokens {
                let gi = &gs[head(i)];
                let prow = &p[i * tokens..(i + 1) * tokens];
                for j in 0..tokens {
                    dp[j] = gi.iter().zip(&vs[head(j)]).map(|(a, c)| a * c).sum();
                    let pij = prow[j];
                    for (d, &gd) in dv[head(j)].iter_mut().zip(gi) {
                        *d += pij * gd;
                    }
                }
                let dot: f64 = prow.iter().zip(&dp).map(|(a, c)| a * c).sum();
                for j in 0..tokens {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for (d, &kd) in dq[head(i)].iter_mut().zip(&ks[head(j)]) {
                        *d += ds * kd;
                    }
                    for (d, &qd) in dk[head(j)].iter_mut().zip(&qs[head(i)]) {
                        *d += ds * qd;
                    }
                }
            }
        }
    }
    let shape = (rows, dim);
    let dq = Array2::from_shape_vec(shape, dq).unwrap();
    let dk = Array2::from_shape_vec(shape, dk).unwrap();
    let dv = Array2::from_shape_vec(shape, dv).unwrap();
    (dq, dk, dv)
}

/// Patch matrix with one row per (sample, position) and columns
/// `c * ksize + t`, zero where the window leaves the signal.
fn im2col(x: &Array2<f64>, geom: ConvGeom) -> Array2<f64> {
    let pad = geom.pad() as isize;
    let mut cols = Array2::zeros((x.nrows() * geom.len, geom.in_ch * geom.ksize));
    for (n, xrow) in x.rows().into_iter().enumerate() {
        for l in 0..geom.len {
            let mut crow = cols.row_mut(n * geom.len + l);
            for c in 0..geom.in_ch {
                for t in 0..geom.ksize {
                    let pos = l as isize + t as isize - pad;
                    if pos >= 0 && pos < geom.len as isize {
                        crow[c * geom.ksize + t] = xrow[c * geom.len + pos as usize];
                    }
                }
            }
        }
    }
    cols
}

/// `(batch * len, out_ch)` to `(batch, out_ch * len)`.
fn from_position_major(mat: &Array2<f64>, batch: usize, geom: ConvGeom) -> Array2<f64> {
    if geom.len == 1 {
        return mat.clone();
    }
    let mut out = Array2::zeros((batch, geom.out_ch * geom.len));
    for n in 0..batch {
        for l in 0..geom.len {
            for o in 0..geom.out_ch {
                out[[n, o * geom.len + l]] = mat[[n * geom.len + l, o]];
            }
        }
    }
    out
}

fn conv1d_backward(
    g: &Array2<f64>,
    x: &Array2<f64>,
    w: &Array2<f64>,
    geom: ConvGeom,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let batch = x.nrows();
    let gmat = if geom.len == 1 {
        g.clone()
    } else {
        let mut m = Array2::zeros((batch * geom.len, geom.out_ch));
        for n in 0..batch {
            for l in 0..geom.len {
                for o in 0..geom.out_ch {
                    m[[n * geom.len + l, o]] = g[[n, o * geom.len + l]];
                }
            }
        }
        m
    };
    let cols = im2col(x, geom);
    let dw = gmat.t().dot(&cols);
    let db = gmat.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dcols = gmat.dot(w);
    let pad = geom.pad() as isize;
    let mut dx = Array2::zeros(x.raw_dim());
    for (n, mut dxrow) in dx.rows_mut().into_iter().enumerate() {
        for l in 0..geom.len {
            let crow = dcols.row(n * geom.len + l);
            for c in 0..geom.in_ch {
                for t in 0..geom.ksize {
                    let pos = l as isize + t as isize - pad;
                    if pos >= 0 && pos < geom.len as isize {
                        dxrow[c * geom.len + pos as usize] += crow[c * geom.ksize + t];
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Array2<f64>) {
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let out = build(&mut t, x);
        let grads = t.backward(out);
        let analytic = grads.wrt(x).unwrap().clone();
        let h = 1e-6;
        for idx in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.as_slice_mut().unwrap()[idx] += delta;
                let mut t = Tape::new();
                let x = t.leaf(xp);
                let o = build(&mut t, x);
                t.scalar(o)
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!(
                (a - num).abs() <= 1e-6 * (1.0 + a.abs().max(num.abs())),
                "entry {idx}: analytic {a} numeric {num}"
            );
        }
    }

    fn probe(rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.5)
    }

    #[test]
    fn elementary_ops() {
        let x0 = array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.6]];
        fd_check(
            |t, x| {
                let s = t.sigmoid(x);
                let sm = t.softmax_rows(s);
                let ln = t.layer_norm(x);
                let m = t.mul(sm, ln);
                t.weighted_sum(m, probe(2, 3))
            },
            x0.clone(),
        );
        fd_check(
            |t, x| {
                let (bn, _, _) = t.batch_norm(x);
                let r = t.reshape(bn, 3, 2);
                t.weighted_sum(r, probe(3, 2))
            },
            x0,
        );
    }

    #[test]
    fn attention_op() {
        let x0 = Array2::from_shape_fn((6, 4), |(i, j)| ((i * 5 + j * 11) % 7) as f64 * 0.2 - 0.6);
        fd_check(
            |t, x| {
                let k = t.scale(x, 0.7);
                let a = t.attention(x, k, x, 3, 2);
                t.weighted_sum(a, probe(6, 4))
            },
            x0,
        );
    }

    #[test]
    fn conv_op_general_length() {
        let store = ParamStore::default();
        let _ = store;
        let geom = ConvGeom { in_ch: 2, out_ch: 3, len: 4, ksize: 3 };
        let x0 = probe(2, 8);
        let w0 = Array2::from_shape_fn((3, 6), |(i, j)| (i as f64 - j as f64) * 0.1);
        let w_for = w0.clone();
        fd_check(
            move |t, x| {
                let w = t.constant(w_for.clone());
                let b = t.constant(array![[0.1, -0.2, 0.3]]);
                let y = t.conv1d(x, w, b, geom);
                t.weighted_sum(y, probe(2, 12))
            },
            x0.clone(),
        );
        let x_for = x0;
        fd_check(
            move |t, w| {
                let x = t.constant(x_for.clone());
                let b = t.constant(array![[0.1, -0.2, 0.3]]);
                let y = t.conv1d(x, w, b, geom);
                t.weighted_sum(y, probe(2, 12))
            },
            w0,
        );
    }

    #[test]
    fn losses_ops() {
        let p0 = array![[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]];
        fd_check(
            |t, p| t.cross_entropy(p, array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]], 1e-12),
            p0.clone(),
        );
        fd_check(
            |t, p| {
                let c = t.constant(array![[0.1, 0.9, 0.0], [0.3, 0.3, 0.4]]);
                t.mean_abs_diff(p, c)
            },
            p0,
        );
    }

    #[test]
    fn shared_use_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(array![[2.0]]);
        let y = t.mul(x, x);
        let g = t.backward(y);
        assert_eq!(g.wrt(x).unwrap()[[0, 0]], 4.0);
    }
}
