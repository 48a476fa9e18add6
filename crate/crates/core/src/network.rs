//! Forward computation of the three-stage model: a shared attention
//! extractor followed by per-pair convolutional heads, per-pair external
//! attention extractors, iterative attentional fusion and per-pair softmax
//! classifiers. All operations record onto a [`Tape`] so gradients come from
//! a single reverse sweep.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::tape::{ConvGeom, Tape, Var, NORM_EPS};

pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub num_sources: usize,
    pub num_classes: usize,
    /// One token per physical sensor.
    pub tokens: usize,
    pub token_dim: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward sublayer inside attention blocks.
    pub ffn_width: usize,
    pub depth_shared: usize,
    /// Attention depth of each external extractor, one entry per source.
    pub depth_external: Vec<usize>,
    /// Neuron counts of the two fully connected layers after the shared
    /// attention stack.
    pub shared_widths: [usize; 2],
    pub external_widths: [usize; 2],
    pub conv_kernel: usize,
    pub classifier_hidden: usize,
    pub mscam_reduction: usize,
    /// Dropout inside the attention blocks and after the first FC layer of
    /// the shared and external extractors.
    pub dropout: f64,
}

impl ArchConfig {
    /// 128 UCI features as 16 sensors x 8 features.
    pub fn uci(depth_shared: usize, depth_external: Vec<usize>, dropout: f64) -> Self {
        ArchConfig {
            num_sources: depth_external.len(),
            num_classes: 6,
            tokens: 16,
            token_dim: 8,
            heads: 4,
            ffn_width: 32,
            depth_shared,
            depth_external,
            shared_widths: [128, 128],
            external_widths: [128, 64],
            conv_kernel: 3,
            classifier_hidden: 25,
            mscam_reduction: 1,
            dropout,
        }
    }

    /// 40 E-nose features as 8 sensors x 5 features.
    pub fn enose(depth_shared: usize, depth_external: Vec<usize>, dropout: f64) -> Self {
        ArchConfig {
            num_sources: depth_external.len(),
            num_classes: 3,
            tokens: 8,
            token_dim: 5,
            heads: 1,
            ffn_width: 20,
            depth_shared,
            depth_external,
            shared_widths: [40, 32],
            external_widths: [40, 16],
            conv_kernel: 3,
            classifier_hidden: 10,
            mscam_reduction: 1,
            dropout,
        }
    }

    /// Small configuration for gradient checks and fast tests.
    pub fn tiny() -> Self {
        ArchConfig {
            num_sources: 2,
            num_classes: 3,
            tokens: 2,
            token_dim: 4,
            heads: 2,
            ffn_width: 6,
            depth_shared: 1,
            depth_external: vec![1, 1],
            shared_widths: [6, 5],
            external_widths: [6, 4],
            conv_kernel: 3,
            classifier_hidden: 5,
            mscam_reduction: 1,
            dropout: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.tokens * self.token_dim
    }

    /// Width of internal, external and fused features.
    pub fn fused_width(&self) -> usize {
        self.external_widths[1]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.num_sources,
            self.num_classes,
            self.tokens,
            self.token_dim,
            self.heads,
            self.ffn_width,
            self.shared_widths[0],
            self.shared_widths[1],
            self.external_widths[0],
            self.external_widths[1],
            self.conv_kernel,
            self.classifier_hidden,
            self.mscam_reduction,
        ];
        if positive.contains(&0) {
            return Err(Error::InvalidArgument("architecture dimensions must be positive".into()));
        }
        if !self.token_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidArgument(format!(
                "token_dim {} not divisible by heads {}",
                self.token_dim, self.heads
            )));
        }
        if self.depth_external.len() != self.num_sources {
            return Err(Error::InvalidArgument(format!(
                "{} external depths for {} sources",
                self.depth_external.len(),
                self.num_sources
            )));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument("conv kernel length must be odd for same padding".into()));
        }
        if self.fused_width() / self.mscam_reduction == 0 {
            return Err(Error::InvalidArgument("MS-CAM reduction too large".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward state: mode, dropout RNG, batch-norm statistic updates and the
/// fusion ablation hook.
pub struct Ctx {
    pub mode: Mode,
    rng: ChaCha8Rng,
    bn_updates: Vec<(BufferId, Vec<f64>, Vec<f64>)>,
    /// When set, both iAFF gates are replaced by this constant.
    pub gate_override: Option<f64>,
}

impl Ctx {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Ctx {
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
            gate_override: None,
        }
    }

    pub fn eval() -> Self {
        Ctx::new(Mode::Eval, 0)
    }

    pub fn with_rng(mode: Mode, rng: ChaCha8Rng) -> Self {
        Ctx {
            mode,
            rng,
            bn_updates: Vec::new(),
            gate_override: None,
        }
    }

    pub fn into_rng(self) -> ChaCha8Rng {
        self.rng
    }

    /// Folds the recorded batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, store: &mut ParamStore) {
        for (id, mean, var) in self.bn_updates.drain(..) {
            let stats = store.buffer_mut(id);
            for (r, b) in stats.mean.iter_mut().zip(&mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
            for (r, b) in stats.var.iter_mut().zip(&var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
            }
        }
    }

    fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Var {
        if self.mode == Mode::Eval || p == 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let shape = tape.value(x).raw_dim();
        let mask = Array2::from_shape_simple_fn(shape, || {
            if self.rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        tape.mask(x, mask)
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: store.add_fan_in(format!("{name}.w"), fan_in, out, fan_in, rng),
            b: store.add_zeros(format!("{name}.b"), 1, out),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
struct LayerNormAffine {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNormAffine {
    fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNormAffine {
            gamma: store.add_ones(format!("{name}.gamma"), 1, width),
            beta: store.add_zeros(format!("{name}.beta"), 1, width),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let n = tape.layer_norm(x);
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let y = tape.mul_row(n, g);
        tape.add_row(y, b)
    }
}

/// Pre-norm transformer encoder block over `(batch * tokens, dim)` rows.
#[derive(Debug, Clone)]
struct AttentionBlock {
    ln1: LayerNormAffine,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNormAffine,
    ff1: Linear,
    ff2: Linear,
}

impl AttentionBlock {
    fn new(store: &mut ParamStore, name: &str, arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = arch.token_dim;
        AttentionBlock {
            ln1: LayerNormAffine::new(store, &format!("{name}.ln1"), d),
            q: Linear::new(store, &format!("{name}.attn.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.attn.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.attn.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.attn.o"), d, d, rng),
            ln2: LayerNormAffine::new(store, &format!("{name}.ln2"), d),
            ff1: Linear::new(store, &format!("{name}.ffn.0"), d, arch.ffn_width, rng),
            ff2: Linear::new(store, &format!("{name}.ffn.1"), arch.ffn_width, d, rng),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: &mut Ctx,
        x: Var,
        arch: &ArchConfig,
    ) -> Var {
        let h = self.ln1.forward(tape, store, x);
        let q = self.q.forward(tape, store, h);
        let k = self.k.forward(tape, store, h);
        let v = self.v.forward(tape, store, h);
        let a = tape.attention(q, k, v, arch.tokens, arch.heads);
        let o = self.o.forward(tape, store, a);
        let o = ctx.dropout(tape, o, arch.dropout);
        let x = tape.add(x, o);

        let h = self.ln2.forward(tape, store, x);
        let f = self.ff1.forward(tape, store, h);
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, store, f);
        let f = ctx.dropout(tape, f, arch.dropout);
        tape.add(x, f)
    }
}

/// Attention stack followed by two fully connected layers.
#[derive(Debug, Clone)]
struct AttentionExtractor {
    blocks: Vec<AttentionBlock>,
    fc1: Linear,
    fc2: Linear,
}

impl AttentionExtractor {
    fn new(
        store: &mut ParamStore,
        name: &str,
        depth: usize,
        widths: [usize; 2],
        arch: &ArchConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| AttentionBlock::new(store, &format!("{name}.block{i}"), arch, rng))
            .collect();
        AttentionExtractor {
            blocks,
            fc1: Linear::new(store, &format!("{name}.fc1"), arch.input_dim(), widths[0], rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), widths[0], widths[1], rng),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ctx: &mut Ctx,
        x: Var,
        arch: &ArchConfig,
    ) -> Var {
        let batch = tape.value(x).nrows();
        let mut h = tape.reshape(x, batch * arch.tokens, arch.token_dim);
        for b in &self.blocks {
            h = b.forward(tape, store, ctx, h, arch);
        }
        let h = tape.reshape(h, batch, arch.input_dim());
        let h = self.fc1.forward(tape, store, h);
        let h = tape.relu(h);
        let h = ctx.dropout(tape, h, arch.dropout);
        let h = self.fc2.forward(tape, store, h);
        tape.relu(h)
    }
}

#[derive(Debug, Clone)]
struct ConvHead {
    w: ParamId,
    b: ParamId,
    geom: ConvGeom,
}

impl ConvHead {
    fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, ksize: usize, rng: &mut ChaCha8Rng) -> Self {
        let geom = ConvGeom {
            in_ch,
            out_ch,
            len: 1,
            ksize,
        };
        ConvHead {
            w: store.add_fan_in(format!("{name}.w"), out_ch, in_ch * ksize, in_ch * ksize, rng),
            b: store.add_zeros(format!("{name}.b"), 1, out_ch),
            geom,
        }
    }

    fn forward_linear(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv1d(x, w, b, self.geom)
    }
}

#[derive(Debug, Clone)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    stats: BufferId,
}

impl BatchNorm {
    fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        BatchNorm {
            gamma: store.add_ones(format!("{name}.gamma"), 1, width),
            beta: store.add_zeros(format!("{name}.beta"), 1, width),
            stats: store.add_buffer(format!("{name}.running"), width),
        }
    }

    /// Batch statistics in train mode (recorded for the running average when
    /// `record` is set); running statistics in eval mode or for single-row
    /// batches.
    fn forward(&self, tape: &mut Tape, store: &ParamStore, ctx: &mut Ctx, x: Var, record: bool) -> Var {
        let n = tape.value(x).nrows();
        let normed = if ctx.mode == Mode::Train && n > 1 {
            let (y, mean, var) = tape.batch_norm(x);
            if record {
                let unbiased = var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect();
                ctx.bn_updates.push((self.stats, mean, unbiased));
            }
            y
        } else {
            let rs = store.buffer(self.stats);
            let shift = Array2::from_shape_vec((1, rs.mean.len()), rs.mean.iter().map(|m| -m).collect()).unwrap();
            let scale = Array2::from_shape_vec(
                (1, rs.var.len()),
                rs.var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect(),
            )
            .unwrap();
            let shift = tape.constant(shift);
            let scale = tape.constant(scale);
            let y = tape.add_row(x, shift);
            tape.mul_row(y, scale)
        };
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let y = tape.mul_row(normed, g);
        tape.add_row(y, b)
    }
}

/// Multi-scale channel attention over `C x 1 x 1` features. The local and
/// global branches share the point-wise convolutions and normalizations.
#[derive(Debug, Clone)]
struct MsCam {
    p1: Linear,
    bn1: BatchNorm,
    p2: Linear,
    bn2: BatchNorm,
}

impl MsCam {
    fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Self {
        let inner = channels / reduction;
        MsCam {
            p1: Linear::new(store, &format!("{name}.pw1"), channels, inner, rng),
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), inner),
            p2: Linear::new(store, &format!("{name}.pw2"), inner, channels, rng),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), channels),
        }
    }

    fn branch(&self, tape: &mut Tape, store: &ParamStore, ctx: &mut Ctx, x: Var, record: bool) -> Var {
        let h = self.p1.forward(tape, store, x);
        let h = self.bn1.forward(tape, store, ctx, h, record);
        let h = tape.relu(h);
        let h = self.p2.forward(tape, store, h);
        self.bn2.forward(tape, store, ctx, h, record)
    }

    /// Sigmoid gate `Q(X)`.
    fn gate(&self, tape: &mut Tape, store: &ParamStore, ctx: &mut Ctx, x: Var) -> Var {
        let local = self.branch(tape, store, ctx, x, true);
        let pooled = tape.spatial_mean(x, 1);
        let global = self.branch(tape, store, ctx, pooled, false);
        let s = tape.add(local, global);
        tape.sigmoid(s)
    }
}

#[derive(Debug, Clone)]
struct Iaff {
    cam1: MsCam,
    cam2: MsCam,
}

/// Parameter handles for every block of the model.
#[derive(Debug, Clone)]
struct Blocks {
    shared: AttentionExtractor,
    internal: Vec<ConvHead>,
    external: Vec<AttentionExtractor>,
    fusion: Vec<Iaff>,
    classifiers: Vec<(Linear, Linear)>,
}

#[derive(Debug, Clone)]
pub struct Model {
    arch: ArchConfig,
    store: ParamStore,
    blocks: Blocks,
}

/// Tape handles for one source-target pair.
#[derive(Debug, Clone, Copy)]
pub struct PairVars {
    pub internal_src: Var,
    pub internal_tgt: Var,
    pub external_src: Var,
    pub external_tgt: Var,
    pub fused_src: Var,
    pub fused_tgt: Var,
    pub prob_src: Var,
    pub prob_tgt: Var,
}

/// Numeric snapshot of one pair's activations.
#[derive(Debug, Clone, PartialEq)]
pub struct PairActivations {
    pub internal_src: Array2<f64>,
    pub internal_tgt: Array2<f64>,
    pub external_src: Array2<f64>,
    pub external_tgt: Array2<f64>,
    pub fused_src: Array2<f64>,
    pub fused_tgt: Array2<f64>,
    pub prob_src: Array2<f64>,
    pub prob_tgt: Array2<f64>,
}

impl PairVars {
    pub fn snapshot(&self, tape: &Tape) -> PairActivations {
        PairActivations {
            internal_src: tape.value(self.internal_src).clone(),
            internal_tgt: tape.value(self.internal_tgt).clone(),
            external_src: tape.value(self.external_src).clone(),
            external_tgt: tape.value(self.external_tgt).clone(),
            fused_src: tape.value(self.fused_src).clone(),
            fused_tgt: tape.value(self.fused_tgt).clone(),
            prob_src: tape.value(self.prob_src).clone(),
            prob_tgt: tape.value(self.prob_tgt).clone(),
        }
    }
}

/// Splits a flat feature vector into a `tokens x token_dim` matrix; row `t`
/// holds the `t`-th contiguous block.
pub fn tokenize(features: &[f64], tokens: usize, token_dim: usize) -> Result<Array2<f64>> {
    if features.len() != tokens * token_dim {
        return Err(Error::Shape(format!(
            "{} features cannot form {tokens} tokens of width {token_dim}",
            features.len()
        )));
    }
    Ok(Array2::from_shape_vec((tokens, token_dim), features.to_vec()).unwrap())
}

impl Model {
    pub fn new(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let fused = arch.fused_width();
        let shared = AttentionExtractor::new(&mut store, "S", arch.depth_shared, arch.shared_widths, &arch, &mut rng);
        let mut internal = Vec::new();
        let mut external = Vec::new();
        let mut fusion = Vec::new();
        let mut classifiers = Vec::new();
        for j in 0..arch.num_sources {
            let n = j + 1;
            internal.push(ConvHead::new(
                &mut store,
                &format!("P{n}.conv"),
                arch.shared_widths[1],
                fused,
                arch.conv_kernel,
                &mut rng,
            ));
            external.push(AttentionExtractor::new(
                &mut store,
                &format!("G{n}"),
                arch.depth_external[j],
                arch.external_widths,
                &arch,
                &mut rng,
            ));
            fusion.push(Iaff {
                cam1: MsCam::new(&mut store, &format!("F{n}.cam1"), fused, arch.mscam_reduction, &mut rng),
                cam2: MsCam::new(&mut store, &format!("F{n}.cam2"), fused, arch.mscam_reduction, &mut rng),
            });
            classifiers.push((
                Linear::new(&mut store, &format!("C{n}.fc1"), fused, arch.classifier_hidden, &mut rng),
                Linear::new(&mut store, &format!("C{n}.fc2"), arch.classifier_hidden, arch.num_classes, &mut rng),
            ));
        }
        Ok(Model {
            arch,
            store,
            blocks: Blocks {
                shared,
                internal,
                external,
                fusion,
                classifiers,
            },
        })
    }

    /// Rebuilds a model from a configuration and previously saved state.
    pub fn from_store(arch: ArchConfig, store: ParamStore) -> Result<Self> {
        let mut model = Model::new(arch, 0)?;
        let same_shape = model.store.len() == store.len()
            && model.store.buffers().len() == store.buffers().len()
            && model
                .store
                .iter()
                .zip(store.iter())
                .all(|(a, b)| a.name == b.name && a.value.dim() == b.value.dim())
            && model
                .store
                .buffers()
                .iter()
                .zip(store.buffers())
                .all(|(a, b)| a.name == b.name && a.mean.len() == b.mean.len());
        if !same_shape {
            return Err(Error::Shape("parameter layout does not match the architecture".into()));
        }
        model.store = store;
        Ok(model)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let w = tape.value(x).ncols();
        if w != self.arch.input_dim() {
            return Err(Error::Shape(format!(
                "input width {w}, model expects {}",
                self.arch.input_dim()
            )));
        }
        Ok(())
    }

    fn check_pair(&self, j: usize) -> Result<()> {
        if j >= self.arch.num_sources {
            return Err(Error::InvalidArgument(format!(
                "pair {j} out of range (model has {} sources)",
                self.arch.num_sources
            )));
        }
        Ok(())
    }

    /// Shared extractor `S`.
    pub fn shared_forward(&self, tape: &mut Tape, ctx: &mut Ctx, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        Ok(self.blocks.shared.forward(tape, &self.store, ctx, x, &self.arch))
    }

    /// Internal private extractor `P_j` applied to shared features.
    pub fn internal_forward(&self, tape: &mut Tape, shared: Var, j: usize) -> Result<Var> {
        self.check_pair(j)?;
        let w = tape.value(shared).ncols();
        if w != self.arch.shared_widths[1] {
            return Err(Error::Shape(format!(
                "shared feature width {w}, expected {}",
                self.arch.shared_widths[1]
            )));
        }
        let y = self.blocks.internal[j].forward_linear(tape, &self.store, shared);
        Ok(tape.relu(y))
    }

    /// Pre-activation output of `P_j` (for linearity checks).
    pub fn internal_preactivation(&self, tape: &mut Tape, shared: Var, j: usize) -> Result<Var> {
        self.check_pair(j)?;
        Ok(self.blocks.internal[j].forward_linear(tape, &self.store, shared))
    }

    /// External private extractor `G_j`.
    pub fn external_forward(&self, tape: &mut Tape, ctx: &mut Ctx, x: Var, j: usize) -> Result<Var> {
        self.check_pair(j)?;
        self.check_input(tape, x)?;
        Ok(self.blocks.external[j].forward(tape, &self.store, ctx, x, &self.arch))
    }

    /// MS-CAM gate `Q(X)` and gated output `X * Q(X)`. `stage` selects the
    /// first (0) or second (1) attention module of pair `j`'s fusion block.
    pub fn mscam_forward(&self, tape: &mut Tape, ctx: &mut Ctx, x: Var, j: usize, stage: usize) -> Result<(Var, Var)> {
        self.check_pair(j)?;
        let fused = self.arch.fused_width();
        if tape.value(x).ncols() != fused {
            return Err(Error::Shape(format!("MS-CAM expects {fused} channels")));
        }
        let iaff = &self.blocks.fusion[j];
        let cam = if stage == 0 { &iaff.cam1 } else { &iaff.cam2 };
        let q = cam.gate(tape, &self.store, ctx, x);
        let out = tape.mul(x, q);
        Ok((q, out))
    }

    /// Iterative attentional fusion of external and internal features.
    pub fn iaff_fuse(&self, tape: &mut Tape, ctx: &mut Ctx, f_ex: Var, f_in: Var, j: usize) -> Result<Var> {
        self.check_pair(j)?;
        if tape.value(f_ex).dim() != tape.value(f_in).dim() {
            return Err(Error::Shape("iAFF inputs differ in shape".into()));
        }
        if tape.value(f_ex).ncols() != self.arch.fused_width() {
            return Err(Error::Shape(format!(
                "iAFF expects width {}",
                self.arch.fused_width()
            )));
        }
        let iaff = &self.blocks.fusion[j];
        let diff = tape.sub(f_ex, f_in);
        let shape = tape.value(f_ex).raw_dim();
        let gate = |tape: &mut Tape, ctx: &mut Ctx, cam: &MsCam, x: Var| match ctx.gate_override {
            Some(g) => tape.constant(Array2::from_elem(shape, g)),
            None => cam.gate(tape, &self.store, ctx, x),
        };
        // out = Q * f_ex + (1 - Q) * f_in, written as f_in + Q * (f_ex - f_in)
        let initial = tape.add(f_ex, f_in);
        let q1 = gate(tape, ctx, &iaff.cam1, initial);
        let mixed = tape.mul(q1, diff);
        let z = tape.add(f_in, mixed);
        let q2 = gate(tape, ctx, &iaff.cam2, z);
        let mixed = tape.mul(q2, diff);
        Ok(tape.add(f_in, mixed))
    }

    /// Classifier `C_j`; returns `(logits, probabilities)`.
    pub fn classifier_forward(&self, tape: &mut Tape, fused: Var, j: usize) -> Result<(Var, Var)> {
        self.check_pair(j)?;
        if tape.value(fused).ncols() != self.arch.fused_width() {
            return Err(Error::Shape(format!(
                "classifier expects width {}",
                self.arch.fused_width()
            )));
        }
        let (fc1, fc2) = &self.blocks.classifiers[j];
        let h = fc1.forward(tape, &self.store, fused);
        let h = tape.relu(h);
        let logits = fc2.forward(tape, &self.store, h);
        let probs = tape.softmax_rows(logits);
        Ok((logits, probs))
    }

    /// Full forward over one mini-batch per source plus a target batch.
    pub fn model_forward(
        &self,
        tape: &mut Tape,
        ctx: &mut Ctx,
        sources: &[Var],
        target: Var,
    ) -> Result<Vec<PairVars>> {
        if sources.len() != self.arch.num_sources {
            return Err(Error::Shape(format!(
                "{} source batches for {} sources",
                sources.len(),
                self.arch.num_sources
            )));
        }
        let shared_tgt = self.shared_forward(tape, ctx, target)?;
        let mut pairs = Vec::with_capacity(sources.len());
        for (j, &xs) in sources.iter().enumerate() {
            let shared_src = self.shared_forward(tape, ctx, xs)?;
            let internal_src = self.internal_forward(tape, shared_src, j)?;
            let internal_tgt = self.internal_forward(tape, shared_tgt, j)?;
            let external_src = self.external_forward(tape, ctx, xs, j)?;
            let external_tgt = self.external_forward(tape, ctx, target, j)?;
            let fused_src = self.iaff_fuse(tape, ctx, external_src, internal_src, j)?;
            let fused_tgt = self.iaff_fuse(tape, ctx, external_tgt, internal_tgt, j)?;
            let (_, prob_src) = self.classifier_forward(tape, fused_src, j)?;
            let (_, prob_tgt) = self.classifier_forward(tape, fused_tgt, j)?;
            pairs.push(PairVars {
                internal_src,
                internal_tgt,
                external_src,
                external_tgt,
                fused_src,
                fused_tgt,
                prob_src,
                prob_tgt,
            });
        }
        Ok(pairs)
    }

    /// Eval-mode fused features and class probabilities of every pair for a
    /// set of target samples, computed in chunks.
    pub fn target_outputs(&self, x: &Array2<f64>, chunk: usize) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
        let n = self.arch.num_sources;
        let mut fused: Vec<Vec<Array2<f64>>> = vec![Vec::new(); n];
        let mut probs: Vec<Vec<Array2<f64>>> = vec![Vec::new(); n];
        let chunk = chunk.max(1);
        let mut start = 0;
        while start < x.nrows() {
            let end = (start + chunk).min(x.nrows());
            let mut tape = Tape::new();
            let mut ctx = Ctx::eval();
            let xv = tape.constant(x.slice(ndarray::s![start..end, ..]).to_owned());
            let shared = self.shared_forward(&mut tape, &mut ctx, xv)?;
            for j in 0..n {
                let fin = self.internal_forward(&mut tape, shared, j)?;
                let fex = self.external_forward(&mut tape, &mut ctx, xv, j)?;
                let f = self.iaff_fuse(&mut tape, &mut ctx, fex, fin, j)?;
                let (_, p) = self.classifier_forward(&mut tape, f, j)?;
                fused[j].push(tape.value(f).clone());
                probs[j].push(tape.value(p).clone());
            }
            start = end;
        }
        let cat = |parts: Vec<Array2<f64>>, width: usize| {
            if parts.is_empty() {
                return Array2::zeros((0, width));
            }
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            ndarray::concatenate(Axis(0), &views).unwrap()
        };
        Ok(fused
            .into_iter()
            .zip(probs)
            .map(|(f, p)| (cat(f, self.arch.fused_width()), cat(p, self.arch.num_classes)))
            .collect())
    }

    /// Eval-mode fused features of pair `j` for arbitrary samples.
    pub fn fused_features(&self, x: &Array2<f64>, j: usize) -> Result<Array2<f64>> {
        self.check_pair(j)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::eval();
        let xv = tape.constant(x.clone());
        let shared = self.shared_forward(&mut tape, &mut ctx, xv)?;
        let fin = self.internal_forward(&mut tape, shared, j)?;
        let fex = self.external_forward(&mut tape, &mut ctx, xv, j)?;
        let f = self.iaff_fuse(&mut tape, &mut ctx, fex, fin, j)?;
        Ok(tape.value(f).clone())
    }
}
