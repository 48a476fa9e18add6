//! Mini-batch training loop with momentum SGD, experiment configuration and
//! binary checkpoints.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{DomainDataset, UnlabeledDomain};
use crate::error::{Error, Result};
use crate::evaluate::TargetMonitor;
use crate::lmmd::KernelConfig;
use crate::losses::{lambda_schedule, objective, LossBreakdown};
use crate::network::{ArchConfig, Ctx, Mode, Model};
use crate::params::{ParamStore, RunningStats};
use crate::tape::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Uci,
    Enose,
}

fn default_steady_fraction() -> f64 {
    0.1
}

fn default_true() -> bool {
    true
}

/// Experiment configuration. Loaded from TOML; unknown keys are rejected and
/// every key without a default must be present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetKind,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    pub alpha: f64,
    pub depth_shared: usize,
    pub depth_external: Vec<usize>,
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
    /// Use `2/(1+exp(-x)) - 1` so the adaptation weight starts at zero.
    #[serde(default)]
    pub lambda_minus_one: bool,
    /// Forces the adaptation weight to zero (ablation).
    #[serde(default)]
    pub source_only: bool,
    #[serde(default = "default_steady_fraction")]
    pub steady_window_frac: f64,
    /// z-score all domains with statistics of the source domains.
    #[serde(default = "default_true")]
    pub standardize: bool,
    #[serde(default)]
    pub kernel: KernelConfig,
}

const PRESETS: [(&str, &str); 10] = [
    ("uci_1_2_3", include_str!("../configs/uci_1_2_3.toml")),
    ("uci_1_2_4", include_str!("../configs/uci_1_2_4.toml")),
    ("uci_1_2_5", include_str!("../configs/uci_1_2_5.toml")),
    ("uci_1_2_6", include_str!("../configs/uci_1_2_6.toml")),
    ("uci_1_2_7", include_str!("../configs/uci_1_2_7.toml")),
    ("uci_1_2_8", include_str!("../configs/uci_1_2_8.toml")),
    ("uci_1_2_9", include_str!("../configs/uci_1_2_9.toml")),
    ("uci_1_2_10", include_str!("../configs/uci_1_2_10.toml")),
    ("enose_11_12_13", include_str!("../configs/enose_11_12_13.toml")),
    ("enose_11_12_14", include_str!("../configs/enose_11_12_14.toml")),
];

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn preset_names() -> Vec<&'static str> {
        PRESETS.iter().map(|(n, _)| *n).collect()
    }

    /// One of the shipped experiment configurations, e.g. `uci_1_2_3`.
    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("unknown preset {name:?}")))?;
        Self::from_toml_str(text)
    }

    /// Resolves a `--config` argument: a preset name or a file path.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if PRESETS.iter().any(|(n, _)| *n == name_or_path) {
            Self::preset(name_or_path)
        } else {
            Self::from_file(name_or_path)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha {} must be > 0", self.alpha));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} not in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        if self.depth_external.is_empty() {
            return bad("depth_external must list one depth per source".into());
        }
        if !(self.steady_window_frac > 0.0 && self.steady_window_frac <= 1.0) {
            return bad(format!("steady_window_frac {} not in (0, 1]", self.steady_window_frac));
        }
        self.kernel.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn num_sources(&self) -> usize {
        self.depth_external.len()
    }

    pub fn arch(&self, num_classes: usize) -> ArchConfig {
        let mut arch = match self.dataset {
            DatasetKind::Uci => ArchConfig::uci(self.depth_shared, self.depth_external.clone(), self.dropout),
            DatasetKind::Enose => ArchConfig::enose(self.depth_shared, self.depth_external.clone(), self.dropout),
        };
        arch.num_classes = num_classes;
        arch
    }

    /// SHA-256 of the canonical JSON form.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn lambda(&self, epoch: usize) -> Result<f64> {
        if self.source_only {
            return Ok(0.0);
        }
        lambda_schedule(self.alpha, epoch, self.epochs, self.lambda_minus_one)
    }
}

/// `max ceil(|D| / b)` over domains.
pub fn num_batches(sizes: &[usize], batch_size: usize) -> Result<usize> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    if sizes.is_empty() {
        return Err(Error::Empty("no domains".into()));
    }
    if let Some(i) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::Empty(format!("domain {i} has no samples")));
    }
    Ok(sizes.iter().map(|n| n.div_ceil(batch_size)).max().unwrap())
}

/// Sample indices for one epoch, `steps[t][d]` for step `t` and domain `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub steps: Vec<Vec<Vec<usize>>>,
}

impl BatchPlan {
    pub fn total_batches(&self) -> usize {
        self.steps.len()
    }
}

/// Every domain is shuffled and cut into batches of `batch_size` (the last
/// one of a pass may be short). Domains that run out before the longest one
/// are reshuffled and cycled.
pub fn make_batch_plan(sizes: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Result<BatchPlan> {
    let total = num_batches(sizes, batch_size)?;
    let mut steps = vec![Vec::with_capacity(sizes.len()); total];
    for &n in sizes {
        let mut chunks: Vec<Vec<usize>> = Vec::with_capacity(total);
        while chunks.len() < total {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            for c in perm.chunks(batch_size) {
                if chunks.len() == total {
                    break;
                }
                chunks.push(c.to_vec());
            }
        }
        for (step, c) in steps.iter_mut().zip(chunks) {
            step.push(c);
        }
    }
    Ok(BatchPlan { steps })
}

/// Velocity buffers of momentum SGD.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Array2<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore) -> Self {
        OptimizerState {
            velocity: store.iter().map(|p| Array2::zeros(p.value.raw_dim())).collect(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v = momentum * v + g + weight_decay * p; p -= lr * v`.
pub fn sgd_step(store: &mut ParamStore, grads: &[Array2<f64>], state: &mut OptimizerState, cfg: SgdConfig) -> Result<()> {
    if grads.len() != store.len() || state.velocity.len() != store.len() {
        return Err(Error::Shape(format!(
            "{} gradients and {} velocities for {} parameters",
            grads.len(),
            state.velocity.len(),
            store.len()
        )));
    }
    for ((p, g), v) in store.iter().zip(grads).zip(&state.velocity) {
        if p.value.dim() != g.dim() || p.value.dim() != v.dim() {
            return Err(Error::Shape(format!("gradient shape mismatch for {}", p.name)));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter block {}", p.name)));
        }
    }
    for ((p, g), v) in store.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        ndarray::Zip::from(&mut p.value).and(v).and(g).for_each(|p, v, &g| {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
            *p -= cfg.learning_rate * *v;
        });
    }
    state.step += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over the epoch's batches.
    pub losses: LossBreakdown,
    pub target_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub logs: Vec<EpochLog>,
    /// Seconds per epoch; kept apart from the logs so they stay reproducible.
    pub wall_clock: Vec<f64>,
}

fn rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
}

/// Trains a fresh model on labeled sources and an unlabeled target. The
/// optional monitor only reports target accuracy after each epoch.
pub fn train(
    sources: &[DomainDataset],
    target: &UnlabeledDomain,
    cfg: &TrainConfig,
    monitor: Option<&TargetMonitor>,
) -> Result<TrainOutcome> {
    train_with_progress(sources, target, cfg, monitor, |_| {})
}

pub fn train_with_progress(
    sources: &[DomainDataset],
    target: &UnlabeledDomain,
    cfg: &TrainConfig,
    monitor: Option<&TargetMonitor>,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if sources.len() != cfg.num_sources() {
        return Err(Error::Config(format!(
            "{} source domains but depth_external lists {}",
            sources.len(),
            cfg.num_sources()
        )));
    }
    let num_classes = sources[0].num_classes();
    if sources.iter().any(|s| s.num_classes() != num_classes) {
        return Err(Error::Shape("source domains disagree on the class count".into()));
    }
    let arch = cfg.arch(num_classes);
    let xs: Vec<Array2<f64>> = sources.iter().map(|s| s.feature_matrix()).collect();
    let ys: Vec<Vec<usize>> = sources.iter().map(|s| s.labels()).collect::<Result<_>>()?;
    let xt = &target.features;
    for x in xs.iter().chain(std::iter::once(xt)) {
        if x.ncols() != arch.input_dim() {
            return Err(Error::Shape(format!(
                "features have width {}, architecture expects {}",
                x.ncols(),
                arch.input_dim()
            )));
        }
    }
    let mut sizes: Vec<usize> = xs.iter().map(|x| x.nrows()).collect();
    sizes.push(xt.nrows());

    let mut model = Model::new(arch, stream_seed(cfg.seed, 1))?;
    let mut optimizer = OptimizerState::new(model.store());
    let mut plan_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 2));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 3));
    let sgd = SgdConfig {
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut wall_clock = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let started = std::time::Instant::now();
        let lambda = cfg.lambda(epoch)?;
        let plan = make_batch_plan(&sizes, cfg.batch_size, &mut plan_rng)?;
        let mut sums = [0.0; 5];
        for (b, step) in plan.steps.iter().enumerate() {
            let mut tape = Tape::new();
            let mut ctx = Ctx::with_rng(Mode::Train, dropout_rng);
            let src_vars: Vec<_> = step[..xs.len()]
                .iter()
                .zip(&xs)
                .map(|(idx, x)| tape.constant(rows(x, idx)))
                .collect();
            let tgt_var = tape.constant(rows(xt, &step[xs.len()]));
            let labels: Vec<Vec<usize>> = step[..xs.len()]
                .iter()
                .zip(&ys)
                .map(|(idx, y)| idx.iter().map(|&i| y[i]).collect())
                .collect();
            let label_refs: Vec<&[usize]> = labels.iter().map(|l| l.as_slice()).collect();
            let pairs = model.model_forward(&mut tape, &mut ctx, &src_vars, tgt_var)?;
            let (loss, _) = objective(&mut tape, &pairs, &label_refs, lambda, &cfg.kernel, None)?;
            let total = tape.scalar(loss.total);
            if !total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    value: total,
                });
            }
            let bd = loss.breakdown(&tape, lambda);
            for (s, v) in sums
                .iter_mut()
                .zip([bd.cross, bd.lmmd_external, bd.lmmd_fused, bd.diff, bd.total])
            {
                *s += v;
            }
            let grads = tape.backward(loss.total).params(model.store());
            ctx.apply_bn_updates(model.store_mut());
            dropout_rng = ctx.into_rng();
            sgd_step(model.store_mut(), &grads, &mut optimizer, sgd).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {epoch}, batch {}", b + 1)),
                other => other,
            })?;
        }
        let n = plan.total_batches() as f64;
        let losses = LossBreakdown {
            cross: sums[0] / n,
            lmmd_external: sums[1] / n,
            lmmd_fused: sums[2] / n,
            diff: sums[3] / n,
            lambda,
            total: sums[4] / n,
        };
        let target_acc = monitor.map(|m| m.accuracy(&model)).transpose()?;
        let log = EpochLog {
            epoch,
            losses,
            target_acc,
        };
        progress(&log);
        logs.push(log);
        wall_clock.push(started.elapsed().as_secs_f64());
    }
    Ok(TrainOutcome {
        model,
        optimizer,
        logs,
        wall_clock,
    })
}

pub const LOG_HEADER: [&str; 8] = ["epoch", "cross", "lmmd1", "lmmd2", "diff", "lambda", "total", "target_acc"];

/// Per-epoch losses as CSV. `lmmd1` is the external-feature discrepancy and
/// `lmmd2` the fused-feature discrepancy.
pub fn write_log_csv(logs: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    w.write_record(LOG_HEADER).map_err(|e| Error::io(path, e.into()))?;
    for l in logs {
        let b = &l.losses;
        let acc = l.target_acc.map(|a| a.to_string()).unwrap_or_default();
        w.write_record([
            l.epoch.to_string(),
            b.cross.to_string(),
            b.lmmd_external.to_string(),
            b.lmmd_fused.to_string(),
            b.diff.to_string(),
            b.lambda.to_string(),
            b.total.to_string(),
            acc,
        ])
        .map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DRFTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub arch: ArchConfig,
    pub store: ParamStore,
    pub optimizer: OptimizerState,
    pub seed: u64,
    pub epochs_done: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct BufferEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    arch: ArchConfig,
    seed: u64,
    epochs_done: usize,
    optimizer_step: u64,
    params: Vec<TensorEntry>,
    buffers: Vec<BufferEntry>,
}

impl Checkpoint {
    pub fn from_outcome(outcome: &TrainOutcome, config: &TrainConfig) -> Self {
        Checkpoint {
            config: config.clone(),
            arch: outcome.model.arch().clone(),
            store: outcome.model.store().clone(),
            optimizer: outcome.optimizer.clone(),
            seed: config.seed,
            epochs_done: outcome.logs.len(),
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_store(self.arch.clone(), self.store.clone())
    }

    /// Layout: magic, version (u32 LE), JSON header length (u64 LE), JSON
    /// header, then parameters, running statistics and velocities as f64 LE.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            config: self.config.clone(),
            arch: self.arch.clone(),
            seed: self.seed,
            epochs_done: self.epochs_done,
            optimizer_step: self.optimizer.step,
            params: self
                .store
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    rows: p.value.nrows(),
                    cols: p.value.ncols(),
                })
                .collect(),
            buffers: self
                .store
                .buffers()
                .iter()
                .map(|b| BufferEntry {
                    name: b.name.clone(),
                    len: b.mean.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |v: f64| out.extend_from_slice(&v.to_le_bytes());
        for p in self.store.iter() {
            p.value.iter().for_each(|&v| put(v));
        }
        for b in self.store.buffers() {
            b.mean.iter().chain(&b.var).for_each(|&v| put(v));
        }
        for v in &self.optimizer.velocity {
            v.iter().for_each(|&x| put(x));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::CorruptCheckpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if hlen > body.len() {
            return Err(corrupt("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let mut data = &body[hlen..];
        let param_len: usize = header.params.iter().map(|p| p.rows * p.cols).sum();
        let buf_len: usize = header.buffers.iter().map(|b| 2 * b.len).sum();
        let expected = (2 * param_len + buf_len) * 8;
        if data.len() != expected {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor section has {} bytes, expected {expected}",
                data.len()
            )));
        }
        let mut take = |n: usize| -> Vec<f64> {
            let (head, rest) = data.split_at(n * 8);
            data = rest;
            head.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let mut store = ParamStore::default();
        for p in &header.params {
            let v = Array2::from_shape_vec((p.rows, p.cols), take(p.rows * p.cols)).unwrap();
            store.add(p.name.clone(), v);
        }
        for b in &header.buffers {
            let id = store.add_buffer(b.name.clone(), b.len);
            let mean = take(b.len);
            let var = take(b.len);
            *store.buffer_mut(id) = RunningStats {
                name: b.name.clone(),
                mean,
                var,
            };
        }
        let velocity = header
            .params
            .iter()
            .map(|p| Array2::from_shape_vec((p.rows, p.cols), take(p.rows * p.cols)).unwrap())
            .collect();
        let ckpt = Checkpoint {
            config: header.config,
            arch: header.arch,
            store,
            optimizer: OptimizerState {
                velocity,
                step: header.optimizer_step,
            },
            seed: header.seed,
            epochs_done: header.epochs_done,
        };
        // layout must match what the architecture builds
        ckpt.model().map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DomainRole, GasSample};
    use rand::Rng;

    #[test]
    fn presets_match_tables() {
        let names = TrainConfig::preset_names();
        assert_eq!(names.len(), 10);
        let c = TrainConfig::preset("uci_1_2_3").unwrap();
        assert_eq!(
            (c.alpha, c.learning_rate, c.batch_size, c.weight_decay, c.momentum),
            (0.1, 0.001, 48, 1e-3, 0.95)
        );
        assert_eq!((c.depth_shared, c.depth_external.clone(), c.dropout), (3, vec![3, 3], 0.3));
        assert_eq!(c.epochs, 300);
        let c = TrainConfig::preset("uci_1_2_8").unwrap();
        assert_eq!((c.alpha, c.batch_size, c.epochs), (2.0, 36, 500));
        let c = TrainConfig::preset("uci_1_2_9").unwrap();
        assert_eq!((c.depth_shared, c.depth_external.clone(), c.momentum), (1, vec![2, 2], 0.98));
        let c = TrainConfig::preset("enose_11_12_14").unwrap();
        assert_eq!((c.alpha, c.depth_shared, c.depth_external.clone()), (5.0, 3, vec![2, 2]));
        assert_eq!(c.dataset, DatasetKind::Enose);
        assert!(TrainConfig::preset("uci_1_2_11").is_err());
    }

    #[test]
    fn config_rejects_unknown_and_missing_keys() {
        let base = include_str!("../configs/uci_1_2_3.toml");
        let err = TrainConfig::from_toml_str(&format!("{base}bogus = 1\n")).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let without: String = base.lines().filter(|l| !l.starts_with("alpha")).map(|l| format!("{l}\n")).collect();
        let err = TrainConfig::from_toml_str(&without).unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
        assert_eq!(err.exit_code(), 2);
        let bad = base.replace("batch_size = 48", "batch_size = 0");
        assert!(TrainConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn config_hash_is_stable() {
        let a = TrainConfig::preset("uci_1_2_3").unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn batch_counts() {
        assert_eq!(num_batches(&[445, 1244, 1586], 48).unwrap(), 34);
        assert_eq!(num_batches(&[10, 10], 100).unwrap(), 1);
        assert!(num_batches(&[10, 0], 4).is_err());
        assert!(num_batches(&[10], 0).is_err());
    }

    #[test]
    fn batch_plan_cycles_shorter_domains() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = make_batch_plan(&[445, 1244, 1586], 48, &mut rng).unwrap();
        assert_eq!(plan.total_batches(), 34);
        for d in 0..3 {
            let n = [445, 1244, 1586][d];
            let mut seen = vec![false; n];
            for step in &plan.steps {
                assert!(!step[d].is_empty() && step[d].len() <= 48);
                for &i in &step[d] {
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "domain {d} not fully covered");
        }
        // longest domain: one pass, each index exactly once
        let mut count = vec![0; 1586];
        for step in &plan.steps {
            for &i in &step[2] {
                count[i] += 1;
            }
        }
        assert!(count.iter().all(|&c| c == 1));

        let plan = make_batch_plan(&[12, 12], 4, &mut rng).unwrap();
        assert_eq!(plan.total_batches(), 3);
        for d in 0..2 {
            let mut all: Vec<usize> = plan.steps.iter().flat_map(|s| s[d].clone()).collect();
            all.sort();
            assert_eq!(all, (0..12).collect::<Vec<_>>());
        }
        let plan = make_batch_plan(&[3, 5], 50, &mut rng).unwrap();
        assert_eq!(plan.total_batches(), 1);
    }

    #[test]
    fn batch_plan_reshuffles_each_epoch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = make_batch_plan(&[20, 30], 5, &mut rng).unwrap();
        let b = make_batch_plan(&[20, 30], 5, &mut rng).unwrap();
        assert_ne!(a, b);
        let mut rng2 = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(a, make_batch_plan(&[20, 30], 5, &mut rng2).unwrap());
    }

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::default();
        s.add("x", Array2::from_elem((1, 1), v));
        s
    }

    #[test]
    fn sgd_basic_cases() {
        let mut s = one_param(1.5);
        let mut st = OptimizerState::new(&s);
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        sgd_step(&mut s, &[Array2::zeros((1, 1))], &mut st, cfg).unwrap();
        assert_eq!(s.get(crate::params::ParamId(0)).value[[0, 0]], 1.5);

        let mut s = one_param(1.5);
        let mut st = OptimizerState::new(&s);
        let plain = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_step(&mut s, &[Array2::from_elem((1, 1), 2.0)], &mut st, plain).unwrap();
        assert!((s.get(crate::params::ParamId(0)).value[[0, 0]] - 1.3).abs() < 1e-15);
    }

    #[test]
    fn sgd_quadratic_matches_recurrence() {
        // f(x) = x^2, gradient 2x
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        };
        let mut s = one_param(1.0);
        let mut st = OptimizerState::new(&s);
        let (mut x, mut v) = (1.0f64, 0.0f64);
        for _ in 0..5 {
            let g = 2.0 * s.get(crate::params::ParamId(0)).value[[0, 0]];
            sgd_step(&mut s, &[Array2::from_elem((1, 1), g)], &mut st, cfg).unwrap();
            v = 0.9 * v + 2.0 * x;
            x -= 0.1 * v;
            assert_eq!(s.get(crate::params::ParamId(0)).value[[0, 0]], x);
        }
        assert_eq!(st.step, 5);
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let mut s = one_param(1.0);
        let mut st = OptimizerState::new(&s);
        let cfg = SgdConfig {
            learning_rate: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let err = sgd_step(&mut s, &[Array2::from_elem((1, 1), f64::NAN)], &mut st, cfg).unwrap_err();
        assert!(err.to_string().contains("x"));
        assert_eq!(err.exit_code(), 3);
        assert_eq!(s.get(crate::params::ParamId(0)).value[[0, 0]], 1.0);
    }

    pub(crate) fn tiny_problem(seed: u64) -> (Vec<DomainDataset>, DomainDataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..3).map(|_| (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let mut domain = |id: u32, n: usize, shift: f64, role| {
            let samples = (0..n)
                .map(|i| {
                    let c = i % 3;
                    GasSample {
                        features: centers[c].iter().map(|m| m + shift + rng.gen_range(-0.3..0.3)).collect(),
                        label: Some(c),
                        concentration: None,
                    }
                })
                .collect();
            DomainDataset::new(samples, id, 3, 40, role).unwrap()
        };
        let s1 = domain(1, 30, 0.0, DomainRole::Source);
        let s2 = domain(2, 30, 0.2, DomainRole::Source);
        let t = domain(3, 30, 0.4, DomainRole::Target);
        (vec![s1, s2], t)
    }

    fn tiny_config(epochs: usize) -> TrainConfig {
        let mut c = TrainConfig::preset("enose_11_12_13").unwrap();
        c.epochs = epochs;
        c.depth_shared = 1;
        c.depth_external = vec![1, 1];
        c.batch_size = 16;
        c.learning_rate = 0.01;
        c
    }

    #[test]
    fn training_reduces_cross_entropy_and_is_deterministic() {
        let (sources, target) = tiny_problem(0);
        let (view, labels) = target.split_target();
        let monitor = TargetMonitor::new(view.features.clone(), labels.unwrap()).unwrap();
        let cfg = tiny_config(20);
        let a = train(&sources, &view, &cfg, Some(&monitor)).unwrap();
        assert!(a.logs.last().unwrap().losses.cross < a.logs[0].losses.cross);
        let b = train(&sources, &view, &cfg, Some(&monitor)).unwrap();
        assert_eq!(a.logs, b.logs);
        for l in &a.logs {
            let b = l.losses;
            assert!((b.total - (b.cross + b.lambda * (b.lmmd_external + b.lmmd_fused + b.diff))).abs() < 1e-9);
        }
    }

    #[test]
    fn every_block_receives_an_update() {
        let (sources, target) = tiny_problem(1);
        let (view, _) = target.split_target();
        let mut cfg = tiny_config(1);
        cfg.dropout = 0.0;
        let before = Model::new(cfg.arch(3), stream_seed(cfg.seed, 1)).unwrap();
        let out = train(&sources, &view, &cfg, None).unwrap();
        for (p0, p1) in before.store().iter().zip(out.model.store().iter()) {
            assert_eq!(p0.name, p1.name);
            assert_ne!(p0.value, p1.value, "block {} did not move", p0.name);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (sources, target) = tiny_problem(2);
        let (view, _) = target.split_target();
        let cfg = tiny_config(2);
        let out = train(&sources, &view, &cfg, None).unwrap();
        let ckpt = Checkpoint::from_outcome(&out, &cfg);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&ckpt, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded, ckpt);
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let m = loaded.model().unwrap();
        let x = view.features.clone();
        assert_eq!(m.target_outputs(&x, 64).unwrap(), out.model.target_outputs(&x, 64).unwrap());

        let bytes = std::fs::read(&p1).unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::CorruptCheckpoint(_)));
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::CheckpointVersion { found: 9, .. })));
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
    }

    #[test]
    fn log_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        let log = EpochLog {
            epoch: 1,
            losses: crate::losses::combine_losses(1.0, 0.25, 0.25, 0.5, 1.5).unwrap(),
            target_acc: Some(0.5),
        };
        write_log_csv(&[log], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "epoch,cross,lmmd1,lmmd2,diff,lambda,total,target_acc");
        assert_eq!(lines.next().unwrap(), "1,1,0.25,0.25,0.5,1.5,2.5,0.5");
    }
}
