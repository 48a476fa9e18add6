//! End-to-end commands: ingest, train, reproduce, featurize. The CLI is a thin
//! layer over these functions.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    class_histogram, fit_standardizer, histogram_in_table_order, parse_uci_file, read_csv,
    uci_batch_path, write_csv, DomainDataset, DomainRole, GasSample, Standardizer,
    UCI_BATCH_COMPOSITION, UCI_BATCH_TOTALS, UCI_NUM_BATCHES, UCI_NUM_CLASSES, UCI_NUM_FEATURES,
};
use crate::error::{Error, Result};
use crate::evaluate::{export_embeddings, weighted_average_accuracy, EvalReport, PairSpec, TargetMonitor};
use crate::features::{extract_array_features, read_trial, SteadyWindow, FEATURES_PER_SENSOR, SENSORS_PER_ARRAY};
use crate::trainer::{save_checkpoint, train_with_progress, write_log_csv, Checkpoint, DatasetKind, EpochLog, TrainConfig};

/// Environment variable naming the directory with `batch{i}.dat` files.
pub const DATA_DIR_ENV: &str = "DRIFT_DATA_DIR";

/// Per-target steady-state accuracy (%) of the published model for
/// sources {1, 2} and targets 3..=10.
pub const REFERENCE_UCI_ACCURACY: [(u32, f64); 8] = [
    (3, 99.05),
    (4, 88.46),
    (5, 98.44),
    (6, 93.31),
    (7, 86.17),
    (8, 89.24),
    (9, 71.06),
    (10, 66.83),
];

/// Published weighted average over targets 3..=10 (%).
pub const REFERENCE_UCI_WEIGHTED: f64 = 83.20;

pub fn resolve_data_dir(flag: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.to_path_buf());
    }
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| Error::InvalidArgument(format!("no data directory: pass --data-dir or set {DATA_DIR_ENV}")))
}

// ---------------------------------------------------------------- ingest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestRow {
    pub batch_id: u32,
    pub path: PathBuf,
    pub total: usize,
    /// Composition order: acetone, acetaldehyde, ethanol, ethylene, ammonia, toluene.
    pub counts: [usize; 6],
    pub expected_total: Option<usize>,
    pub expected_counts: Option<[usize; 6]>,
}

impl IngestRow {
    pub fn matches(&self) -> bool {
        self.expected_total.is_none_or(|t| t == self.total)
            && self.expected_counts.is_none_or(|c| c == self.counts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: Vec<IngestRow>,
}

impl IngestReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(IngestRow::matches)
    }

    pub fn failures(&self) -> Vec<String> {
        self.rows
            .iter()
            .filter(|r| !r.matches())
            .map(|r| {
                format!(
                    "batch {}: found {} samples {:?}, expected {} {:?}",
                    r.batch_id,
                    r.total,
                    r.counts,
                    r.expected_total.unwrap_or(0),
                    r.expected_counts.unwrap_or_default()
                )
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("batch  total  acetone acetaldehyde ethanol ethylene ammonia toluene  status\n");
        for r in &self.rows {
            let c = r.counts;
            let status = match (r.expected_total, r.matches()) {
                (None, _) => "n/a".to_string(),
                (Some(_), true) => "PASS".to_string(),
                (Some(t), false) => format!("FAIL (expected {t} {:?})", r.expected_counts.unwrap_or_default()),
            };
            writeln!(
                s,
                "{:>5} {:>6}  {:>7} {:>12} {:>7} {:>8} {:>7} {:>7}  {status}",
                r.batch_id, r.total, c[0], c[1], c[2], c[3], c[4], c[5]
            )
            .unwrap();
        }
        s.push_str(if self.passed() { "validation PASS\n" } else { "validation FAIL\n" });
        s
    }
}

/// Parses UCI batch files, optionally dumps each as CSV into `out`, and
/// checks sample counts against the published composition. Files whose
/// name carries no batch id in 1..=10 are dumped but not validated.
pub fn ingest(paths: &[PathBuf], out: Option<&Path>) -> Result<(Vec<DomainDataset>, IngestReport)> {
    if paths.is_empty() {
        return Err(Error::Empty("no input files".into()));
    }
    let datasets = paths
        .iter()
        .map(|p| parse_uci_file(p, UCI_NUM_FEATURES))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (p, d) in paths.iter().zip(&datasets) {
        let id = d.batch_id();
        let known = (1..=UCI_NUM_BATCHES as u32).contains(&id);
        let idx = id.saturating_sub(1) as usize;
        rows.push(IngestRow {
            batch_id: id,
            path: p.clone(),
            total: d.len(),
            counts: histogram_in_table_order(&class_histogram(d)?),
            expected_total: known.then(|| UCI_BATCH_TOTALS[idx]),
            expected_counts: known.then(|| UCI_BATCH_COMPOSITION[idx]),
        });
    }
    let report = IngestReport { rows };
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        for d in &datasets {
            write_csv(d, out.join(format!("batch{}.csv", d.batch_id())))?;
        }
        let p = out.join("ingest_report.txt");
        fs::write(&p, report.to_text()).map_err(|e| Error::io(&p, e))?;
        let p = out.join("ingest_report.json");
        fs::write(&p, serde_json::to_string_pretty(&report).unwrap()).map_err(|e| Error::io(&p, e))?;
    }
    Ok((datasets, report))
}

// ---------------------------------------------------------------- train

/// Loads batch `id` from `dir`: `batch{id}.dat` when present, otherwise a
/// `batch{id}.csv` feature file.
pub fn load_batch(dir: &Path, id: u32, kind: DatasetKind) -> Result<DomainDataset> {
    let dat = uci_batch_path(dir, id);
    if kind == DatasetKind::Uci && dat.exists() {
        return parse_uci_file(&dat, UCI_NUM_FEATURES);
    }
    let csv = dir.join(format!("batch{id}.csv"));
    if csv.exists() {
        let d = read_csv(&csv, usize::MAX, id, DomainRole::Target)?;
        let k = d.samples().iter().filter_map(|s| s.label).max().map_or(1, |m| m + 1);
        return d.with_num_classes(k);
    }
    Err(Error::InvalidArgument(format!(
        "batch {id} not found in {} (looked for {} and {})",
        dir.display(),
        dat.display(),
        csv.display()
    )))
}

#[derive(Debug, Clone)]
pub struct TrainRequest {
    pub sources: Vec<u32>,
    pub target: u32,
    pub config: TrainConfig,
    pub data_dir: PathBuf,
    pub out: PathBuf,
}

impl TrainRequest {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::InvalidArgument("at least one source batch is required".into()));
        }
        if self.sources.contains(&self.target) {
            return Err(Error::InvalidArgument(format!("target batch {} is also a source", self.target)));
        }
        let mut s = self.sources.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.sources.len() {
            return Err(Error::InvalidArgument("duplicate source batch".into()));
        }
        self.config.validate()
    }

    /// Directory name derived from the pair, the seed and the config hash,
    /// so repeated runs land in the same place.
    pub fn run_name(&self) -> String {
        let src: Vec<String> = self.sources.iter().map(u32::to_string).collect();
        format!(
            "run_s{}_t{}_seed{}_{}",
            src.join("-"),
            self.target,
            self.config.seed,
            &self.config.hash()[..12]
        )
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out.join(self.run_name())
    }
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub sources: Vec<DomainDataset>,
    pub target: DomainDataset,
    pub standardizer: Option<Standardizer>,
}

/// Loads the domains, aligns class counts and z-scores everything with
/// statistics fitted on the sources.
pub fn prepare_data(req: &TrainRequest) -> Result<PreparedData> {
    let kind = req.config.dataset;
    let mut sources = req
        .sources
        .iter()
        .map(|&id| load_batch(&req.data_dir, id, kind))
        .collect::<Result<Vec<_>>>()?;
    let mut target = load_batch(&req.data_dir, req.target, kind)?;
    let k = match kind {
        DatasetKind::Uci => UCI_NUM_CLASSES,
        DatasetKind::Enose => sources
            .iter()
            .chain(std::iter::once(&target))
            .map(DomainDataset::num_classes)
            .max()
            .unwrap_or(1),
    };
    sources = sources
        .into_iter()
        .map(|d| d.with_num_classes(k)?.with_role(DomainRole::Source))
        .collect::<Result<_>>()?;
    target = target.with_num_classes(k)?.with_role(DomainRole::Target)?;
    let standardizer = if req.config.standardize {
        let refs: Vec<&DomainDataset> = sources.iter().collect();
        let st = fit_standardizer(&refs)?;
        sources = sources.iter().map(|d| st.apply_dataset(d)).collect::<Result<_>>()?;
        target = st.apply_dataset(&target)?;
        Some(st)
    } else {
        None
    };
    Ok(PreparedData {
        sources,
        target,
        standardizer,
    })
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub report: EvalReport,
    pub logs: Vec<EpochLog>,
}

/// Trains one pair and writes checkpoint, epoch log, report and embeddings
/// into the run directory. Target labels are only used for monitoring.
pub fn run_train(req: &TrainRequest, progress: impl FnMut(&EpochLog)) -> Result<RunArtifacts> {
    req.validate()?;
    let data = prepare_data(req)?;
    let (target, target_labels) = data.target.split_target();
    let target_labels = target_labels.ok_or(Error::Unlabeled)?;
    let monitor = TargetMonitor::new(target.features.clone(), target_labels.clone())?;
    let cfg = &req.config;
    let outcome = train_with_progress(&data.sources, &target, cfg, Some(&monitor), progress)?;

    let pair = PairSpec {
        sources: req.sources.clone(),
        target: req.target,
    };
    let report = EvalReport::build(
        &outcome.model,
        &monitor,
        &outcome.logs,
        pair,
        cfg.seed,
        cfg.hash(),
        cfg.steady_window_frac,
    )?;

    let dir = req.run_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let write = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("config.toml", cfg.to_toml()?)?;
    if let Some(st) = &data.standardizer {
        write("standardizer.json", serde_json::to_string(st).unwrap())?;
    }
    save_checkpoint(&Checkpoint::from_outcome(&outcome, cfg), dir.join("checkpoint.bin"))?;
    write_log_csv(&outcome.logs, dir.join("log.csv"))?;
    write("report.json", report.to_json())?;
    report.write_csv(dir.join("report.csv"))?;
    for (j, src) in data.sources.iter().enumerate() {
        export_embeddings(
            &outcome.model,
            j,
            (&src.feature_matrix(), &src.labels()?),
            (&target.features, Some(&target_labels)),
            dir.join(format!("embeddings_pair{}.csv", j + 1)),
        )?;
    }
    Ok(RunArtifacts {
        dir,
        report,
        logs: outcome.logs,
    })
}

// ---------------------------------------------------------------- reproduce

#[derive(Debug, Clone, Default)]
pub struct ReproduceOptions {
    pub seeds: Vec<u64>,
    /// Restrict to these targets (3..=10).
    pub only: Vec<u32>,
    pub jobs: usize,
    pub epochs: Option<usize>,
    pub lambda_minus_one: bool,
    pub source_only: bool,
    pub steady_window_frac: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReproduceRow {
    pub target: u32,
    pub samples: usize,
    /// Steady-state accuracies (%), one per successful seed.
    pub accs: Vec<f64>,
    pub failures: Vec<String>,
    pub reference: f64,
}

impl ReproduceRow {
    pub fn mean(&self) -> Option<f64> {
        (!self.accs.is_empty()).then(|| self.accs.iter().sum::<f64>() / self.accs.len() as f64)
    }

    /// Sample standard deviation; zero for a single run.
    pub fn sd(&self) -> Option<f64> {
        let m = self.mean()?;
        let n = self.accs.len();
        if n < 2 {
            return Some(0.0);
        }
        Some((self.accs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReproduceSummary {
    pub rows: Vec<ReproduceRow>,
}

impl ReproduceSummary {
    /// Sample-weighted mean over rows with at least one successful run.
    pub fn weighted_average(&self) -> Option<f64> {
        let pairs: Vec<(f64, usize)> = self.rows.iter().filter_map(|r| r.mean().map(|m| (m, r.samples))).collect();
        weighted_average_accuracy(&pairs).ok()
    }

    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| !r.failures.is_empty())
    }

    pub const CSV_HEADER: [&'static str; 8] =
        ["target", "samples", "mean_acc", "sd_acc", "runs", "failed", "reference_acc", "delta"];

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_HEADER).unwrap();
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        for r in &self.rows {
            let m = r.mean();
            w.write_record([
                r.target.to_string(),
                r.samples.to_string(),
                fmt(m),
                fmt(r.sd()),
                r.accs.len().to_string(),
                r.failures.len().to_string(),
                format!("{:.2}", r.reference),
                fmt(m.map(|m| m - r.reference)),
            ])
            .unwrap();
        }
        let total: usize = self.rows.iter().map(|r| r.samples).sum();
        let wa = self.weighted_average();
        let reference = weighted_average_accuracy(
            &self.rows.iter().map(|r| (r.reference, r.samples)).collect::<Vec<_>>(),
        )
        .ok();
        w.write_record([
            "weighted".to_string(),
            total.to_string(),
            fmt(wa),
            String::new(),
            self.rows.iter().map(|r| r.accs.len()).sum::<usize>().to_string(),
            self.rows.iter().map(|r| r.failures.len()).sum::<usize>().to_string(),
            fmt(reference),
            fmt(wa.zip(reference).map(|(a, b)| a - b)),
        ])
        .unwrap();
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| target | samples | accuracy (%) | reference (%) | runs | failed |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let acc = match (r.mean(), r.sd()) {
                (Some(m), Some(sd)) => format!("{m:.2} ± {sd:.2}"),
                _ => "n/a".into(),
            };
            writeln!(
                s,
                "| {} | {} | {acc} | {:.2} | {} | {} |",
                r.target,
                r.samples,
                r.reference,
                r.accs.len(),
                r.failures.len()
            )
            .unwrap();
        }
        let wa = self.weighted_average().map(|w| format!("{w:.2}")).unwrap_or_else(|| "n/a".into());
        writeln!(s, "| weighted | {} | {wa} | {REFERENCE_UCI_WEIGHTED:.2} | | |", self.rows.iter().map(|r| r.samples).sum::<usize>()).unwrap();
        for r in &self.rows {
            for f in &r.failures {
                writeln!(s, "\nbatch {} failed: {f}", r.target).unwrap();
            }
        }
        s
    }
}

/// Runs sources {1,2} against each target with the shipped per-target
/// configs, over all seeds. Failed runs are recorded and the rest continue.
pub fn reproduce_uci(
    data_dir: &Path,
    out: &Path,
    opts: &ReproduceOptions,
    log: impl Fn(&str) + Sync,
) -> Result<ReproduceSummary> {
    if opts.seeds.is_empty() {
        return Err(Error::InvalidArgument("no seeds given".into()));
    }
    let targets: Vec<u32> = if opts.only.is_empty() {
        (3..=10).collect()
    } else {
        for t in &opts.only {
            if !(3..=10).contains(t) {
                return Err(Error::InvalidArgument(format!("target {t} is outside 3..=10")));
            }
        }
        opts.only.clone()
    };
    let mut jobs = Vec::new();
    for &t in &targets {
        let mut cfg = TrainConfig::preset(&format!("uci_1_2_{t}"))?;
        if let Some(e) = opts.epochs {
            cfg.epochs = e;
        }
        if let Some(f) = opts.steady_window_frac {
            cfg.steady_window_frac = f;
        }
        cfg.lambda_minus_one |= opts.lambda_minus_one;
        cfg.source_only |= opts.source_only;
        for &seed in &opts.seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            jobs.push(TrainRequest {
                sources: vec![1, 2],
                target: t,
                config: c,
                data_dir: data_dir.to_path_buf(),
                out: out.to_path_buf(),
            });
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let results: Vec<(u32, std::result::Result<f64, String>)> = pool.install(|| {
        jobs.par_iter()
            .map(|req| {
                let r = run_train(req, |_| {});
                match &r {
                    Ok(a) => log(&format!(
                        "target {} seed {}: steady acc {:.2}%",
                        req.target,
                        req.config.seed,
                        100.0 * a.report.steady_acc
                    )),
                    Err(e) => log(&format!("target {} seed {}: FAILED: {e}", req.target, req.config.seed)),
                }
                (req.target, r.map(|a| 100.0 * a.report.steady_acc).map_err(|e| e.to_string()))
            })
            .collect()
    });
    let rows = targets
        .iter()
        .map(|&t| {
            let mut row = ReproduceRow {
                target: t,
                samples: UCI_BATCH_TOTALS[(t - 1) as usize],
                accs: Vec::new(),
                failures: Vec::new(),
                reference: REFERENCE_UCI_ACCURACY.iter().find(|r| r.0 == t).unwrap().1,
            };
            for (rt, res) in &results {
                if *rt == t {
                    match res {
                        Ok(a) => row.accs.push(*a),
                        Err(e) => row.failures.push(e.clone()),
                    }
                }
            }
            row
        })
        .collect();
    let summary = ReproduceSummary { rows };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let p = out.join("reproduce_uci.csv");
    fs::write(&p, summary.to_csv()).map_err(|e| Error::io(&p, e))?;
    let p = out.join("reproduce_uci.md");
    fs::write(&p, summary.to_markdown()).map_err(|e| Error::io(&p, e))?;
    Ok(summary)
}

// ---------------------------------------------------------------- featurize

/// Turns raw trials listed in a manifest (`trial,baseline,label`, paths
/// relative to the manifest) into a `label,f1..f40` feature CSV.
pub fn featurize(manifest: &Path, out: &Path, steady_frac: f64, batch_id: u32) -> Result<DomainDataset> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut r = csv::Reader::from_path(manifest).map_err(|e| Error::Parse {
        path: manifest.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    let mut samples = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let bad = |msg: String| Error::Parse {
            path: manifest.to_path_buf(),
            line: i + 2,
            msg,
        };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() < 2 {
            return Err(bad("expected trial,baseline[,label]".into()));
        }
        let curves = read_trial(&base.join(&rec[0]), &base.join(&rec[1]))?;
        let w = SteadyWindow::trailing_fraction(curves[0].len(), steady_frac)?;
        let label = match rec.get(2).map(str::trim) {
            None | Some("") => None,
            Some(t) => Some(t.parse::<usize>().map_err(|_| bad(format!("bad label `{t}`")))?),
        };
        samples.push(GasSample {
            features: extract_array_features(&curves, w)?,
            label,
            concentration: None,
        });
    }
    if samples.is_empty() {
        return Err(Error::Empty(format!("{} lists no trials", manifest.display())));
    }
    let k = samples.iter().filter_map(|s| s.label).max().map_or(1, |m| m + 1);
    let d = DomainDataset::new(samples, batch_id, k, SENSORS_PER_ARRAY * FEATURES_PER_SENSOR, DomainRole::Source)?;
    write_csv(&d, out)?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::to_uci_string;
    use crate::synth::{synthetic_uci, DriftSpec};

    fn write_synthetic(dir: &Path, scale: f64) -> Vec<PathBuf> {
        synthetic_uci(DriftSpec::default(), scale)
            .unwrap()
            .iter()
            .map(|d| {
                let p = uci_batch_path(dir, d.batch_id());
                fs::write(&p, to_uci_string(d)).unwrap();
                p
            })
            .collect()
    }

    #[test]
    fn ingest_validates_composition() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_synthetic(dir.path(), 1.0);
        let out = dir.path().join("out");
        let (_, report) = ingest(&paths, Some(&out)).unwrap();
        assert!(report.passed(), "{}", report.to_text());
        assert_eq!(report.rows[0].total, 445);
        assert_eq!(report.rows[6].total, 3613);
        assert_eq!(report.rows[9].total, 3600);
        assert!(out.join("batch7.csv").exists());
        assert!(out.join("ingest_report.txt").exists());
    }

    #[test]
    fn ingest_flags_tampered_batch() {
        let dir = tempfile::tempdir().unwrap();
        let paths = write_synthetic(dir.path(), 1.0);
        let text = fs::read_to_string(&paths[3]).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.remove(5);
        fs::write(&paths[3], lines.join("\n")).unwrap();
        let (_, report) = ingest(&paths, None).unwrap();
        assert!(!report.passed());
        let f = report.failures();
        assert_eq!(f.len(), 1);
        assert!(f[0].contains("batch 4") && f[0].contains("expected 161"), "{}", f[0]);
    }

    #[test]
    fn ingest_rejects_empty_input() {
        let e = ingest(&[], None).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn run_name_is_deterministic_and_disjointness_checked() {
        let mut cfg = TrainConfig::preset("uci_1_2_3").unwrap();
        cfg.seed = 7;
        let req = TrainRequest {
            sources: vec![1, 2],
            target: 3,
            config: cfg.clone(),
            data_dir: "d".into(),
            out: "o".into(),
        };
        assert_eq!(req.run_name(), req.clone().run_name());
        assert!(req.run_name().starts_with("run_s1-2_t3_seed7_"));
        let bad = TrainRequest { target: 2, ..req };
        assert_eq!(bad.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn summary_tables() {
        let summary = ReproduceSummary {
            rows: vec![
                ReproduceRow {
                    target: 3,
                    samples: 1586,
                    accs: vec![98.0, 100.0],
                    failures: vec![],
                    reference: 99.05,
                },
                ReproduceRow {
                    target: 4,
                    samples: 161,
                    accs: vec![],
                    failures: vec!["diverged".into()],
                    reference: 88.46,
                },
            ],
        };
        let r0 = &summary.rows[0];
        assert_eq!(r0.mean(), Some(99.0));
        assert!((r0.sd().unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(summary.weighted_average(), Some(99.0));
        assert!(summary.any_failed());

        let csv = summary.to_csv();
        let mut rd = csv::Reader::from_reader(csv.as_bytes());
        assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), ReproduceSummary::CSV_HEADER);
        let recs: Vec<_> = rd.records().map(|r| r.unwrap()).collect();
        assert_eq!(recs.len(), 3);
        assert_eq!(&recs[2][0], "weighted");
        assert!(summary.to_markdown().contains("batch 4 failed: diverged"));
    }
}
