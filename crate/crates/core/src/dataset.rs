//! Ingestion of the UCI gas-sensor-array drift batches.
//!
//! Each `.dat` line is `label[;concentration] idx:val idx:val ...` with
//! 1-based feature indices. Labels in the files run 1..6 and are stored here
//! as class indices 0..5 in file order (see [`UciGas`]).

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UCI_NUM_FEATURES: usize = 128;
pub const UCI_NUM_CLASSES: usize = 6;
pub const UCI_NUM_BATCHES: usize = 10;
pub const STD_FLOOR: f64 = 1e-8;

/// Gas classes in the order the UCI files encode them (file label 1..6).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UciGas {
    Ethanol,
    Ethylene,
    Ammonia,
    Acetaldehyde,
    Acetone,
    Toluene,
}

impl UciGas {
    pub const ALL: [UciGas; 6] = [
        UciGas::Ethanol,
        UciGas::Ethylene,
        UciGas::Ammonia,
        UciGas::Acetaldehyde,
        UciGas::Acetone,
        UciGas::Toluene,
    ];

    /// Row order of the published composition table.
    pub const TABLE_ORDER: [UciGas; 6] = [
        UciGas::Acetone,
        UciGas::Acetaldehyde,
        UciGas::Ethanol,
        UciGas::Ethylene,
        UciGas::Ammonia,
        UciGas::Toluene,
    ];

    pub fn class_index(self) -> usize {
        UciGas::ALL.iter().position(|&g| g == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            UciGas::Ethanol => "ethanol",
            UciGas::Ethylene => "ethylene",
            UciGas::Ammonia => "ammonia",
            UciGas::Acetaldehyde => "acetaldehyde",
            UciGas::Acetone => "acetone",
            UciGas::Toluene => "toluene",
        }
    }
}

/// Per-batch sample counts in [`UciGas::TABLE_ORDER`]
/// (acetone, acetaldehyde, ethanol, ethylene, ammonia, toluene).
pub const UCI_BATCH_COMPOSITION: [[usize; 6]; UCI_NUM_BATCHES] = [
    [90, 98, 83, 30, 70, 74],
    [164, 334, 100, 109, 532, 5],
    [365, 490, 216, 240, 275, 0],
    [64, 43, 12, 30, 12, 0],
    [28, 40, 20, 46, 63, 0],
    [514, 574, 110, 29, 606, 467],
    [649, 662, 360, 744, 630, 568],
    [30, 30, 40, 33, 143, 18],
    [61, 55, 100, 75, 78, 101],
    [600, 600, 600, 600, 600, 600],
];

pub const UCI_BATCH_TOTALS: [usize; UCI_NUM_BATCHES] =
    [445, 1244, 1586, 161, 197, 2300, 3613, 294, 470, 3600];

/// Reorders a class-index histogram into table order.
pub fn histogram_in_table_order(hist: &[usize]) -> [usize; 6] {
    let mut out = [0; 6];
    for (slot, gas) in out.iter_mut().zip(UciGas::TABLE_ORDER) {
        *slot = hist.get(gas.class_index()).copied().unwrap_or(0);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GasSample {
    pub features: Vec<f64>,
    pub label: Option<usize>,
    /// ppmv
    pub concentration: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainRole {
    Source,
    Target,
}

/// One domain: a batch of samples sharing a feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    samples: Vec<GasSample>,
    batch_id: u32,
    num_classes: usize,
    feature_dim: usize,
    role: DomainRole,
}

impl DomainDataset {
    pub fn new(
        samples: Vec<GasSample>,
        batch_id: u32,
        num_classes: usize,
        feature_dim: usize,
        role: DomainRole,
    ) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(Error::Shape(format!(
                    "sample {i} has {} features, expected {feature_dim}",
                    s.features.len()
                )));
            }
            if s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("features of sample {i}")));
            }
            match s.label {
                Some(l) if l >= num_classes => {
                    return Err(Error::InvalidArgument(format!(
                        "sample {i} has label {l}, but num_classes is {num_classes}"
                    )))
                }
                None if role == DomainRole::Source => {
                    return Err(Error::InvalidArgument(format!(
                        "source sample {i} has no label"
                    )))
                }
                _ => {}
            }
        }
        Ok(DomainDataset {
            samples,
            batch_id,
            num_classes,
            feature_dim,
            role,
        })
    }

    pub fn samples(&self) -> &[GasSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch_id(&self) -> u32 {
        self.batch_id
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn role(&self) -> DomainRole {
        self.role
    }

    pub fn with_role(mut self, role: DomainRole) -> Result<Self> {
        if role == DomainRole::Source && self.samples.iter().any(|s| s.label.is_none()) {
            return Err(Error::Unlabeled);
        }
        self.role = role;
        Ok(self)
    }

    pub fn with_num_classes(self, num_classes: usize) -> Result<Self> {
        DomainDataset::new(
            self.samples,
            self.batch_id,
            num_classes,
            self.feature_dim,
            self.role,
        )
    }

    /// Row-major feature matrix, one row per sample.
    pub fn feature_matrix(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.samples.len(), self.feature_dim));
        for (mut row, s) in m.rows_mut().into_iter().zip(&self.samples) {
            row.iter_mut().zip(&s.features).for_each(|(d, &v)| *d = v);
        }
        m
    }

    /// Labels of every sample, or `Unlabeled` if any is missing.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.samples
            .iter()
            .map(|s| s.label.ok_or(Error::Unlabeled))
            .collect()
    }

    /// Separates a target domain into the unlabeled view used by training and
    /// the label vector kept for evaluation.
    pub fn split_target(&self) -> (UnlabeledDomain, Option<Vec<usize>>) {
        let view = UnlabeledDomain {
            features: self.feature_matrix(),
            batch_id: self.batch_id,
        };
        (view, self.labels().ok())
    }

    /// Applies `f` to every feature vector.
    pub fn map_features(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let samples = self
            .samples
            .iter()
            .map(|s| GasSample {
                features: f(&s.features),
                label: s.label,
                concentration: s.concentration,
            })
            .collect::<Vec<_>>();
        let dim = samples
            .first()
            .map(|s| s.features.len())
            .unwrap_or(self.feature_dim);
        DomainDataset::new(samples, self.batch_id, self.num_classes, dim, self.role)
    }
}

/// Target-domain features with labels stripped. This is the only view of the
/// target that the training loop accepts.
#[derive(Debug, Clone)]
pub struct UnlabeledDomain {
    pub features: Array2<f64>,
    pub batch_id: u32,
}

impl UnlabeledDomain {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses libsvm-style text. `origin` is only used in error messages.
pub fn parse_uci_str(
    text: &str,
    origin: &Path,
    num_features: usize,
    num_classes: usize,
    batch_id: u32,
) -> Result<DomainDataset> {
    let mut samples = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let head = fields.next().unwrap();
        let (label_txt, conc_txt) = match head.split_once(';') {
            Some((l, c)) => (l, Some(c)),
            None => (head, None),
        };
        let file_label: usize = label_txt
            .parse()
            .map_err(|_| parse_err(origin, lineno, format!("bad label `{label_txt}`")))?;
        if file_label == 0 || file_label > num_classes {
            return Err(parse_err(
                origin,
                lineno,
                format!("label {file_label} outside 1..={num_classes}"),
            ));
        }
        let concentration = match conc_txt {
            Some(c) => Some(c.parse::<f64>().map_err(|_| {
                parse_err(origin, lineno, format!("bad concentration `{c}`"))
            })?),
            None => None,
        };

        let mut features = vec![0.0; num_features];
        let mut seen = HashSet::new();
        for pair in fields {
            let (idx_txt, val_txt) = pair
                .split_once(':')
                .ok_or_else(|| parse_err(origin, lineno, format!("expected idx:val, got `{pair}`")))?;
            let idx: usize = idx_txt
                .parse()
                .map_err(|_| parse_err(origin, lineno, format!("bad index `{idx_txt}`")))?;
            if idx == 0 || idx > num_features {
                return Err(parse_err(
                    origin,
                    lineno,
                    format!("index {idx} outside 1..={num_features}"),
                ));
            }
            if !seen.insert(idx) {
                return Err(parse_err(origin, lineno, format!("duplicate index {idx}")));
            }
            let val: f64 = val_txt
                .parse()
                .map_err(|_| parse_err(origin, lineno, format!("bad value `{val_txt}`")))?;
            if !val.is_finite() {
                return Err(parse_err(origin, lineno, format!("non-finite value at index {idx}")));
            }
            features[idx - 1] = val;
        }
        samples.push(GasSample {
            features,
            label: Some(file_label - 1),
            concentration,
        });
    }
    DomainDataset::new(
        samples,
        batch_id,
        num_classes,
        num_features,
        DomainRole::Source,
    )
}

/// Extracts the batch number from names like `batch7.dat`; 0 when absent.
pub fn batch_id_from_path(path: &Path) -> u32 {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    let digits: String = stem
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().unwrap_or(0)
}

pub fn parse_uci_file(path: impl AsRef<Path>, num_features: usize) -> Result<DomainDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_uci_str(
        &text,
        path,
        num_features,
        UCI_NUM_CLASSES,
        batch_id_from_path(path),
    )
}

/// Path of batch `id` under a data directory (`batchN.dat`).
pub fn uci_batch_path(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("batch{id}.dat"))
}

/// Serializes back to the `.dat` format; every feature is written.
pub fn to_uci_string(d: &DomainDataset) -> String {
    let mut out = String::new();
    for s in d.samples() {
        let label = s.label.map(|l| l + 1).unwrap_or(0);
        match s.concentration {
            Some(c) => write!(out, "{label};{c}").unwrap(),
            None => write!(out, "{label}").unwrap(),
        }
        for (i, v) in s.features.iter().enumerate() {
            write!(out, " {}:{}", i + 1, v).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Canonical CSV dump with header `label,f1..fN`; the label column holds the
/// 0-based class index (empty when unlabeled).
pub fn write_csv(d: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["label".to_string()];
    header.extend((1..=d.feature_dim()).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for s in d.samples() {
        let mut rec = vec![s.label.map(|l| l.to_string()).unwrap_or_default()];
        rec.extend(s.features.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a CSV written by [`write_csv`] (or by the featurizer).
pub fn read_csv(
    path: impl AsRef<Path>,
    num_classes: usize,
    batch_id: u32,
    role: DomainRole,
) -> Result<DomainDataset> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.get(0) != Some("label") {
        return Err(parse_err(path, 1, "first column must be `label`"));
    }
    let dim = header.len() - 1;
    let mut samples = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let label = match rec.get(0).unwrap_or("") {
            "" => None,
            t => Some(
                t.parse::<usize>()
                    .map_err(|_| parse_err(path, line, format!("bad label `{t}`")))?,
            ),
        };
        let features = rec
            .iter()
            .skip(1)
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| parse_err(path, line, format!("bad value `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(GasSample {
            features,
            label,
            concentration: None,
        });
    }
    DomainDataset::new(samples, batch_id, num_classes, dim, role)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.position().map(|p| p.line() as usize).unwrap_or(0),
        msg: e.to_string(),
    }
}

/// Per-class sample counts indexed by class index.
pub fn class_histogram(d: &DomainDataset) -> Result<Vec<usize>> {
    let mut hist = vec![0; d.num_classes()];
    for s in d.samples() {
        let l = s.label.ok_or(Error::Unlabeled)?;
        hist[l] += 1;
    }
    Ok(hist)
}

/// Number of classes present in the union of source labels.
pub fn num_classes_from_sources(sources: &[DomainDataset]) -> Result<usize> {
    let mut max = None;
    for d in sources {
        for l in d.labels()? {
            max = Some(max.map_or(l, |m: usize| m.max(l)));
        }
    }
    max.map(|m| m + 1)
        .ok_or_else(|| Error::Empty("no labeled source samples".into()))
}

/// Per-feature z-score transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn fit_standardizer(datasets: &[&DomainDataset]) -> Result<Standardizer> {
    let dim = datasets
        .first()
        .ok_or_else(|| Error::Empty("no datasets to fit".into()))?
        .feature_dim();
    if datasets.iter().any(|d| d.feature_dim() != dim) {
        return Err(Error::Shape("datasets disagree on feature_dim".into()));
    }
    let n: usize = datasets.iter().map(|d| d.len()).sum();
    if n == 0 {
        return Err(Error::Empty("no samples to fit a standardizer".into()));
    }
    let rows = || datasets.iter().flat_map(|d| d.samples()).map(|s| &s.features);
    let mut mean = vec![0.0; dim];
    for f in rows() {
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; dim];
    for f in rows() {
        for ((acc, v), m) in var.iter_mut().zip(f).zip(&mean) {
            *acc += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|v| (v / n as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(Standardizer { mean, std })
}

impl Standardizer {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect()
    }

    pub fn apply_dataset(&self, d: &DomainDataset) -> Result<DomainDataset> {
        if d.feature_dim() != self.dim() {
            return Err(Error::Shape(format!(
                "standardizer has dim {}, dataset has {}",
                self.dim(),
                d.feature_dim()
            )));
        }
        d.map_features(|x| self.apply(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<DomainDataset> {
        parse_uci_str(text, Path::new("mem.dat"), 4, 6, 1)
    }

    #[test]
    fn zero_line_maps_label_and_fills_features() {
        let line = format!(
            "3 {}",
            (1..=128).map(|i| format!("{i}:0.0")).collect::<Vec<_>>().join(" ")
        );
        let d = parse_uci_str(&line, Path::new("x"), 128, 6, 1).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d.samples()[0].label, Some(2));
        assert!(d.samples()[0].features.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concentration_prefix_and_missing_indices() {
        let d = parse("1;10.5 2:3.0\n6 4:-1e2\n").unwrap();
        assert_eq!(d.samples()[0].concentration, Some(10.5));
        assert_eq!(d.samples()[0].features, vec![0.0, 3.0, 0.0, 0.0]);
        assert_eq!(d.samples()[1].label, Some(5));
        assert_eq!(d.samples()[1].features[3], -100.0);
    }

    #[test]
    fn errors_name_the_line() {
        let err = parse("1 1:1\n2 1:1 1:2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("duplicate"));

        let err = parse("1 5:1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        assert!(err.to_string().contains("outside"));

        assert!(matches!(parse("x 1:1").unwrap_err(), Error::Parse { .. }));
        assert!(matches!(parse("1 1=2").unwrap_err(), Error::Parse { .. }));
        assert!(matches!(parse("7 1:1").unwrap_err(), Error::Parse { .. }));
        assert!(matches!(parse("1 1:nan").unwrap_err(), Error::Parse { .. }));
    }

    #[test]
    fn batch_id_from_file_name() {
        assert_eq!(batch_id_from_path(Path::new("/d/batch10.dat")), 10);
        assert_eq!(batch_id_from_path(Path::new("batch3.dat")), 3);
        assert_eq!(batch_id_from_path(Path::new("foo.dat")), 0);
    }

    #[test]
    fn histograms() {
        let empty = DomainDataset::new(vec![], 1, 6, 4, DomainRole::Source).unwrap();
        assert_eq!(class_histogram(&empty).unwrap(), vec![0; 6]);

        let samples = (0..30)
            .map(|i| GasSample {
                features: vec![0.0; 2],
                label: Some(i % 3),
                concentration: None,
            })
            .collect();
        let d = DomainDataset::new(samples, 1, 3, 2, DomainRole::Source).unwrap();
        assert_eq!(class_histogram(&d).unwrap(), vec![10, 10, 10]);

        let unl = DomainDataset::new(
            vec![GasSample {
                features: vec![1.0],
                label: None,
                concentration: None,
            }],
            3,
            6,
            1,
            DomainRole::Target,
        )
        .unwrap();
        assert!(matches!(class_histogram(&unl), Err(Error::Unlabeled)));
    }

    #[test]
    fn table_order_reordering() {
        // class-index order: ethanol, ethylene, ammonia, acetaldehyde, acetone, toluene
        let hist = [100, 109, 532, 334, 164, 5];
        assert_eq!(histogram_in_table_order(&hist), [164, 334, 100, 109, 532, 5]);
        for (row, total) in UCI_BATCH_COMPOSITION.iter().zip(UCI_BATCH_TOTALS) {
            assert_eq!(row.iter().sum::<usize>(), total);
        }
    }

    #[test]
    fn standardizer_two_points() {
        let samples = vec![
            GasSample { features: vec![0.0, 0.0], label: Some(0), concentration: None },
            GasSample { features: vec![2.0, 2.0], label: Some(0), concentration: None },
        ];
        let d = DomainDataset::new(samples, 1, 1, 2, DomainRole::Source).unwrap();
        let s = fit_standardizer(&[&d]).unwrap();
        assert_eq!(s.mean, vec![1.0, 1.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
    }

    #[test]
    fn standardizer_constant_column() {
        let samples = (0..5)
            .map(|i| GasSample {
                features: vec![3.0, i as f64],
                label: Some(0),
                concentration: None,
            })
            .collect();
        let d = DomainDataset::new(samples, 1, 1, 2, DomainRole::Source).unwrap();
        let s = fit_standardizer(&[&d]).unwrap();
        assert_eq!(s.std[0], STD_FLOOR);
        let z = s.apply_dataset(&d).unwrap();
        assert!(z.samples().iter().all(|x| x.features[0] == 0.0));
    }

    #[test]
    fn standardizer_empty_union() {
        let d = DomainDataset::new(vec![], 1, 1, 2, DomainRole::Source).unwrap();
        assert!(matches!(fit_standardizer(&[&d]), Err(Error::Empty(_))));
        assert!(matches!(fit_standardizer(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn source_requires_labels() {
        let s = GasSample { features: vec![1.0], label: None, concentration: None };
        assert!(DomainDataset::new(vec![s], 1, 2, 1, DomainRole::Source).is_err());
    }
}
