//! Target prediction by averaging classifier outputs, accuracy metrics,
//! reports and embedding export.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Model;
use crate::trainer::EpochLog;

const EVAL_CHUNK: usize = 512;

/// Argmax of the mean of the classifiers' probability rows; ties go to the
/// lowest class index.
pub fn predict_from_probs(probs: &[Array2<f64>]) -> Result<Vec<usize>> {
    let first = probs.first().ok_or_else(|| Error::Empty("no classifier outputs".into()))?;
    if probs.iter().any(|p| p.dim() != first.dim()) {
        return Err(Error::Shape("classifier outputs differ in shape".into()));
    }
    let mut mean = Array2::<f64>::zeros(first.raw_dim());
    for p in probs {
        mean += p;
    }
    mean /= probs.len() as f64;
    Ok(mean
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (k, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Eval-mode predictions for raw feature rows.
pub fn predict(model: &Model, x: &Array2<f64>) -> Result<Vec<usize>> {
    if x.ncols() != model.arch().input_dim() {
        return Err(Error::Shape(format!(
            "input width {}, model expects {}",
            x.ncols(),
            model.arch().input_dim()
        )));
    }
    let outs = model.target_outputs(x, EVAL_CHUNK)?;
    let probs: Vec<Array2<f64>> = outs.into_iter().map(|(_, p)| p).collect();
    predict_from_probs(&probs)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Empty("no predictions".into()));
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `m[true][predicted]` counts.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    if preds.len() != labels.len() {
        return Err(Error::Shape("prediction and label counts differ".into()));
    }
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= num_classes || l >= num_classes {
            return Err(Error::InvalidArgument(format!("class index out of range for {num_classes} classes")));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Recall per true class; `None` for classes absent from the labels.
pub fn per_class_recall(confusion: &[Vec<usize>]) -> Vec<Option<f64>> {
    confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[k] as f64 / n as f64)
        })
        .collect()
}

/// `sum(acc_b * n_b) / sum(n_b)`.
pub fn weighted_average_accuracy(per_batch: &[(f64, usize)]) -> Result<f64> {
    if per_batch.is_empty() {
        return Err(Error::Empty("no batches to average".into()));
    }
    let total: usize = per_batch.iter().map(|(_, n)| n).sum();
    if total == 0 || per_batch.iter().any(|&(_, n)| n == 0) {
        return Err(Error::InvalidArgument("every batch needs a positive sample count".into()));
    }
    Ok(per_batch.iter().map(|&(a, n)| a * n as f64).sum::<f64>() / total as f64)
}

/// Number of trailing epochs averaged for the steady-state accuracy.
pub fn steady_window(num_epochs: usize, frac: f64) -> usize {
    ((num_epochs as f64 * frac).ceil() as usize).clamp(1, num_epochs.max(1))
}

/// Mean of the last `ceil(frac * len)` accuracies.
pub fn steady_accuracy(accs: &[f64], frac: f64) -> Result<f64> {
    if accs.is_empty() {
        return Err(Error::Empty("no epoch accuracies".into()));
    }
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::InvalidArgument(format!("window fraction {frac} not in (0, 1]")));
    }
    let w = steady_window(accs.len(), frac);
    Ok(accs[accs.len() - w..].iter().sum::<f64>() / w as f64)
}

/// Labeled view of the target domain, kept apart from the training inputs.
#[derive(Debug, Clone)]
pub struct TargetMonitor {
    features: Array2<f64>,
    labels: Vec<usize>,
}

impl TargetMonitor {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} rows for {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        Ok(TargetMonitor { features, labels })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn predict(&self, model: &Model) -> Result<Vec<usize>> {
        predict(model, &self.features)
    }

    pub fn accuracy(&self, model: &Model) -> Result<f64> {
        accuracy(&self.predict(model)?, &self.labels)
    }
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub sources: Vec<u32>,
    pub target: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub pair: PairSpec,
    pub seed: u64,
    pub config_hash: String,
    pub final_acc: f64,
    pub steady_acc: f64,
    pub steady_window: usize,
    pub per_class_recall: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
    pub epochs: usize,
}

impl EvalReport {
    /// Builds the report from the training log and the final model.
    pub fn build(
        model: &Model,
        monitor: &TargetMonitor,
        logs: &[EpochLog],
        pair: PairSpec,
        seed: u64,
        config_hash: String,
        steady_frac: f64,
    ) -> Result<Self> {
        let preds = monitor.predict(model)?;
        let final_acc = accuracy(&preds, monitor.labels())?;
        let confusion = confusion_matrix(&preds, monitor.labels(), model.arch().num_classes)?;
        let accs: Vec<f64> = logs
            .iter()
            .map(|l| l.target_acc.ok_or_else(|| Error::InvalidArgument("epoch log without target accuracy".into())))
            .collect::<Result<_>>()?;
        Ok(EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            pair,
            seed,
            config_hash,
            final_acc,
            steady_acc: steady_accuracy(&accs, steady_frac)?,
            steady_window: steady_window(accs.len(), steady_frac),
            per_class_recall: per_class_recall(&confusion),
            confusion,
            epochs: logs.len(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("bad report: {e}")))
    }

    pub const CSV_HEADER: [&'static str; 7] =
        ["sources", "target", "seed", "config_hash", "final_acc", "steady_acc", "epochs"];

    pub fn csv_row(&self) -> [String; 7] {
        let sources: Vec<String> = self.pair.sources.iter().map(|s| s.to_string()).collect();
        [
            sources.join(" "),
            self.pair.target.to_string(),
            self.seed.to_string(),
            self.config_hash.clone(),
            self.final_acc.to_string(),
            self.steady_acc.to_string(),
            self.epochs.to_string(),
        ]
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        w.write_record(Self::CSV_HEADER).map_err(|e| Error::io(path, e.into()))?;
        w.write_record(self.csv_row()).map_err(|e| Error::io(path, e.into()))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Writes the fused features of pair `j` for a source domain and the target
/// as CSV: one column per feature, then `domain` and `label` (empty when
/// unknown).
pub fn export_embeddings(
    model: &Model,
    pair: usize,
    source: (&Array2<f64>, &[usize]),
    target: (&Array2<f64>, Option<&[usize]>),
    path: impl AsRef<Path>,
) -> Result<usize> {
    let path = path.as_ref();
    if source.0.nrows() != source.1.len() {
        return Err(Error::Shape("source rows and labels differ".into()));
    }
    if let Some(l) = target.1 {
        if l.len() != target.0.nrows() {
            return Err(Error::Shape("target rows and labels differ".into()));
        }
    }
    let width = model.arch().fused_width();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header: Vec<String> = (1..=width).map(|i| format!("f{i}")).collect();
    header.push("domain".into());
    header.push("label".into());
    w.write_record(&header).map_err(|e| Error::io(path, e.into()))?;
    let mut rows = 0;
    for (domain, x, labels) in [
        ("source", source.0, Some(source.1)),
        ("target", target.0, target.1),
    ] {
        let fused = model.fused_features(x, pair)?;
        for (i, r) in fused.rows().into_iter().enumerate() {
            let mut rec: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            rec.push(domain.into());
            rec.push(labels.map(|l| l[i].to_string()).unwrap_or_default());
            w.write_record(&rec).map_err(|e| Error::io(path, e.into()))?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ArchConfig;
    use ndarray::array;

    #[test]
    fn predict_by_mean_probability() {
        let a = array![[0.6, 0.4]];
        let b = array![[0.2, 0.8]];
        assert_eq!(predict_from_probs(&[a.clone(), b]).unwrap(), vec![1]);
        assert_eq!(predict_from_probs(&[a.clone(), a.clone()]).unwrap(), vec![0]);
        assert_eq!(predict_from_probs(&[array![[0.5, 0.5]]]).unwrap(), vec![0]);
        assert_eq!(predict_from_probs(&[array![[0.2, 0.4, 0.4]]]).unwrap(), vec![1]);
        assert!(predict_from_probs(&[]).is_err());
        assert!(predict_from_probs(&[a, array![[0.1, 0.2, 0.7]]]).is_err());
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 2, 0], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 1, 1]).unwrap(), 0.75);
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn confusion_and_recall() {
        let preds = [0, 1, 1, 2, 2, 0];
        let labels = [0, 1, 2, 2, 2, 1];
        let m = confusion_matrix(&preds, &labels, 4).unwrap();
        let rowsums: Vec<usize> = m.iter().map(|r| r.iter().sum()).collect();
        assert_eq!(rowsums, vec![1, 2, 3, 0]);
        let trace: usize = (0..4).map(|k| m[k][k]).sum();
        assert_eq!(trace as f64 / 6.0, accuracy(&preds, &labels).unwrap());
        let r = per_class_recall(&m);
        assert_eq!(r, vec![Some(1.0), Some(0.5), Some(2.0 / 3.0), None]);
    }

    #[test]
    fn weighted_average_cases() {
        assert!((weighted_average_accuracy(&[(0.5, 10), (0.7, 10)]).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(weighted_average_accuracy(&[(0.42, 7)]).unwrap(), 0.42);
        assert!((weighted_average_accuracy(&[(1.0, 1), (0.0, 3)]).unwrap() - 0.25).abs() < 1e-15);
        assert!(weighted_average_accuracy(&[]).is_err());
        assert!(weighted_average_accuracy(&[(0.4, 0)]).is_err());
    }

    #[test]
    fn steady_window_sizes() {
        assert_eq!(steady_window(300, 0.1), 30);
        assert_eq!(steady_window(5, 0.1), 1);
        assert_eq!(steady_window(10, 1.0), 10);
        let accs: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        assert!((steady_accuracy(&accs, 0.2).unwrap() - 0.85).abs() < 1e-15);
        assert!(steady_accuracy(&[], 0.1).is_err());
        assert!(steady_accuracy(&accs, 0.0).is_err());
    }

    #[test]
    fn embeddings_export() {
        let model = Model::new(ArchConfig::tiny(), 3).unwrap();
        let xs = Array2::from_shape_fn((5, 8), |(i, j)| (i * j) as f64 * 0.1);
        let xt = Array2::from_shape_fn((4, 8), |(i, j)| (i + j) as f64 * 0.1);
        let ys = vec![0, 1, 2, 0, 1];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.csv");
        let n = export_embeddings(&model, 1, (&xs, &ys), (&xt, None), &p).unwrap();
        assert_eq!(n, 9);
        let text = std::fs::read_to_string(&p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "f1,f2,f3,f4,domain,label");
        assert_eq!(lines.count(), 9);
        let p2 = dir.path().join("emb2.csv");
        export_embeddings(&model, 1, (&xs, &ys), (&xt, None), &p2).unwrap();
        assert_eq!(text, std::fs::read_to_string(&p2).unwrap());
    }

    #[test]
    fn report_round_trip() {
        let r = EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            pair: PairSpec {
                sources: vec![1, 2],
                target: 3,
            },
            seed: 7,
            config_hash: "ab".into(),
            final_acc: 0.9,
            steady_acc: 0.85,
            steady_window: 30,
            per_class_recall: vec![Some(1.0), None],
            confusion: vec![vec![3, 0], vec![0, 0]],
            epochs: 300,
        };
        let back = EvalReport::from_json(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["pair", "seed", "config_hash", "final_acc", "steady_acc", "per_class_recall", "confusion", "epochs"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
}
