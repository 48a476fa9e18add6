//! Synthetic drifting sensor batches for demos and tests when the real
//! recordings are not available.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DomainDataset, DomainRole, GasSample, UciGas, UCI_BATCH_COMPOSITION, UCI_NUM_CLASSES};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct DriftSpec {
    pub num_features: usize,
    pub num_classes: usize,
    /// Distance scale between class centers.
    pub separation: f64,
    pub noise: f64,
    /// Per-batch growth of the multiplicative gain and additive offset.
    pub drift: f64,
    pub seed: u64,
}

impl Default for DriftSpec {
    fn default() -> Self {
        DriftSpec {
            num_features: 128,
            num_classes: UCI_NUM_CLASSES,
            separation: 1.0,
            noise: 0.35,
            drift: 0.25,
            seed: 0,
        }
    }
}

/// Generator with fixed class centers and per-feature drift directions.
pub struct DriftGenerator {
    spec: DriftSpec,
    centers: Vec<Vec<f64>>,
    gain_dir: Vec<f64>,
    offset_dir: Vec<f64>,
}

impl DriftGenerator {
    pub fn new(spec: DriftSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let centers = (0..spec.num_classes)
            .map(|_| {
                (0..spec.num_features)
                    .map(|_| spec.separation * rng.gen_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let gain_dir = (0..spec.num_features).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let offset_dir = (0..spec.num_features).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DriftGenerator {
            spec,
            centers,
            gain_dir,
            offset_dir,
        }
    }

    pub fn spec(&self) -> &DriftSpec {
        &self.spec
    }

    /// Labeled samples of batch `batch_id` (1-based) with `counts[k]`
    /// samples of class `k`. Drift grows linearly with the batch id.
    pub fn batch(&self, batch_id: u32, counts: &[usize]) -> Result<DomainDataset> {
        let s = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ (u64::from(batch_id) << 32) ^ 0xD1F7);
        let t = s.drift * f64::from(batch_id.saturating_sub(1));
        let mut samples = Vec::new();
        for (k, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let features = (0..s.num_features)
                    .map(|f| {
                        let clean = self.centers[k][f] + s.noise * rng.gen_range(-1.0..1.0);
                        (1.0 + t * self.gain_dir[f]) * clean + t * self.offset_dir[f]
                    })
                    .collect();
                samples.push(GasSample {
                    features,
                    label: Some(k),
                    concentration: None,
                });
            }
        }
        DomainDataset::new(samples, batch_id, s.num_classes, s.num_features, DomainRole::Source)
    }
}

/// Class counts of a UCI batch (class-index order), scaled by `scale` and
/// rounded, keeping every present class at one sample or more.
pub fn uci_counts(batch_id: u32, scale: f64) -> Vec<usize> {
    let row = UCI_BATCH_COMPOSITION[(batch_id - 1) as usize];
    let mut out = vec![0; UCI_NUM_CLASSES];
    for (gas, &n) in UciGas::TABLE_ORDER.iter().zip(row.iter()) {
        out[gas.class_index()] = if n == 0 {
            0
        } else {
            ((n as f64 * scale).round() as usize).max(1)
        };
    }
    out
}

/// Ten synthetic batches shaped like the UCI drift recordings.
pub fn synthetic_uci(spec: DriftSpec, scale: f64) -> Result<Vec<DomainDataset>> {
    let g = DriftGenerator::new(spec);
    (1..=10).map(|b| g.batch(b, &uci_counts(b, scale))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{class_histogram, histogram_in_table_order, UCI_BATCH_TOTALS};

    #[test]
    fn full_scale_matches_composition() {
        let batches = synthetic_uci(DriftSpec::default(), 1.0).unwrap();
        for (i, b) in batches.iter().enumerate() {
            assert_eq!(b.len(), UCI_BATCH_TOTALS[i]);
            let hist = class_histogram(b).unwrap();
            assert_eq!(histogram_in_table_order(&hist), UCI_BATCH_COMPOSITION[i]);
        }
    }

    #[test]
    fn deterministic_and_drifting() {
        let g = DriftGenerator::new(DriftSpec::default());
        let a = g.batch(3, &[2, 2, 2, 2, 2, 0]).unwrap();
        assert_eq!(a, g.batch(3, &[2, 2, 2, 2, 2, 0]).unwrap());
        let b1 = g.batch(1, &[50, 0, 0, 0, 0, 0]).unwrap().feature_matrix();
        let b9 = g.batch(9, &[50, 0, 0, 0, 0, 0]).unwrap().feature_matrix();
        let m1 = b1.mean_axis(ndarray::Axis(0)).unwrap();
        let m9 = b9.mean_axis(ndarray::Axis(0)).unwrap();
        let shift: f64 = (&m9 - &m1).mapv(|v| v * v).sum().sqrt();
        assert!(shift > 1.0);
        assert_eq!(uci_counts(4, 0.1), vec![1, 3, 1, 4, 6, 0]);
    }
}
