//! Featurization of raw sensor response curves: two steady-state features and
//! three EMA-of-differences peak features per sensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMA_ALPHAS: [f64; 3] = [0.1, 0.01, 0.001];
pub const FEATURES_PER_SENSOR: usize = 5;
pub const SENSORS_PER_ARRAY: usize = 8;
pub const DEFAULT_STEADY_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct ResponseCurve {
    /// Voltage samples at 10 Hz.
    pub voltages: Vec<f64>,
    pub baseline: f64,
    pub sensor_id: usize,
}

impl ResponseCurve {
    pub fn new(voltages: Vec<f64>, baseline: f64, sensor_id: usize) -> Result<Self> {
        if voltages.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "sensor {sensor_id}: curve needs at least 2 samples, got {}",
                voltages.len()
            )));
        }
        if voltages.iter().any(|v| !v.is_finite()) || !baseline.is_finite() {
            return Err(Error::NonFinite(format!("response curve of sensor {sensor_id}")));
        }
        Ok(ResponseCurve {
            voltages,
            baseline,
            sensor_id,
        })
    }

    pub fn len(&self) -> usize {
        self.voltages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voltages.is_empty()
    }
}

/// Inclusive index range `[start, end]` over which the response is steady.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteadyWindow {
    pub start: usize,
    pub end: usize,
}

impl SteadyWindow {
    /// The final `fraction` of a recording of length `len` (at least one sample).
    pub fn trailing_fraction(len: usize, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "steady window fraction {fraction} not in (0, 1]"
            )));
        }
        if len == 0 {
            return Err(Error::Empty("recording".into()));
        }
        let width = ((len as f64 * fraction).ceil() as usize).clamp(1, len);
        Ok(SteadyWindow {
            start: len - width,
            end: len - 1,
        })
    }

    fn check(&self, c: &ResponseCurve) -> Result<()> {
        if self.start > self.end {
            return Err(Error::InvalidArgument(format!(
                "empty steady window [{}, {}]",
                self.start, self.end
            )));
        }
        if self.end >= c.len() {
            return Err(Error::InvalidArgument(format!(
                "steady window end {} beyond curve of length {} (sensor {})",
                self.end,
                c.len(),
                c.sensor_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorFeatures {
    pub v_diff: f64,
    pub v_norm: f64,
    pub ema_max_01: f64,
    pub ema_max_001: f64,
    pub ema_max_0001: f64,
}

impl SensorFeatures {
    pub fn to_array(&self) -> [f64; FEATURES_PER_SENSOR] {
        [
            self.v_diff,
            self.v_norm,
            self.ema_max_01,
            self.ema_max_001,
            self.ema_max_0001,
        ]
    }
}

/// Mean of the steady window minus the baseline.
pub fn steady_state_diff(c: &ResponseCurve, w: SteadyWindow) -> Result<f64> {
    w.check(c)?;
    let window = &c.voltages[w.start..=w.end];
    let mean = window.iter().sum::<f64>() / window.len() as f64;
    Ok(mean - c.baseline)
}

/// `steady_state_diff` relative to the baseline.
pub fn steady_state_norm(c: &ResponseCurve, w: SteadyWindow) -> Result<f64> {
    if c.baseline == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sensor {}: zero baseline",
            c.sensor_id
        )));
    }
    Ok(steady_state_diff(c, w)? / c.baseline)
}

/// EMA of the first-difference sequence, seeded with `ema[0] = 0`.
pub fn ema_sequence(c: &ResponseCurve, alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} not in (0, 1]")));
    }
    let v = &c.voltages;
    let mut ema = Vec::with_capacity(v.len());
    ema.push(0.0);
    for k in 1..v.len() {
        let prev = ema[k - 1];
        ema.push((1.0 - alpha) * prev + alpha * (v[k] - v[k - 1]));
    }
    Ok(ema)
}

fn signed_max(xs: &[f64]) -> f64 {
    xs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn extract_sensor_features(c: &ResponseCurve, w: SteadyWindow) -> Result<SensorFeatures> {
    let v_diff = steady_state_diff(c, w)?;
    let v_norm = steady_state_norm(c, w)?;
    let [a, b, d] = EMA_ALPHAS;
    Ok(SensorFeatures {
        v_diff,
        v_norm,
        ema_max_01: signed_max(&ema_sequence(c, a)?),
        ema_max_001: signed_max(&ema_sequence(c, b)?),
        ema_max_0001: signed_max(&ema_sequence(c, d)?),
    })
}

/// 40 features for an 8-sensor trial, five per sensor in input order.
pub fn extract_array_features(curves: &[ResponseCurve], w: SteadyWindow) -> Result<Vec<f64>> {
    if curves.len() != SENSORS_PER_ARRAY {
        return Err(Error::InvalidArgument(format!(
            "expected {SENSORS_PER_ARRAY} sensor curves, got {}",
            curves.len()
        )));
    }
    let mut out = Vec::with_capacity(SENSORS_PER_ARRAY * FEATURES_PER_SENSOR);
    for c in curves {
        out.extend(extract_sensor_features(c, w)?.to_array());
    }
    Ok(out)
}

/// Reads a trial CSV (`t,sensor1..sensor8`) and its baseline sidecar
/// (`sensor,baseline` rows, one per sensor, in sensor order).
pub fn read_trial(trial: &Path, baseline: &Path) -> Result<Vec<ResponseCurve>> {
    let mut r = csv::Reader::from_path(trial).map_err(|e| csv_err(trial, e))?;
    let ncols = r.headers().map_err(|e| csv_err(trial, e))?.len();
    if ncols != SENSORS_PER_ARRAY + 1 {
        return Err(Error::Parse {
            path: trial.to_path_buf(),
            line: 1,
            msg: format!("expected t + {SENSORS_PER_ARRAY} sensor columns, got {ncols} columns"),
        });
    }
    let mut series = vec![Vec::new(); SENSORS_PER_ARRAY];
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(trial, e))?;
        for (s, field) in rec.iter().skip(1).enumerate() {
            let v = field.parse::<f64>().map_err(|_| Error::Parse {
                path: trial.to_path_buf(),
                line: i + 2,
                msg: format!("bad voltage `{field}`"),
            })?;
            series[s].push(v);
        }
    }

    let mut r = csv::Reader::from_path(baseline).map_err(|e| csv_err(baseline, e))?;
    let mut baselines = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(baseline, e))?;
        let field = rec.get(1).unwrap_or("");
        baselines.push(field.parse::<f64>().map_err(|_| Error::Parse {
            path: baseline.to_path_buf(),
            line: i + 2,
            msg: format!("bad baseline `{field}`"),
        })?);
    }
    if baselines.len() != SENSORS_PER_ARRAY {
        return Err(Error::Parse {
            path: baseline.to_path_buf(),
            line: 0,
            msg: format!("expected {SENSORS_PER_ARRAY} baselines, got {}", baselines.len()),
        });
    }
    series
        .into_iter()
        .zip(baselines)
        .enumerate()
        .map(|(id, (v, b))| ResponseCurve::new(v, b, id))
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.position().map(|p| p.line() as usize).unwrap_or(0),
        msg: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(v: &[f64], baseline: f64) -> ResponseCurve {
        ResponseCurve::new(v.to_vec(), baseline, 0).unwrap()
    }

    #[test]
    fn steady_state_closed_forms() {
        let c = curve(&[2.0; 10], 0.5);
        let w = SteadyWindow::trailing_fraction(10, 0.25).unwrap();
        assert_eq!(steady_state_diff(&c, w).unwrap(), 1.5);
        assert_eq!(steady_state_norm(&c, w).unwrap(), 3.0);

        let c = curve(&[1.0, 2.0, 3.0], 1.0);
        let w = SteadyWindow { start: 0, end: 2 };
        assert_eq!(steady_state_diff(&c, w).unwrap(), 1.0);
        assert_eq!(steady_state_norm(&c, w).unwrap(), 1.0);

        let c = curve(&[1.0, 2.0, 3.0], 2.0);
        assert_eq!(steady_state_diff(&c, w).unwrap(), 0.0);
        assert_eq!(steady_state_norm(&c, w).unwrap(), 0.0);
    }

    #[test]
    fn window_errors() {
        let c = curve(&[1.0, 2.0], 1.0);
        assert!(steady_state_diff(&c, SteadyWindow { start: 1, end: 0 }).is_err());
        assert!(steady_state_diff(&c, SteadyWindow { start: 0, end: 2 }).is_err());
        assert!(steady_state_norm(&curve(&[1.0, 2.0], 0.0), SteadyWindow { start: 0, end: 1 }).is_err());
        assert!(SteadyWindow::trailing_fraction(10, 0.0).is_err());
        assert!(ResponseCurve::new(vec![1.0], 1.0, 0).is_err());
        assert!(ResponseCurve::new(vec![1.0, f64::NAN], 1.0, 0).is_err());
    }

    #[test]
    fn trailing_window() {
        assert_eq!(
            SteadyWindow::trailing_fraction(100, 0.25).unwrap(),
            SteadyWindow { start: 75, end: 99 }
        );
        assert_eq!(
            SteadyWindow::trailing_fraction(3, 0.1).unwrap(),
            SteadyWindow { start: 2, end: 2 }
        );
    }

    #[test]
    fn ema_hand_recursion() {
        assert_eq!(ema_sequence(&curve(&[0.0, 1.0, 1.0], 1.0), 0.5).unwrap(), vec![0.0, 0.5, 0.25]);
        assert_eq!(
            ema_sequence(&curve(&[0.0, 1.0, 2.0], 1.0), 0.5).unwrap(),
            vec![0.0, 0.5, 0.75]
        );
        assert!(ema_sequence(&curve(&[3.0; 6], 1.0), 0.1).unwrap().iter().all(|&v| v == 0.0));
        assert!(ema_sequence(&curve(&[0.0, 1.0], 1.0), 0.0).is_err());
        assert!(ema_sequence(&curve(&[0.0, 1.0], 1.0), 1.5).is_err());
    }

    #[test]
    fn step_curve_peak() {
        let mut v = vec![0.0];
        v.extend([1.0; 20]);
        let c = curve(&v, 0.5);
        let f = extract_sensor_features(&c, SteadyWindow { start: 10, end: 20 }).unwrap();
        assert_eq!(f.ema_max_01, 0.1);
        assert_eq!(f.ema_max_001, 0.01);
        assert_eq!(f.ema_max_0001, 0.001);
    }

    #[test]
    fn constant_array() {
        let curves: Vec<_> = (0..8)
            .map(|i| ResponseCurve::new(vec![2.0; 40], 0.5, i).unwrap())
            .collect();
        let w = SteadyWindow::trailing_fraction(40, 0.25).unwrap();
        let f = extract_array_features(&curves, w).unwrap();
        assert_eq!(f.len(), 40);
        for block in f.chunks(5) {
            assert_eq!(block, &[1.5, 3.0, 0.0, 0.0, 0.0]);
        }
        assert!(extract_array_features(&curves[..7], w).is_err());
    }
}
