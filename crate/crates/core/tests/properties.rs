use std::path::Path;

use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use driftfuse::dataset::{fit_standardizer, parse_uci_str, to_uci_string, DomainDataset, DomainRole, GasSample};
use driftfuse::evaluate::predict_from_probs;
use driftfuse::features::{ema_sequence, steady_state_diff, steady_state_norm, ResponseCurve, SteadyWindow};
use driftfuse::lmmd::{
    class_weights_from_labels, class_weights_from_soft, lmmd_estimate, lmmd_oracle, KernelConfig,
};
use driftfuse::losses::lambda_schedule;
use driftfuse::trainer::{make_batch_plan, num_batches};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-2.0..2.0f64, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn soft(rows: usize, k: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(0.01..1.0f64, rows * k).prop_map(move |v| {
        let mut p = Array2::from_shape_vec((rows, k), v).unwrap();
        for mut r in p.rows_mut() {
            let s = r.sum();
            r /= s;
        }
        p
    })
}

#[derive(Debug, Clone)]
struct Instance {
    src: Array2<f64>,
    tgt: Array2<f64>,
    labels: Vec<usize>,
    probs: Array2<f64>,
    k: usize,
}

fn instance() -> impl Strategy<Value = Instance> {
    (1usize..=16, 1usize..=16, 1usize..=4, 1usize..=8).prop_flat_map(|(m, n, k, w)| {
        (matrix(m, w), matrix(n, w), prop::collection::vec(0..k, m), soft(n, k)).prop_map(
            move |(src, tgt, labels, probs)| Instance {
                src,
                tgt,
                labels,
                probs,
                k,
            },
        )
    })
}

fn lmmd(i: &Instance) -> (f64, f64) {
    let ws = class_weights_from_labels(&i.labels, i.k).unwrap();
    let wt = class_weights_from_soft(&i.probs).unwrap();
    let cfg = KernelConfig::default();
    (
        lmmd_estimate(&i.src, &i.tgt, &ws, &wt, &cfg).unwrap(),
        lmmd_oracle(&i.src, &i.tgt, &ws, &wt, &cfg).unwrap(),
    )
}

fn curve_strategy() -> impl Strategy<Value = (Vec<f64>, f64)> {
    (prop::collection::vec(0.05..5.0f64, 2..80), 0.05..3.0f64)
}

proptest! {
    #[test]
    fn lmmd_matches_oracle_and_is_nonnegative(i in instance()) {
        let (fast, slow) = lmmd(&i);
        prop_assert!((fast - slow).abs() <= 1e-10 * fast.abs().max(slow.abs()).max(1e-300));
        // Each class term is a squared RKHS norm.
        prop_assert!(fast >= -1e-12);
    }

    #[test]
    fn lmmd_is_symmetric(i in instance()) {
        let ws = class_weights_from_labels(&i.labels, i.k).unwrap();
        let wt = class_weights_from_soft(&i.probs).unwrap();
        let cfg = KernelConfig::default();
        let a = lmmd_estimate(&i.src, &i.tgt, &ws, &wt, &cfg).unwrap();
        let b = lmmd_estimate(&i.tgt, &i.src, &wt, &ws, &cfg).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn lmmd_of_identical_sets_vanishes(src in (2usize..=16, 1usize..=8).prop_flat_map(|(m, w)| matrix(m, w)), k in 1usize..=4, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..src.nrows()).map(|_| rng.gen_range(0..k)).collect();
        let w = class_weights_from_labels(&labels, k).unwrap();
        let v = lmmd_estimate(&src, &src, &w, &w, &KernelConfig::default()).unwrap();
        prop_assert!(v.abs() <= 1e-9);
    }

    #[test]
    fn class_weight_columns_sum_to_zero_or_one(p in (1usize..20, 1usize..6).prop_flat_map(|(n, k)| soft(n, k))) {
        let w = class_weights_from_soft(&p).unwrap();
        for (col, &present) in w.weights().columns().into_iter().zip(w.present()) {
            let s = col.sum();
            prop_assert!(col.iter().all(|&v| v >= 0.0));
            let ok = if present { (s - 1.0).abs() < 1e-9 } else { s == 0.0 };
            prop_assert!(ok);
        }
    }

    #[test]
    fn ema_matches_unrolled_sum((v, b) in curve_strategy(), alpha in 0.001..=1.0f64) {
        let c = ResponseCurve::new(v.clone(), b, 0).unwrap();
        let ema = ema_sequence(&c, alpha).unwrap();
        let max_step = (1..v.len()).map(|i| (v[i] - v[i - 1]).abs()).fold(0.0, f64::max);
        for (k, &e) in ema.iter().enumerate() {
            let unrolled: f64 = (1..=k)
                .map(|i| alpha * (1.0 - alpha).powi((k - i) as i32) * (v[i] - v[i - 1]))
                .sum();
            prop_assert!((e - unrolled).abs() <= 1e-12);
            prop_assert!(e.abs() <= max_step + 1e-12);
        }
    }

    #[test]
    fn ema_with_unit_alpha_is_first_difference((v, b) in curve_strategy()) {
        let c = ResponseCurve::new(v.clone(), b, 0).unwrap();
        let ema = ema_sequence(&c, 1.0).unwrap();
        prop_assert_eq!(ema[0], 0.0);
        for i in 1..v.len() {
            prop_assert_eq!(ema[i], v[i] - v[i - 1]);
        }
    }

    #[test]
    fn steady_features_scale_correctly((v, b) in curve_strategy(), s in prop_oneof![0.1..10.0f64, -10.0..-0.1f64], frac in 0.05..=1.0f64) {
        let c = ResponseCurve::new(v.clone(), b, 0).unwrap();
        let cs = ResponseCurve::new(v.iter().map(|x| x * s).collect(), b * s, 0).unwrap();
        let w = SteadyWindow::trailing_fraction(v.len(), frac).unwrap();
        let d = steady_state_diff(&c, w).unwrap();
        let ds = steady_state_diff(&cs, w).unwrap();
        prop_assert!((ds - s * d).abs() <= 1e-12 * (s * d).abs().max(1.0));
        let n = steady_state_norm(&c, w).unwrap();
        let ns = steady_state_norm(&cs, w).unwrap();
        prop_assert!((n - ns).abs() <= 1e-12 * n.abs().max(1.0));
    }

    #[test]
    fn standardizer_round_trips(rows in prop::collection::vec(prop::collection::vec(-100.0..100.0f64, 5), 2..30)) {
        let samples = rows
            .iter()
            .map(|f| GasSample { features: f.clone(), label: Some(0), concentration: None })
            .collect();
        let d = DomainDataset::new(samples, 1, 1, 5, DomainRole::Source).unwrap();
        let st = fit_standardizer(&[&d]).unwrap();
        for r in &rows {
            let back = st.invert(&st.apply(r));
            for (a, b) in back.iter().zip(r) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn uci_text_round_trips(
        rows in prop::collection::vec(
            (0usize..6, prop::option::of(1.0..1000.0f64), prop::collection::vec(-1e4..1e4f64, 4)),
            1..20,
        )
    ) {
        let samples: Vec<GasSample> = rows
            .into_iter()
            .map(|(l, c, f)| GasSample { features: f, label: Some(l), concentration: c })
            .collect();
        let d = DomainDataset::new(samples, 3, 6, 4, DomainRole::Source).unwrap();
        let text = to_uci_string(&d);
        let back = parse_uci_str(&text, Path::new("mem.dat"), 4, 6, 3).unwrap();
        prop_assert_eq!(back, d);
    }

    #[test]
    fn lambda_is_increasing_and_bounded(alpha in 0.01..20.0f64, epochs in 1usize..500) {
        let mut prev = 0.0;
        for e in 0..=epochs {
            let l = lambda_schedule(alpha, e, epochs, false).unwrap();
            prop_assert!((1.0..2.0).contains(&l));
            prop_assert!(l >= prev);
            prev = l;
            let shifted = lambda_schedule(alpha, e, epochs, true).unwrap();
            prop_assert_eq!(shifted, l - 1.0);
        }
    }

    #[test]
    fn batch_plan_covers_every_domain(sizes in prop::collection::vec(1usize..200, 1..4), batch in 1usize..64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = make_batch_plan(&sizes, batch, &mut rng).unwrap();
        prop_assert_eq!(plan.total_batches(), num_batches(&sizes, batch).unwrap());
        for (d, &n) in sizes.iter().enumerate() {
            let mut seen = vec![false; n];
            for step in &plan.steps {
                prop_assert!(!step[d].is_empty() && step[d].len() <= batch);
                for &i in &step[d] {
                    seen[i] = true;
                }
            }
            prop_assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn ties_resolve_to_lowest_index(k in 2usize..6, rows in 1usize..10) {
        let p = Array2::from_elem((rows, k), 1.0 / k as f64);
        let preds = predict_from_probs(&[p.clone(), p]).unwrap();
        prop_assert!(preds.iter().all(|&c| c == 0));
    }
}
