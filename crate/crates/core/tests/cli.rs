use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use driftfuse::dataset::{to_uci_string, uci_batch_path};
use driftfuse::evaluate::EvalReport;
use driftfuse::experiment::ReproduceSummary;
use driftfuse::synth::{synthetic_uci, DriftSpec};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_driftfuse"))
        .args(args)
        .env_remove("DRIFT_DATA_DIR")
        .output()
        .unwrap()
}

fn synth(dir: &Path, scale: f64) {
    fs::create_dir_all(dir).unwrap();
    for d in synthetic_uci(DriftSpec::default(), scale).unwrap() {
        fs::write(uci_batch_path(dir, d.batch_id()), to_uci_string(&d)).unwrap();
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn ingest_passes_then_fails_on_tampered_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 1.0);
    let out = tmp.path().join("dump");
    let o = cli(&["ingest", "--data-dir", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("validation PASS"));
    assert!(out.join("batch10.csv").exists());

    let p = uci_batch_path(&data, 7);
    let text = fs::read_to_string(&p).unwrap();
    let cut = text.find('\n').unwrap() + 1;
    fs::write(&p, &text[cut..]).unwrap();
    let o = cli(&["ingest", "--data-dir", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("batch 7") && err.contains("expected 3613"), "{err}");
}

#[test]
fn ingest_without_input_is_usage_error() {
    let o = cli(&["ingest"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(
        &cfg,
        "dataset = \"uci\"\nepochs = 3\nlearning_rate = 0.001\nbatch_size = 16\nweight_decay = 1e-3\n\
         momentum = 0.95\ndepth_shared = 1\ndepth_external = [1, 1]\ndropout = 0.3\n",
    )
    .unwrap();
    let o = cli(&[
        "train", "--sources", "1,2", "--target", "3", "--config", cfg.to_str().unwrap(), "--data-dir", "unused",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("alpha"), "{}", stderr(&o));
}

#[test]
fn target_among_sources_is_usage_error() {
    let o = cli(&["train", "--sources", "1,2", "--target", "2", "--config", "uci_1_2_3", "--data-dir", "x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_report_and_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 0.03);
    let out = tmp.path().join("runs");
    let o = cli(&[
        "train", "--sources", "1,2", "--target", "3", "--config", "uci_1_2_3", "--seed", "7", "--epochs", "2",
        "--quiet", "--data-dir", data.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = String::from_utf8_lossy(&o.stdout).lines().next().unwrap().trim().to_string();
    let dir = Path::new(&dir);
    assert!(dir.starts_with(&out));
    let json = fs::read_to_string(dir.join("report.json")).unwrap();
    assert!(json.contains("\"final_acc\""));
    let report = EvalReport::from_json(&json).unwrap();
    assert_eq!(report.epochs, 2);
    assert_eq!(report.seed, 7);
    for f in ["checkpoint.bin", "log.csv", "report.csv", "embeddings_pair1.csv", "embeddings_pair2.csv", "config.toml"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
}

#[test]
fn reproduce_single_pair_table() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 0.03);
    let out = tmp.path().join("repro");
    let o = cli(&[
        "reproduce-uci", "--data-dir", data.to_str().unwrap(), "--seeds", "0", "--only", "5", "--epochs", "1",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("reproduce_uci.csv")).unwrap();
    let mut rd = csv::Reader::from_reader(csv.as_bytes());
    assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), ReproduceSummary::CSV_HEADER);
    let rows: Vec<_> = rd.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][0], "5");
    assert_eq!(&rows[1][0], "weighted");
    assert!(out.join("reproduce_uci.md").exists());
}

#[test]
fn reproduce_reports_failed_pairs_and_continues() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 0.03);
    fs::remove_file(uci_batch_path(&data, 4)).unwrap();
    let out = tmp.path().join("repro");
    let o = cli(&[
        "reproduce-uci", "--data-dir", data.to_str().unwrap(), "--seeds", "0", "--only", "4,5", "--epochs", "1",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let md = fs::read_to_string(out.join("reproduce_uci.md")).unwrap();
    assert!(md.contains("batch 4 failed"), "{md}");
    let csv = fs::read_to_string(out.join("reproduce_uci.csv")).unwrap();
    let five = csv.lines().find(|l| l.starts_with("5,")).unwrap();
    assert!(five.split(',').nth(2).is_some_and(|m| !m.is_empty()), "{five}");
}

#[test]
fn gradcheck_command() {
    let o = cli(&["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    for block in ["ms-cam", "iaff", "attention", "conv", "classifier"] {
        assert!(text.contains(block), "{block} missing from report");
    }
    let o = cli(&["gradcheck", "--corrupt", "iaff"]);
    assert_eq!(o.status.code(), Some(1));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().any(|l| l.starts_with("iaff ") && l.ends_with("FAIL")), "{text}");
}

#[test]
fn featurize_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let mut manifest = String::from("trial,baseline,label\n");
    for t in 0..3 {
        let mut trial = String::from("t,s1,s2,s3,s4,s5,s6,s7,s8\n");
        for i in 0..20 {
            let row: Vec<String> = (0..8).map(|s| format!("{}", 1.0 + (s + t) as f64 * 0.1 + i as f64 * 0.01)).collect();
            trial.push_str(&format!("{i},{}\n", row.join(",")));
        }
        fs::write(tmp.path().join(format!("trial{t}.csv")), trial).unwrap();
        let base: String = (1..=8).map(|s| format!("sensor{s},1.0\n")).collect();
        fs::write(tmp.path().join(format!("base{t}.csv")), format!("sensor,baseline\n{base}")).unwrap();
        manifest.push_str(&format!("trial{t}.csv,base{t}.csv,{t}\n"));
    }
    let m = tmp.path().join("manifest.csv");
    fs::write(&m, manifest).unwrap();
    let out = tmp.path().join("features.csv");
    let o = cli(&["featurize", "--manifest", m.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let header = text.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 41);
    assert_eq!(text.lines().count(), 4);
}
