use driftfuse::gradcheck::{gradcheck_arch, run_gradcheck};

#[test]
fn all_blocks_pass_on_tiny_config() {
    let report = run_gradcheck(&gradcheck_arch(), 11, None).unwrap();
    println!("{}", report.to_text());
    for block in [
        "shared attention",
        "external attention",
        "internal conv",
        "iaff fusion",
        "classifier",
        "ms-cam",
        "iaff",
        "lmmd",
        "loss: cross-entropy",
        "loss: lmmd external",
        "loss: lmmd fused",
        "loss: classifier diff",
        "loss: total",
    ] {
        assert!(report.get(block).is_some(), "missing {block}");
    }
    assert!(report.all_passed(), "{}", report.to_text());
}

#[test]
fn corrupted_block_fails() {
    let report = run_gradcheck(&gradcheck_arch(), 11, Some("classifier")).unwrap();
    assert!(!report.get("classifier").unwrap().passed());
    assert!(report.get("internal conv").unwrap().passed());
    let report = run_gradcheck(&gradcheck_arch(), 11, Some("ms-cam")).unwrap();
    assert!(!report.get("ms-cam").unwrap().passed());
    assert!(run_gradcheck(&gradcheck_arch(), 11, Some("nonexistent")).is_err());
}
