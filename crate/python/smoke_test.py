"""Smoke test for the driftfuse_py extension module.

Build and install first, e.g.  maturin develop -m crates/python/Cargo.toml
"""

import math
import os
import tempfile

import driftfuse_py as df


def main():
    # Kernel discrepancy: fast estimator against the loop reference.
    src = [[0.0, 0.1], [0.5, -0.2], [1.0, 0.3], [0.2, 0.9]]
    tgt = [[0.4, 0.4], [1.2, -0.1], [0.1, 0.7]]
    probs = [[0.7, 0.3], [0.2, 0.8], [0.5, 0.5]]
    fast = df.lmmd(src, tgt, [0, 1, 0, 1], probs, 2)
    slow = df.lmmd(src, tgt, [0, 1, 0, 1], probs, 2, reference=True)
    assert abs(fast - slow) <= 1e-10 * max(abs(fast), 1e-300), (fast, slow)
    assert fast >= 0.0

    assert df.lambda_weight(0.1, 0, 300) == 1.0
    assert abs(df.lambda_weight(2.0, 300, 300) - 1.7616) < 1e-4

    assert df.ema([1.0, 2.0, 4.0], 1.0) == [0.0, 1.0, 2.0]
    feats = df.sensor_features([1.0] * 4 + [3.0] * 12, 1.0)
    assert feats[0] == 2.0 and feats[1] == 2.0, feats

    ok = [b for b in df.gradcheck(seed=1) if b[2]]
    assert len(ok) == len(df.gradcheck(seed=1)), "gradient check failed"

    wa = df.weighted_accuracy([(99.05, 1586), (88.46, 161)])
    assert abs(wa - (99.05 * 1586 + 88.46 * 161) / 1747) < 1e-12

    # Tiny end-to-end run on synthetic drifting batches.
    batches = df.synthetic_batches(scale=0.03, seed=3)
    assert len(batches) == 10 and batches[0].batch_id == 1
    cfg = df.TrainConfig.from_toml(
        'dataset = "uci"\nepochs = 2\nlearning_rate = 0.001\nbatch_size = 16\n'
        "weight_decay = 1e-3\nmomentum = 0.95\nalpha = 0.1\ndepth_shared = 1\n"
        "depth_external = [1, 1]\ndropout = 0.3\n"
    )
    model = df.train_model([batches[0], batches[1]], batches[2], cfg)
    assert len(model.losses) == 2 and all(math.isfinite(l) for l in model.losses)
    preds = model.predict(batches[2].features)
    assert len(preds) == len(batches[2])
    acc = model.accuracy(batches[2])
    assert 0.0 <= acc <= 1.0

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        model.save(path)
        again = df.Model.load(path)
        assert again.num_parameters == model.num_parameters

    try:
        df.TrainConfig.from_toml('dataset = "uci"\nepochs = 2\n')
    except ValueError as e:
        assert "learning_rate" in str(e), e
    else:
        raise AssertionError("missing keys were accepted")

    print(f"smoke test ok: lmmd={fast:.6f} acc={acc:.3f} presets={len(df.TrainConfig.presets())}")


if __name__ == "__main__":
    main()
