"""Smoke test for the fsosr extension module.

Build and run from the repository root:

    cargo build --release -p fsosr-py
    cp target/release/libfsosr.so crates/python/python/fsosr.so
    python3 crates/python/python/smoke_test.py
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import fsosr  # noqa: E402


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    assert sorted(fsosr.HEADS) == sorted(["identity", "deepsets", "attention", "ln", "in", "tasknorm", "ltn"])

    features, labels = fsosr.generate_synthetic(classes=16, dim=8, per_class=30, seed=3)
    assert len(features) == 16 * 30 and len(features[0]) == 8
    again, _ = fsosr.generate_synthetic(classes=16, dim=8, per_class=30, seed=3)
    assert features == again

    assert fsosr.auroc([0.1, 0.2], [0.3, 0.4]) == 1.0
    assert fsosr.auroc([1.0], [1.0]) == 0.5

    protos = features[:5]
    query = features[100]
    identity = fsosr.Head("identity", 8)
    assert identity.param_count == 0
    assert identity.forward(protos) == protos
    pred, score = identity.snatcher_score(query, protos)
    dpred, dscore = fsosr.distance_score(query, protos)
    assert pred == dpred and close(score, dscore)

    ln = fsosr.Head("ln", 8, seed=1)
    out = ln.forward(protos)
    for row in out:
        mean = sum(row) / len(row)
        assert abs(mean) < 1e-9

    try:
        fsosr.Head("tasknorm", 8).forward(protos)
    except ValueError:
        pass
    else:
        raise AssertionError("tasknorm without supports must fail")
    try:
        fsosr.Head("bogus", 8)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown head name must fail")

    report = fsosr.evaluate(identity, features, labels, episodes=10, seed=2)
    assert report["episodes"] == 10
    assert report["auroc"]["distance"] == report["auroc"]["snatcher"]
    assert 0.0 <= report["accuracy"][0] <= 1.0

    trained = fsosr.train("tasknorm", features, labels, episodes=20, seed=4)
    assert trained.kind == "tasknorm"
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "tn.ckpt")
        trained.save(path, step=20, seed=4)
        loaded = fsosr.Head.load(path)
        supports = features[:10]
        assert loaded.forward(protos, supports) == trained.forward(protos, supports)
        try:
            fsosr.Head.load(os.path.join(d, "missing.ckpt"))
        except OSError:
            pass
        else:
            raise AssertionError("missing checkpoint must fail")

    print("fsosr python smoke test passed:", repr(trained))


if __name__ == "__main__":
    main()
