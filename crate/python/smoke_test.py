"""Smoke test for the pymisscate extension module."""

import json
import math

import pymisscate as pm


def main():
    data, theta = pm.simulate("dgp1", 400, seed=3)
    assert len(data) == 400 and len(theta) == 400
    assert any(y is None for y in data.outcome)

    pipeline = json.dumps({
        "nuisances": {
            "propensity": {"kind": "ridge-logistic"},
            "missingness": {"kind": "ridge-logistic"},
            "outcome": {"kind": "linear"},
            "imputation": {"kind": "linear"},
        },
        "folds": 4,
    })
    learner = pm.MetaLearner("mdr", "native", pipeline=pipeline)
    model = learner.fit(data, seed=1)
    x = data.x_matrix()
    preds = model.predict(x)
    assert len(preds) == 400 and all(math.isfinite(p) for p in preds)
    assert preds == learner.fit(data, seed=1).predict(x)
    print(model, "mean estimate", sum(preds) / len(preds))

    score = pm.rmsme([preds], theta)
    assert abs(score - math.sqrt(sum((p - t) ** 2 for p, t in zip(preds, theta)) / 400)) < 1e-12

    band = pm.bootstrap_band(learner, data, x[:20], draws=20, alpha=0.1, seed=2)
    assert all(lo <= t <= hi for lo, t, hi in zip(band["lower"], band["theta_hat"], band["upper"]))

    try:
        pm.MetaLearner("dr", "native")
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("dr-native should be rejected")

    report = json.loads(pm.run_study(json.dumps({
        "dgps": ["dgp2"], "learners": ["mdr-native"], "sizes": [200],
        "replicates": 2, "test_size": 100, "pipeline": json.loads(pipeline),
    })))
    assert report["replicates"] == 2
    print("ok")


if __name__ == "__main__":
    main()
