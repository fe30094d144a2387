"""Smoke test for the pyjlu extension module."""

import json
import os
import tempfile

import pyjlu

SPEC = {
    "input_dim": 6,
    "tasks": [
        {"name": "age", "classes": 3, "signal_scale": 2.0, "layout": {"kind": "ordinal"}},
        {"name": "gender", "classes": 2, "signal_scale": 1.2, "layout": {"kind": "random"}},
    ],
    "noise_sigma": 1.0,
    "centroid_seed": 1,
    "train_joint": {"kind": "biased", "rho": [0.8]},
    "test_joint": {"kind": "uniform"},
}


def main():
    spec = json.dumps(SPEC)
    train = pyjlu.Dataset.sample(spec, 300, "train", 1)
    secondary = pyjlu.Dataset.sample(spec, 300, "test", 2)
    test = pyjlu.Dataset.balanced_test(spec, 120, 3)
    assert len(train) == 300 and train.input_dim == 6
    assert train.spurious_tasks == ["gender"]
    assert len(test.labels("gender")) == 120

    config = pyjlu.TrainConfig(base_lr=0.01, epochs=2, seed=4)
    base, base_hist = pyjlu.run_baseline(config, train, test, hidden=[8], embedding_dim=4)
    blind, hist = pyjlu.run_jlu(config, train, secondary, test, hidden=[8], embedding_dim=4)
    assert len(base_hist) == len(hist) == 2
    assert base.secondary_tasks == [] and blind.secondary_tasks == ["gender"]
    for record in hist:
        assert 0.0 <= record["primary_accuracy"] <= 1.0
        assert record["tasks"][0]["name"] == "gender"

    emb = blind.embed(test)
    assert len(emb) == 120 and len(emb[0]) == 4
    acc = pyjlu.probe_accuracy(emb, test.labels("gender"), 2, 0)
    assert 0.0 <= acc <= 1.0
    assert 0.0 < pyjlu.bayes_oracle_accuracy(spec, "age") <= 1.0

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "net.jlub")
        blind.save(path)
        again = pyjlu.Network.load(path)
        assert again.embed(test) == emb

    try:
        pyjlu.TrainConfig(base_lr=-1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative learning rate accepted")

    print("pyjlu smoke test ok:", blind, json.loads(config.to_json())["alpha"])


if __name__ == "__main__":
    main()
