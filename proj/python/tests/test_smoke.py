import json
import math

import numpy as np
import pytest

import fseb

jsonschema = pytest.importorskip("jsonschema")


def tiny_config(tmp_path, objective="eb-map", seeds=(0, 1)):
    cfg = {
        "name": "smoke",
        "model": {"input_dim": 2, "hidden_widths": [8], "output_dim": 2, "activation": "tanh"},
        "data": {"kind": "two-moons", "n": 60, "noise": 0.1, "test_n": 40},
        "context": {"kind": "uniform-box", "low": [-2, -2], "high": [3, 2]},
        "train": {"objective": objective, "lr": 0.002, "momentum": 0.9, "epochs": 3, "batch_size": 20},
        "prior": {"tau_f": 5.0, "tau_theta": 0.001, "context_batch_size": 8},
        "eval": {
            "m_bins": 5,
            "ood": {"kind": "blobs", "n": 20, "centers": [[3.0, 0.0]], "sd": 0.3},
            "grid": {"low": [-2, -2], "high": [3, 2], "steps": [4, 3], "far_radius": 1.0},
        },
        "seeds": list(seeds),
        "output_dir": "out",
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_version_and_schema_version():
    assert fseb.version().startswith("0.1.0")
    assert fseb.RESULTS_SCHEMA_VERSION == 1
    assert fseb.results_schema()["properties"]["schema_version"]["const"] == 1


def test_two_moons_shapes_and_determinism():
    x, y = fseb.two_moons(50, 0.1, seed=3)
    assert x.shape == (50, 2)
    assert sorted(set(y.tolist())) == [0, 1]
    x2, _ = fseb.two_moons(50, 0.1, seed=3)
    assert np.array_equal(x, x2)


def test_kernel_against_numpy():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(12, 5))
    k = fseb.context_kernel(h)
    assert np.max(np.abs(k - (h @ h.T + np.eye(12)))) < 1e-12
    v = rng.normal(size=12)
    expect = v @ np.linalg.solve(h @ h.T + np.eye(12), v)
    assert abs(fseb.mahalanobis_sq(v, h) - expect) < 1e-10 * abs(expect)


def test_metrics_against_numpy():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(30, 3))
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    y = rng.integers(0, 3, size=30).tolist()
    nll, acc = fseb.nll_and_accuracy(p, y)
    assert abs(nll + np.mean(np.log(p[np.arange(30), y]))) < 1e-12
    assert abs(acc - np.mean(p.argmax(axis=1) == y)) < 1e-12
    h = fseb.predictive_entropy(p)
    assert np.allclose(h, -(p * np.log(p)).sum(axis=1), atol=1e-14)
    assert 0.0 <= fseb.ece(p, y, 15) <= 1.0
    assert fseb.auroc_from_entropy([0.1, 0.2], [0.5, 0.9]) == 1.0


def test_bad_inputs_raise():
    with pytest.raises(fseb.ConfigError):
        fseb.ece(np.array([[0.5, 0.5]]), [0], 0)
    with pytest.raises(fseb.NumericalError, match="row 0"):
        fseb.nll_and_accuracy(np.array([[0.5, 0.6]]), [0])


def test_run_results_validate_against_schema(tmp_path):
    config = tiny_config(tmp_path)
    results, path = fseb.run(config, output_dir=tmp_path / "run")
    assert path.exists()
    on_disk = json.loads(path.read_text())
    jsonschema.validate(on_disk, fseb.results_schema())
    assert on_disk["config_hash"] == fseb.config_hash(config)
    acc = results["aggregate"]["accuracy"]
    a, b = (s["metrics"]["accuracy"] for s in results["seeds"])
    assert math.isclose(acc["se"], abs(a - b) / 2, rel_tol=1e-12)


def test_rerun_is_bit_identical(tmp_path):
    config = tiny_config(tmp_path, seeds=(4,))
    first, _ = fseb.run(config, output_dir=tmp_path / "a")
    second, _ = fseb.run(config, output_dir=tmp_path / "b")
    assert first["seeds"][0]["metrics"] == second["seeds"][0]["metrics"]
    assert "se" not in first["aggregate"]["accuracy"]


def test_checkpoint_prediction_rows_sum_to_one(tmp_path):
    config = tiny_config(tmp_path)
    results, path = fseb.run(config, output_dir=tmp_path / "run")
    ckpts = [path.parent / s["artifacts"]["checkpoint"] for s in results["seeds"]]
    x, _ = fseb.two_moons(10, 0.1, seed=9)
    p = fseb.predict_proba(config, ckpts, x)
    assert p.shape == (10, 2)
    assert np.max(np.abs(p.sum(axis=1) - 1.0)) < 1e-12


def test_invalid_config_raises(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"model": {"widths": [3]}}')
    with pytest.raises(fseb.ConfigError, match="widths"):
        fseb.load_config(path)
