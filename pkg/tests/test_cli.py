import csv
import json

import pytest

from sketchgrad.cli import (
    EXIT_CONFIG,
    EXIT_INVARIANT,
    EXIT_NUMERIC,
    EXIT_OK,
    ConfigError,
    main,
    resolve_config,
)


def write_config(path, body):
    path.write_text(json.dumps(body))
    return str(path)


def small_quadratic(**kw):
    body = {
        "problem": {"kind": "quadratic", "dim": 40, "condition_number": 5.0, "noise_std": 1.0},
        "variant": "ga",
        "alpha": 0.1,
        "epsilon": 1e-4,
        "horizon": 10,
        "n_workers": 3,
        "k": 4,
        "p_factor": 4,
        "rows": 3,
        "cols": 20,
        "batch_size": 4,
        "seed": 12,
    }
    body.update(kw)
    return body


# ----------------------------------------------------------------- config


def test_resolve_rejects_unknown_key():
    with pytest.raises(ConfigError, match="alhpa"):
        resolve_config({"problem": {"kind": "quadratic", "dim": 5}, "alhpa": 1.0})
    with pytest.raises(ConfigError, match="problem.bogus"):
        resolve_config({"problem": {"kind": "quadratic", "dim": 5, "bogus": 1}})
    with pytest.raises(ConfigError, match="sweep.thing"):
        resolve_config({"problem": {"kind": "quadratic", "dim": 5}, "sweep": {"thing": 1}})


def test_resolve_requires_problem():
    with pytest.raises(ConfigError, match="problem"):
        resolve_config({"variant": "ga"})
    with pytest.raises(ConfigError, match="kind"):
        resolve_config({"problem": {"dim": 5}})


def test_resolve_preset_and_roundtrip():
    raw = {
        "problem": {"kind": "quadratic", "dim": 60000},
        "preset": "small",
        "horizon": 2,
    }
    resolved = resolve_config(raw)
    assert resolved["rows"] == 5 and resolved["cols"] == 400
    assert resolved["k"] == 500 and resolved["p_factor"] == 4
    # parse -> serialize -> parse is identity
    again = resolve_config(json.loads(json.dumps(resolved)))
    assert again == resolved


def test_resolve_preset_override():
    raw = {
        "problem": {"kind": "quadratic", "dim": 60000},
        "preset": "large",
        "k": 111,
    }
    resolved = resolve_config(raw)
    assert resolved["rows"] == 10 and resolved["cols"] == 100000
    assert resolved["k"] == 111  # explicit key wins over preset


def test_resolve_validates_values():
    with pytest.raises(ConfigError):
        resolve_config(small_quadratic(k=100))  # k > dim
    with pytest.raises(ConfigError):
        resolve_config(small_quadratic(variant="adamw"))


def test_duplicate_key_rejected(tmp_path):
    p = tmp_path / "dup.json"
    p.write_text('{"problem": {"kind": "quadratic", "dim": 5}, "seed": 1, "seed": 2}')
    rc = main(["run", str(p), "-o", str(tmp_path / "out")])
    assert rc == EXIT_CONFIG


# -------------------------------------------------------------------- run


def test_run_zero_horizon(tmp_path):
    cfg = write_config(tmp_path / "c.json", small_quadratic(horizon=0))
    out = tmp_path / "out"
    assert main(["run", cfg, "-o", str(out)]) == EXIT_OK
    lines = (out / "trace.csv").read_text().splitlines()
    assert len(lines) == 1  # header only
    summary = json.loads((out / "summary.json").read_text())
    assert summary["iterations"] == 0 and summary["final_train_loss"] is None


def test_run_writes_outputs_and_summary(tmp_path):
    cfg = write_config(tmp_path / "c.json", small_quadratic())
    out = tmp_path / "out"
    assert main(["run", cfg, "-o", str(out)]) == EXIT_OK
    assert (out / "trace.csv").exists()
    assert (out / "config.resolved.json").exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["iterations"] == 10
    d, rows, cols, k, pf = 40, 3, 20, 4, 4
    expect_rate = 2 * d / (rows * cols + pf * k + 2 * k)
    assert summary["compression_rate"] == pytest.approx(expect_rate, abs=0)
    per_iter = 3 * (rows * cols + pf * k + k) + k
    assert summary["total_scalars"] == 10 * per_iter


def test_run_small_preset_rate(tmp_path):
    body = {
        "problem": {"kind": "quadratic", "dim": 60000, "noise_std": 0.5},
        "preset": "small",
        "variant": "ga",
        "horizon": 1,
        "n_workers": 2,
        "batch_size": 2,
        "epsilon": 0.01,
    }
    cfg = write_config(tmp_path / "c.json", body)
    out = tmp_path / "out"
    assert main(["run", cfg, "-o", str(out)]) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert summary["compression_rate"] == 24.0


def test_run_seed_override_and_determinism(tmp_path):
    cfg = write_config(tmp_path / "c.json", small_quadratic())
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["run", cfg, "-o", str(out1), "--seed", "99"]) == EXIT_OK
    assert main(["run", cfg, "-o", str(out2), "--seed", "99"]) == EXIT_OK
    assert (out1 / "trace.csv").read_bytes() == (out2 / "trace.csv").read_bytes()
    resolved = json.loads((out1 / "config.resolved.json").read_text())
    assert resolved["seed"] == 99


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_run_numeric_abort_exit_code(tmp_path):
    body = small_quadratic(variant="dense_sgd", alpha=1e300, horizon=30)
    cfg = write_config(tmp_path / "c.json", body)
    rc = main(["run", cfg, "-o", str(tmp_path / "out")])
    assert rc == EXIT_NUMERIC


def test_run_sweep_outputs(tmp_path):
    body = small_quadratic(horizon=15)
    body["sweep"] = {"worker_counts": [1, 2], "threshold": 1e9, "k_values": [2, 4]}
    cfg = write_config(tmp_path / "c.json", body)
    out = tmp_path / "out"
    assert main(["run", cfg, "-o", str(out), "--jobs", "2"]) == EXIT_OK
    speed = list(csv.reader((out / "speedup.csv").open()))
    assert speed[0] == ["n_workers", "iterations_to_threshold"]
    assert len(speed) == 3
    kcsv = list(csv.reader((out / "sweep_k.csv").open()))
    assert kcsv[0][0] == "k" and len(kcsv) == 3


# ---------------------------------------------------------------- compare


def test_compare_single_variant_matches_run(tmp_path):
    body = small_quadratic(variant="dense_amsgrad")
    cfg = write_config(tmp_path / "c.json", body)
    out_run, out_cmp = tmp_path / "run", tmp_path / "cmp"
    assert main(["run", cfg, "-o", str(out_run)]) == EXIT_OK
    assert main(["compare", cfg, "--variants", "dense_amsgrad", "-o", str(out_cmp)]) == EXIT_OK
    run_trace = (out_run / "trace.csv").read_bytes()
    cmp_trace = (out_cmp / "dense_amsgrad.trace.csv").read_bytes()
    assert run_trace == cmp_trace


def test_compare_ga_dense_full_k_traces_match(tmp_path):
    body = small_quadratic(k=40, p_factor=1, cols=64, epsilon=400.0, horizon=20)
    cfg = write_config(tmp_path / "c.json", body)
    out = tmp_path / "cmp"
    assert main(["compare", cfg, "--variants", "ga,dense_amsgrad", "-o", str(out)]) == EXIT_OK
    rows = list(csv.DictReader((out / "joined.csv").open()))
    assert len(rows) == 20
    for row in rows:
        ga = float(row["ga_train_loss"])
        de = float(row["dense_amsgrad_train_loss"])
        assert ga == pytest.approx(de, rel=1e-12)


def test_compare_rejects_unknown_variant(tmp_path):
    cfg = write_config(tmp_path / "c.json", small_quadratic())
    rc = main(["compare", cfg, "--variants", "ga,bogus", "-o", str(tmp_path / "o")])
    assert rc == EXIT_CONFIG


# ----------------------------------------------------------------- verify


def test_verify_optimizer_suite():
    assert main(["verify", "optimizer", "--seed", "0"]) == EXIT_OK


def test_verify_all_within_runtime_budget():
    import time

    t0 = time.time()
    assert main(["verify", "all", "--seed", "0"]) == EXIT_OK
    assert time.time() - t0 < 120.0


def test_verify_reports_failure_exit(monkeypatch):
    from sketchgrad import verification

    def broken(seed=0):
        return [verification.CheckResult("x", "always_fails", False, 1.0, 0.0)]

    monkeypatch.setitem(verification.SUITES, "optimizer", broken)
    assert main(["verify", "optimizer"]) == EXIT_INVARIANT
