import csv
import io
import json

import numpy as np
import pytest

from pareval.cli import (BENCH_COLUMNS, RunConfig, format_report, main, parse_report,
                         strip_timing)
from pareval.models import init_random, save_model


def write_config(tmp_path, **kw):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"schema_version": 1, **kw}))
    return str(path)


def run(tmp_path, command, fmt="json", *extra, **cfg):
    out = tmp_path / f"out.{fmt}"
    code = main([command, "--config", write_config(tmp_path, **cfg), "--output", str(out),
                 "--format", fmt, *extra])
    return code, out.read_text() if out.exists() else None


def test_evaluate_sequential(tmp_path):
    code, text = run(tmp_path, "evaluate", solver="sequential", T=64, D=4)
    rep = json.loads(text)
    assert code == 0
    assert rep["mad"] == 0.0 and rep["report"]["iterations"] == 0
    assert rep["schema_version"] == 1 and rep["build"]
    assert rep["config"]["solver"] == "sequential"


def test_evaluate_deer_gru(tmp_path):
    code, text = run(tmp_path, "evaluate", solver="deer", T=1024, D=16)
    rep = json.loads(text)
    assert code == 0 and rep["report"]["converged"] and rep["mad"] < 1e-6


def test_evaluate_elk_needs_positive_lambda(tmp_path, capsys):
    assert run(tmp_path, "evaluate", solver="elk", lam=0)[0] == 1
    assert run(tmp_path, "evaluate", solver="elk")[0] == 1
    assert "lam" in capsys.readouterr().err


def test_unreadable_config(tmp_path, capsys):
    assert main(["evaluate", "--config", str(tmp_path / "missing.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["evaluate", "--config", str(bad)]) == 1
    assert "config" in capsys.readouterr().err


@pytest.mark.parametrize("cfg", [
    {"solver": "newton"}, {"T": 0}, {"repetitions": 0}, {"schema_version": 7},
    {"colour": "red"}, {"model": {"kind": "lstm"}}, {"inference": "viterbi"},
])
def test_config_errors(tmp_path, cfg):
    assert run(tmp_path, "evaluate", **cfg)[0] == 1


def test_bad_usage_exit_code():
    assert main(["frobnicate"]) == 1


def test_non_convergence_exit_code(tmp_path):
    code, text = run(tmp_path, "evaluate", solver="deer", T=64, max_iters=1)
    assert code == 2 and json.loads(text)["report"]["converged"] is False


def test_numerical_error_exit_code(tmp_path):
    model = tmp_path / "m.json"
    # 10^t overflows before t = 400, so even the oracle fails
    doc = {"schema_version": 1, "kind": "affine", "dims": {"D": 1, "T": None}, "seed": None,
           "A": [[10.0]], "c": [0.0], "s0": [1.0]}
    model.write_text(json.dumps(doc))
    assert run(tmp_path, "evaluate", model={"path": str(model)}, T=400)[0] == 3


def test_model_file_and_seed_override(tmp_path):
    path = tmp_path / "m.json"
    save_model(init_random("tanh", 3, D=3), path)
    code, text = run(tmp_path, "evaluate", "json", "--seed", "9", model={"path": str(path)}, T=50,
                     solver="quasi-deer")
    rep = json.loads(text)
    assert code == 0 and rep["D"] == 3 and rep["config"]["seed"] == 9


def bench_cfg(**kw):
    cfg = dict(model={"kind": "gru"}, solver=["deer", "quasi-deer"], T=128, D=[8, 32],
               repetitions=3, warmup=2)
    cfg.update(kw)
    return cfg


def test_benchmark_csv(tmp_path):
    code, text = run(tmp_path, "benchmark", "csv", **bench_cfg())
    assert code == 0
    assert text.splitlines()[0] == ",".join(BENCH_COLUMNS)
    rows = list(csv.DictReader(io.StringIO(text)))
    # warmup runs are excluded
    assert len(rows) == 2 * 2 * 3
    by = {(r["solver"], int(r["D"])): int(r["elem_bytes"]) for r in rows}
    for D in (8, 32):
        assert by[("deer", D)] / by[("quasi-deer", D)] == pytest.approx(D, rel=0.2)
    assert all(r["converged"] == "True" for r in rows)


def test_benchmark_json_summary(tmp_path):
    code, text = run(tmp_path, "benchmark", "json", **bench_cfg(seeds=[0, 1], D=4))
    rep = json.loads(text)
    assert len(rep["rows"]) == 2 * 2 * 3
    assert {s["solver"] for s in rep["summary"]} == {"deer", "quasi-deer"}
    assert all(s["runs"] == 6 for s in rep["summary"])


def test_quasi_elk_cheaper_per_iteration(tmp_path):
    cfg = bench_cfg(solver=["elk", "quasi-elk"], D=[8, 16], T=256, lam=1.0, repetitions=1,
                    warmup=1, max_iters=5)
    code, text = run(tmp_path, "benchmark", "json", **cfg)
    rows = json.loads(text)["rows"]
    for D in (8, 16):
        per = {r["solver"]: r["ms_per_iter"] for r in rows if r["D"] == D}
        assert per["quasi-elk"] < per["elk"]


def test_sweep_default_grid(tmp_path):
    code, text = run(tmp_path, "sweep", "csv", model={"kind": "argru"}, D=None, T=200,
                     solver="elk", max_iters=100)
    rows = parse_report(text, "csv")
    assert code == 0 and len(rows) == 8
    assert sum(r["selected"] for r in rows) == 1
    assert any(r["converged"] for r in rows)


def test_sweep_single_point(tmp_path):
    code, text = run(tmp_path, "sweep", "json", T=64, D=4, solver="quasi-elk",
                     lambda_grid=[0.3], max_iters=200)
    rep = json.loads(text)
    assert code == 0 and rep["best_lambda"] == 0.3


def test_reports_deterministic_modulo_timing(tmp_path):
    cfg = dict(solver="quasi-deer", T=300, D=4, workers=1)
    a = json.loads(run(tmp_path, "evaluate", **cfg)[1])
    b = json.loads(run(tmp_path, "evaluate", **cfg)[1])
    assert json.dumps(strip_timing(a), sort_keys=True) == json.dumps(strip_timing(b), sort_keys=True)


def test_converged_flags_consistent(tmp_path):
    for solver in ("deer", "quasi-deer"):
        rep = json.loads(run(tmp_path, "evaluate", solver=solver, T=128, tol=1e-9)[1])["report"]
        assert rep["converged"] == (rep["final_residual_norm"] <= 1e-9)


@pytest.mark.parametrize("fmt", ["json", "csv"])
def test_report_round_trip(tmp_path, fmt):
    code, text = run(tmp_path, "benchmark", fmt, **bench_cfg(D=4, repetitions=2, warmup=0))
    parsed = parse_report(text, fmt)
    if fmt == "json":
        assert format_report(parsed, "json") == text
    else:
        ref = json.loads(run(tmp_path, "benchmark", "json",
                             **bench_cfg(D=4, repetitions=2, warmup=0))[1])["rows"]
        assert [strip_timing(r) for r in parsed] == [strip_timing(r) for r in ref]
        assert format_report({"command": "benchmark", "rows": parsed}, "csv") == text


def test_run_config_round_trip():
    cfg = RunConfig(solver=["deer"], T=[8, 16], lam=2.0)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_stdout_output(capsys):
    assert main(["evaluate", "--format", "csv"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("solver,T,D,seed,iters")
