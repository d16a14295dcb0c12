import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from crowd_scaling.cli import main
from crowd_scaling.ingestion import load_snapshot_dir

PARAMS = {
    "M": 2000,
    "n_funds": 3000,
    "cap_pareto_exponent": 0.9,
    "cap_scale": 1e8,
    "n_sampler": {"kind": "lognormal", "median": 60, "log_sd": 1.1, "low": 5, "high": 1500},
    "paper_shape": {"n_star": 70.0, "mu_below": 2.1, "mu_above": 0.3, "intercept": 4.0},
}


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def _header(path):
    with open(path) as fh:
        return next(csv.reader(fh))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    params = _write(root / "params.json", PARAMS)
    assert main(["generate", "--params", params, "--seed", "3", "--out", str(root / "gen")]) == 0
    assert main([
        "analyze", "--securities", str(root / "gen/securities.csv"),
        "--holdings", str(root / "gen/holdings.csv"), "--out", str(root / "an"),
    ]) == 0
    assert main(["calibrate", "--snapshot", str(root / "an"), "--out", str(root / "model.json")]) == 0
    return root


def test_analyze_outputs(pipeline):
    an = pipeline / "an"
    seg = json.loads((an / "segmented_fit.json").read_text())
    assert set(seg) == {"mu_below", "mu_above", "n_star", "intercept", "log_likelihood", "converged", "iterations"}
    assert seg["converged"]
    assert set(json.loads((an / "power_law_fit.json").read_text())) == {
        "exponent", "intercept", "stderr", "n_points", "x_min",
    }
    assert _header(an / "entropy.csv") == ["fund_id", "n_i", "value"]
    assert _header(an / "fmax.csv") == ["fund_id", "n_i", "value"]
    assert _header(an / "loess_w_vs_n.csv") == ["log10_n", "log10_W"]
    report = json.loads((an / "filter_report.json").read_text())
    assert isinstance(report, list)
    manifest = json.loads((an / "manifest.json").read_text())
    assert manifest["subcommand"] == "analyze"
    assert "segmented_fit.json" in manifest["outputs"]
    assert _header(an / "rejects.csv") == ["line", "reason"]


def test_calibrate_model_schema(pipeline):
    model = json.loads((pipeline / "model.json").read_text())
    assert set(model) == {"n_star", "mu_below", "intercept", "bins"}
    assert any(b["calibrated"] for b in model["bins"])
    assert (pipeline / "model.manifest.json").exists()


def test_round_trip_mu_below(pipeline, tmp_path):
    cfg = _write(tmp_path / "sim.json", {"snapshot": str(pipeline / "an")})
    out = tmp_path / "sim"
    assert main(["simulate", "--model", str(pipeline / "model.json"), "--config", cfg,
                 "--seed", "5", "--out", str(out)]) == 0
    prov = json.loads((out / "provenance.json").read_text())
    assert set(prov) == {"config_sha256", "seed", "failures"} and prov["seed"] == 5
    assert _header(out / "comparison_w_vs_n.csv") == ["n", "loess_empirical", "loess_simulated"]
    assert _header(out / "comparison_c_vs_m.csv") == ["m", "loess_empirical", "loess_simulated"]
    assert main(["analyze", "--securities", str(out / "securities.csv"),
                 "--holdings", str(out / "holdings.csv"), "--out", str(tmp_path / "an2")]) == 0
    first = json.loads((pipeline / "an/segmented_fit.json").read_text())["mu_below"]
    second = json.loads((tmp_path / "an2/segmented_fit.json").read_text())["mu_below"]
    assert abs(first - second) <= 0.1


def test_simulate_repeatable(pipeline, tmp_path):
    cfg = _write(tmp_path / "sim.json", {"snapshot": str(pipeline / "an")})
    outs = []
    for k in range(2):
        out = tmp_path / f"s{k}"
        main(["simulate", "--model", str(pipeline / "model.json"), "--config", cfg,
              "--seed", "11", "--out", str(out)])
        outs.append(out)
    for name in ("securities.csv", "holdings.csv", "provenance.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_simulate_failures_exit_4(pipeline, tmp_path):
    cfg = _write(tmp_path / "sim.json", {"fund_sizes": [5, 50, 5000], "security_caps": [1e9] * 100})
    out = tmp_path / "sim"
    assert main(["simulate", "--model", str(pipeline / "model.json"), "--config", cfg,
                 "--seed", "1", "--out", str(out)]) == 4
    failures = json.loads((out / "provenance.json").read_text())["failures"]
    assert [f["n_i"] for f in failures] == [5000]


def test_calibrate_nonconverged_exit_3(pipeline, tmp_path):
    snap = tmp_path / "an"
    snap.mkdir()
    for name in ("securities.csv", "holdings.csv"):
        (snap / name).write_bytes((pipeline / "an" / name).read_bytes())
    seg = json.loads((pipeline / "an/segmented_fit.json").read_text())
    seg["converged"] = False
    _write(snap / "segmented_fit.json", seg)
    assert main(["calibrate", "--snapshot", str(snap), "--out", str(tmp_path / "m.json")]) == 3


def test_fit_failure_exit_3(tmp_path):
    # every fund has W exactly proportional to n: no break to find
    secs = tmp_path / "s.csv"
    hold = tmp_path / "h.csv"
    rows = ["security_id,capitalization_usd,price_usd,is_us,is_listed"]
    rows += [f"S{k:03d},{1e9 * (k + 1)},20,true,true" for k in range(200)]
    secs.write_text("\n".join(rows) + "\n")
    lines = ["fund_id,security_id,value_usd"]
    for i in range(60):
        n = 5 + i
        lines += [f"F{i:02d},S{k:03d},1000000" for k in range(n)]
    hold.write_text("\n".join(lines) + "\n")
    code = main(["analyze", "--securities", str(secs), "--holdings", str(hold),
                 "--out", str(tmp_path / "out"), "--filters",
                 _write(tmp_path / "f.json", {"min_investors": 1})])
    assert code == 3


def test_missing_header_exit_1(tmp_path):
    secs = tmp_path / "s.csv"
    secs.write_text("security_id,price\nA,10\n")
    hold = tmp_path / "h.csv"
    hold.write_text("fund_id,security_id,value_usd\nF,A,1\n")
    out = tmp_path / "out"
    assert main(["analyze", "--securities", str(secs), "--holdings", str(hold), "--out", str(out)]) == 1
    with open(out / "rejects.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[1][0] == "1" and "capitalization" in rows[1][1]


def test_strict_rejects_exit_1(pipeline, tmp_path):
    hold = tmp_path / "h.csv"
    text = (pipeline / "gen/holdings.csv").read_text() + "F999999,NOPE,12\n"
    hold.write_text(text)
    args = ["analyze", "--securities", str(pipeline / "gen/securities.csv"), "--holdings", str(hold)]
    assert main(args + ["--out", str(tmp_path / "a"), "--strict"]) == 1
    with open(tmp_path / "a/rejects.csv") as fh:
        assert any("NOPE" in row[1] for row in csv.reader(fh))


def test_empty_after_filter_exit_2(pipeline, tmp_path):
    filters = _write(tmp_path / "f.json", {"min_fund_value": 1e300})
    code = main(["analyze", "--securities", str(pipeline / "gen/securities.csv"),
                 "--holdings", str(pipeline / "gen/holdings.csv"),
                 "--filters", filters, "--out", str(tmp_path / "a")])
    assert code == 2
    assert (tmp_path / "a/filter_report.json").exists()


def test_entropy_mc_csv(tmp_path):
    out = tmp_path / "smc.csv"
    assert main(["entropy-mc", "--n-grid", "5,50,500", "--replicas", "200", "--seed", "1", "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["n", "mean_entropy", "stderr", "replicas"]
    values = [float(r[1]) for r in rows[1:]]
    assert values == sorted(values) and all(v < 1 for v in values)
    assert main(["entropy-mc", "--n-grid", "5,x", "--seed", "1", "--out", str(out)]) == 1


def test_generate_ground_truth(pipeline):
    truth = json.loads((pipeline / "gen/ground_truth.json").read_text())
    assert truth["seed"] == 3 and truth["model"]["mu_below"] == 2.1
    snap = load_snapshot_dir(pipeline / "gen")
    assert snap.n_funds == PARAMS["n_funds"]


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "crowd_scaling.cli", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
