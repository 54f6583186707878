import json
import math
import shutil
import subprocess
import sys

import numpy as np
import pytest
import yaml

from powerdp.cli import audit_run, fmt, jsonable, main
from powerdp.config import flatten
from powerdp.errors import ArtifactsMissingError

SMALL = {
    "topology": {"preset": "h1"},
    "task": {"name": "blobs", "num_samples": 200, "num_classes": 3, "dim": 2},
    "privacy": {"eps_max": 1.0, "delta": 1e-5, "grad_bound": 1.0},
    "run": {"epochs": 12, "seeds": [0, 1]},
    "baseline": {"enabled": True},
    "output": {"name": "small"},
}


def write_config(tmp_path, doc=SMALL, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(doc))
    return str(path)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    out = tmp / "out"
    assert main(["run", write_config(tmp), "--out", str(out)]) == 0
    return out


def test_fmt_and_json_sentinels():
    assert fmt(0.1) == "0.1"
    assert fmt(math.inf) == "inf"
    assert fmt(None) == ""
    assert fmt(np.int64(3)) == "3"
    assert fmt(True) == "true"
    assert fmt("baseline") == "baseline"
    assert float(fmt(1 / 3)) == 1 / 3
    assert jsonable({"a": [math.inf, np.float64(2.0), np.arange(2)]}) == {"a": ["inf", 2.0, [0, 1]]}


def test_run_writes_every_artifact(small_run):
    for name in ("metrics.csv", "summary.json", "privacy_ledger.csv", "eps_matrix.csv",
                 "accuracy_vs_epoch.csv", "accuracy_vs_channel_uses.csv"):
        assert (small_run / name).is_file(), name
    parts = sorted(p.name for p in (small_run / "replicates").iterdir())
    assert parts == ["algorithm1_seed0.csv", "algorithm1_seed1.csv", "baseline_seed0.csv", "baseline_seed1.csv"]
    lines = (small_run / "metrics.csv").read_text().splitlines()
    assert lines[0] == "algorithm,seed,t,node,loss,objective,regret,accuracy,eps_cum,channel_uses"
    assert len(lines) == 1 + 2 * 2 * 12 * 4


def test_summary_echoes_config_and_allocation(small_run):
    summary = json.loads((small_run / "summary.json").read_text())
    a1 = summary["algorithms"]["algorithm1"]
    assert len(a1["alpha"]) == 4 and all(0 < a <= 1 for a in a1["alpha"])
    assert a1["lp"]["achieved_max_eps"] <= a1["eps_max"] * (1 + 1e-9)
    assert summary["config"]["task"]["name"] == "blobs"
    echoed = set(flatten(summary["config"]))
    assert set(summary["consumed_keys"]) <= echoed
    assert summary["algorithms"]["baseline"]["channel_uses_per_epoch"] == 3
    assert a1["channel_uses_per_epoch"] == 1
    # matched budgets: algorithm 1 is capped at the baseline's per-epoch epsilon
    assert a1["eps_max"] == pytest.approx(summary["algorithms"]["baseline"]["eps_max"], rel=1e-12)
    assert summary["checks"]["alg1_eps_within_cap"] is True


def test_channel_use_series(small_run):
    rows = (small_run / "accuracy_vs_channel_uses.csv").read_text().splitlines()[1:]
    by_alg = {}
    for row in rows:
        alg, uses, *_ = row.split(",")
        by_alg.setdefault(alg, []).append(int(uses))
    assert by_alg["algorithm1"] == list(range(1, 13))
    assert by_alg["baseline"] == list(range(3, 37, 3))


def test_identical_config_gives_byte_identical_csvs(tmp_path, small_run):
    out = tmp_path / "again"
    assert main(["run", write_config(tmp_path), "--out", str(out)]) == 0
    for name in ("metrics.csv", "privacy_ledger.csv", "eps_matrix.csv", "accuracy_vs_epoch.csv",
                 "accuracy_vs_channel_uses.csv"):
        assert (out / name).read_bytes() == (small_run / name).read_bytes(), name


def test_replicate_workers_do_not_change_bytes(tmp_path, small_run):
    out = tmp_path / "par"
    assert main(["run", write_config(tmp_path), "--out", str(out),
                 "--set", "run.replicate_workers=3", "--set", "run.workers=2"]) == 0
    assert (out / "metrics.csv").read_bytes() == (small_run / "metrics.csv").read_bytes()


def test_audit_clean_run(small_run, capsys):
    assert main(["audit", str(small_run)]) == 0
    assert "audit ok" in capsys.readouterr().out


def test_audit_flags_tampered_alpha(small_run, tmp_path, capsys):
    bad = tmp_path / "tampered"
    shutil.copytree(small_run, bad)
    summary = json.loads((bad / "summary.json").read_text())
    summary["algorithms"]["algorithm1"]["alpha"][0] *= 0.9
    (bad / "summary.json").write_text(json.dumps(summary))
    assert main(["audit", str(bad)]) == 1
    out = capsys.readouterr().out
    assert "MISMATCH" in out and "audit FAILED" in out


def test_audit_flags_tampered_ledger(small_run, tmp_path):
    bad = tmp_path / "ledger"
    shutil.copytree(small_run, bad)
    path = bad / "privacy_ledger.csv"
    lines = path.read_text().splitlines()
    cells = lines[1].split(",")
    cells[2] = repr(float(cells[2]) + 1e-9)
    lines[1] = ",".join(cells)
    path.write_text("\n".join(lines) + "\n")
    report = audit_run(bad)
    assert not report["ok"]
    assert any("epoch 1" in m for m in report["mismatches"])


def test_audit_missing_artifacts(tmp_path, capsys):
    with pytest.raises(ArtifactsMissingError):
        audit_run(tmp_path)
    assert main(["audit", str(tmp_path)]) == 1
    assert "ArtifactsMissing" in capsys.readouterr().err


def test_composition_of_hundred_epochs(tmp_path):
    doc = {**SMALL, "run": {"epochs": 100, "seeds": [0]}, "baseline": {"enabled": False}}
    out = tmp_path / "t100"
    assert main(["run", write_config(tmp_path, doc), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["algorithms"]["algorithm1"]["composition"]["certified"] == [100.0, 1e-3]
    report = audit_run(out)
    assert report["ok"]
    assert report["algorithms"]["algorithm1"]["certified"] == [100.0, 1e-3]


def test_noiseless_run_reports_infinite_epsilon(tmp_path, capsys):
    doc = {
        "topology": {"preset": "h1"},
        "task": {"name": "quadratic", "dim": 3},
        "privacy": {"eps_max": ".inf", "delta": 1e-5, "lr_mu": "auto"},
        "run": {"epochs": 3000, "init_std": 1.0},
    }
    out = tmp_path / "noiseless"
    assert main(["run", write_config(tmp_path, doc), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["algorithms"]["algorithm1"]["alpha"] == [1.0] * 4
    assert summary["checks"]["consensus_error_le_1e-2"] is True
    assert summary["algorithms"]["algorithm1"]["composition"]["realized"][0] == "inf"
    assert "eps_epoch_max" in (out / "privacy_ledger.csv").read_text()
    assert ",inf," in (out / "privacy_ledger.csv").read_text()
    capsys.readouterr()
    assert main(["audit", str(out)]) == 0
    assert "eps = inf (UNBOUNDED" in capsys.readouterr().out


def test_missing_delta_exits_2_naming_field(tmp_path, capsys):
    doc = {**SMALL, "privacy": {"eps_max": 1.0}}
    assert main(["run", write_config(tmp_path, doc), "--out", str(tmp_path / "x")]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["field"] == "privacy.delta"
    assert not (tmp_path / "x").exists()


def test_unknown_key_and_bad_override_exit_2(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["alloc", cfg, "--set", "privacy.epsilon=3"]) == 2
    assert json.loads(capsys.readouterr().err)["field"] == "privacy.epsilon"
    assert main(["alloc", "no-such-preset-or-file"]) == 2


def test_console_script_exit_code(tmp_path):
    doc = {**SMALL, "privacy": {"eps_max": 1.0}}
    proc = subprocess.run([sys.executable, "-m", "powerdp.cli", "run", write_config(tmp_path, doc)],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 2
    assert "privacy.delta" in proc.stderr


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("POWERDP_OUTPUT_ROOT", str(tmp_path / "root"))
    doc = {**SMALL, "run": {"epochs": 2, "seeds": [0]}, "baseline": {"enabled": False}}
    assert main(["run", write_config(tmp_path, doc)]) == 0
    assert (tmp_path / "root" / "small" / "summary.json").is_file()


def test_alloc_infinite_budget(tmp_path, capsys):
    assert main(["alloc", write_config(tmp_path), "--set", "privacy.eps_max=.inf", "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["alpha"] == [1.0] * 4
    assert report["achieved_max_eps"] == "inf"


def test_alloc_h2_preset_is_feasible(capsys):
    assert main(["alloc", "paper-eps2", "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["achieved_max_eps"] <= 2.0 * (1 + 1e-9)
    assert report["eps_max"] == 2.0


def test_alloc_symmetric_ring_is_uniform(tmp_path, capsys):
    g = np.full((3, 3), 0.8)
    np.fill_diagonal(g, 0.0)
    doc = {"topology": {"gains": g.tolist()}, "task": {"name": "blobs"},
           "privacy": {"eps_max": 1.0, "delta": 1e-5, "grad_bound": 1.0}}
    assert main(["alloc", write_config(tmp_path, doc), "--json"]) == 0
    alpha = json.loads(capsys.readouterr().out)["alpha"]
    assert max(alpha) - min(alpha) <= 1e-12
    assert main(["alloc", write_config(tmp_path, doc)]) == 0
    assert "binding links" in capsys.readouterr().out


def test_presets_listing(capsys):
    assert main(["presets"]) == 0
    names = capsys.readouterr().out.split()
    assert {"paper-eps1", "paper-eps2", "quadratic-noiseless"} <= set(names)
    assert main(["presets", "paper-eps1"]) == 0
    shown = yaml.safe_load(capsys.readouterr().out)
    assert shown["topology"]["preset"] == "h1" and shown["privacy"]["eps_max"] == 1.0
    assert main(["presets", "nope"]) == 2
