"""Command line entry point: ``powerdp {run,alloc,audit,presets}``.

Exit codes: 0 success, 1 runtime failure (including an audit mismatch),
2 configuration error. Output directories are ``--out`` when given,
otherwise ``$POWERDP_OUTPUT_ROOT/<output.name>`` (root defaults to ``runs``).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from powerdp import experiment as ex
from powerdp.allocation import PowerAllocation, binding_constraints, build_lp, fixed_point_allocate, solve_lp
from powerdp.config import PRESETS, RunConfig, load_document, resolve
from powerdp.errors import ArtifactsMissingError, ConfigError, PowerDPError
from powerdp.privacy import (
    PrivacyParams,
    Schedule,
    certified_budget,
    compose,
    epsilon_matrix,
    max_link_epsilon,
    unicast_epsilon_matrix,
)
from powerdp.topology import NetworkTopology

OUTPUT_ROOT_ENV = "POWERDP_OUTPUT_ROOT"
AUDIT_TOL = 1e-12
CONSENSUS_TOL = 1e-2

METRIC_FIELDS = ["algorithm", "seed", "t", "node", "loss", "objective", "regret", "accuracy", "eps_cum",
                 "channel_uses"]

log = logging.getLogger("powerdp")


# ---------------------------------------------------------------------------
# formatting helpers


def fmt(value) -> str:
    """Deterministic text for CSV cells; floats round-trip exactly."""
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(value)


def parse_float(text: str) -> float:
    return float(text) if text else math.nan


def jsonable(obj):
    """Replace non-finite floats with explicit string sentinels and numpy types with builtins."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        obj = float(obj)
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            return "nan"
        return obj
    return obj


def unjson_float(value) -> float:
    return float(value)  # also reads the "inf" sentinel


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# config loading


def load_config(source: str | None, overrides: list[str]) -> RunConfig:
    return resolve(load_document(source), overrides or [])


def output_dir(cfg: RunConfig, explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    root = os.environ.get(OUTPUT_ROOT_ENV, "runs")
    return Path(root) / cfg["output.name"]


# ---------------------------------------------------------------------------
# run


def metric_rows(alg: str, seed: int, result):
    for m in result.metrics:
        for i in range(len(m.objective)):
            yield (
                alg, seed, m.epoch, i, m.per_node_loss[i], m.objective[i],
                None if m.cumulative_regret is None else m.cumulative_regret[i],
                None if m.test_accuracy is None else m.test_accuracy[i],
                m.eps_spent, m.channel_uses_cumulative,
            )


def merge_replicates(parts: list[Path], target: Path) -> None:
    """Concatenate per-replicate CSVs (already in canonical order) under one header."""
    with open(target, "w", newline="") as out:
        for n, part in enumerate(parts):
            with open(part) as fh:
                lines = fh.readlines()
            out.writelines(lines if n == 0 else lines[1:])


def curve_rows(exp: ex.Experiment, results: dict, alg: str):
    """Seed-mean (node-mean) accuracy and objective per epoch, with standard errors."""
    runs = [results[(alg, s)] for s in exp.seeds]
    obj = np.stack([[m.objective.mean() for m in r.metrics] for r in runs])
    acc = None
    if runs[0].metrics[0].test_accuracy is not None:
        acc = np.stack([[m.test_accuracy.mean() for m in r.metrics] for r in runs])
    uses = [m.channel_uses_cumulative for m in runs[0].metrics]
    n = len(runs)

    def stats(arr):
        mean = arr.mean(axis=0)
        se = arr.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
        return mean, se

    obj_m, obj_se = stats(obj)
    acc_m, acc_se = stats(acc) if acc is not None else (None, None)
    for k, m in enumerate(runs[0].metrics):
        yield (alg, m.epoch, uses[k],
               None if acc_m is None else acc_m[k], None if acc_se is None else acc_se[k],
               obj_m[k], obj_se[k])


def _composition(ledger, epochs: int, eps_cap: float, delta: float) -> dict:
    return {
        "certified": list(certified_budget(epochs, eps_cap, delta)),
        "realized": list(compose(epochs, ledger)),
    }


def run_experiment(cfg: RunConfig, out: Path) -> dict:
    exp = ex.prepare(cfg)
    results = ex.run_replicates(exp)
    out.mkdir(parents=True, exist_ok=True)
    rep_dir = out / "replicates"
    rep_dir.mkdir(exist_ok=True)

    parts = []
    for alg in ex.algorithms(exp):
        for seed in exp.seeds:
            part = rep_dir / f"{alg}_seed{seed}.csv"
            write_csv(part, METRIC_FIELDS, metric_rows(alg, seed, results[(alg, seed)]))
            parts.append(part)
    merge_replicates(parts, out / "metrics.csv")

    curves = [row for alg in ex.algorithms(exp) for row in curve_rows(exp, results, alg)]
    write_csv(out / "accuracy_vs_epoch.csv",
              ["algorithm", "t", "mean_accuracy", "se_accuracy", "mean_objective", "se_objective"],
              [(r[0], r[1], r[3], r[4], r[5], r[6]) for r in curves])
    write_csv(out / "accuracy_vs_channel_uses.csv",
              ["algorithm", "channel_uses", "mean_accuracy", "se_accuracy", "mean_objective", "se_objective"],
              [(r[0], r[2], r[3], r[4], r[5], r[6]) for r in curves])

    # the ledger does not depend on the seed; the first replicate's is canonical
    ledger_rows, matrix_rows = [], []
    summary_algs = {}
    delta = exp.params.delta
    for alg in ex.algorithms(exp):
        first = results[(alg, exp.seeds[0])]
        ledger = first.ledger
        running = 0.0
        for t, m in enumerate(ledger.per_epoch_max, start=1):
            running += m
            ledger_rows.append((alg, t, m, running, t * delta))
        for i, j in exp.topology.links():
            matrix_rows.append((alg, i, j, ledger.per_epoch_eps[i, j]))
        if alg == ex.ALG1:
            cap = exp.params.eps_max
            info = {
                "theta": exp.alloc.theta,
                "alpha": exp.alloc.allocation.alpha,
                "p": exp.p,
                "eps_max": cap,
                "grad_bound": exp.params.grad_bound,
                "lr_mu": exp.params.lr_mu,
                "lp": exp.lp_diagnostics(),
                "channel_uses_per_epoch": first.channel_uses_per_epoch,
            }
            if first.alpha_history:
                info["alpha_history_last"] = first.alpha_history[-1]
        else:
            cap = exp.baseline.eps_max
            info = {
                "theta": exp.baseline.theta,
                "link_alpha": exp.baseline.link_alpha,
                "p": exp.p,
                "eps_max": cap,
                "grad_bound": exp.baseline.params.grad_bound,
                "lr_mu": exp.baseline.params.lr_mu,
                "channel_uses_per_epoch": first.channel_uses_per_epoch,
            }
        info["composition"] = _composition(ledger, exp.epochs, cap, delta)
        finals = [ex.final_accuracy(results[(alg, s)]) for s in exp.seeds]
        info["final_accuracy"] = None if finals[0] is None else dict(zip(map(str, exp.seeds), finals))
        if exp.task.optimum is not None:
            info["consensus_error"] = max(ex.consensus_error(results[(alg, s)], exp.task.optimum)
                                          for s in exp.seeds)
        info["power_violations"] = sorted({i for s in exp.seeds for i in results[(alg, s)].power_violations})
        summary_algs[alg] = info

    write_csv(out / "privacy_ledger.csv",
              ["algorithm", "t", "eps_epoch_max", "eps_cumulative", "delta_cumulative"], ledger_rows)
    write_csv(out / "eps_matrix.csv", ["algorithm", "receiver", "sender", "eps_max_over_epochs"], matrix_rows)

    checks = {}
    a1 = summary_algs[ex.ALG1]
    if cfg["task.name"] == "quadratic" and math.isinf(exp.params.eps_max):
        checks["consensus_error_le_1e-2"] = a1["consensus_error"] <= CONSENSUS_TOL
    checks["alg1_eps_within_cap"] = bool(a1["lp"]["achieved_max_eps"] <= exp.params.eps_max * (1 + 1e-9))

    summary = {
        "config": cfg.echo(),
        "consumed_keys": sorted(cfg.consumed),
        "topology": exp.topology.to_dict(),
        "epochs": exp.epochs,
        "seeds": exp.seeds,
        "delta": delta,
        "sigma_schedule": exp.params.sigma_schedule.to_dict(),
        "lr_schedule_base": {"kind": cfg["privacy.lr.kind"], "scale": cfg["privacy.lr.scale"]},
        "resolve_each_epoch": bool(cfg["run.resolve_each_epoch"]),
        "algorithms": summary_algs,
        "checks": checks,
    }
    write_json(out / "summary.json", summary)
    return summary


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.set)
    out = output_dir(cfg, args.out)
    summary = run_experiment(cfg, out)
    for alg, info in summary["algorithms"].items():
        comp = info["composition"]
        line = f"{alg}: theta={info['theta']:.6g} certified={_pair(comp['certified'])} realized={_pair(comp['realized'])}"
        if info.get("final_accuracy"):
            accs = list(info["final_accuracy"].values())
            line += f" final_accuracy={np.mean(accs):.4f}"
        if "consensus_error" in info:
            line += f" consensus_error={info['consensus_error']:.3e}"
        print(line)
    for name, ok in summary["checks"].items():
        print(f"check {name}: {'ok' if ok else 'FAILED'}")
    print(f"artifacts written to {out}")
    return 0 if all(summary["checks"].values()) else 1


def _pair(pair) -> str:
    return f"({fmt(pair[0])}, {fmt(pair[1])})"


# ---------------------------------------------------------------------------
# alloc


def allocation_report(cfg: RunConfig) -> dict:
    topo = ex.build_topology(cfg)
    task = ex.build_task(cfg, topo.num_nodes)
    p = ex.powers(cfg, topo.num_nodes)
    params = ex.build_params(cfg, task)
    res = fixed_point_allocate(topo, params, p, horizon=cfg["run.epochs"],
                               safety=cfg["allocation.theta_safety"], tol=cfg["allocation.tol"],
                               max_rounds=cfg["allocation.max_rounds"])
    params = params.with_theta(res.theta)
    eps = epsilon_matrix(topo, res.allocation, params, 1)
    return {
        "alpha": res.allocation.alpha,
        "beta": res.allocation.beta,
        "p": p,
        "theta": res.theta,
        "rounds": res.rounds,
        "theta_history": res.theta_history,
        "eps_max": params.eps_max,
        "achieved_max_eps": max_link_epsilon(eps, topo),
        "eps_matrix": eps,
        "binding_links": [list(map(int, link)) for link in binding_constraints(res.lp, res.allocation.alpha)],
    }


def cmd_alloc(args) -> int:
    cfg = load_config(args.config, args.set)
    report = allocation_report(cfg)
    if args.json:
        print(json.dumps(jsonable(report), indent=2, sort_keys=True))
        return 0
    print(f"theta = {report['theta']:.6g} after {report['rounds']} round(s)")
    print(f"eps_max = {fmt(report['eps_max'])}, achieved max eps_ij = {fmt(report['achieved_max_eps'])}")
    print(f"{'node':>4}  {'alpha':>12}  {'beta':>12}  {'p':>8}")
    for i, (a, b, p) in enumerate(zip(report["alpha"], report["beta"], report["p"])):
        print(f"{i:>4}  {a:>12.8f}  {b:>12.8f}  {p:>8.4g}")
    if report["binding_links"]:
        print("binding links (receiver, sender): " + ", ".join(f"({i},{j})" for i, j in report["binding_links"]))
    return 0


# ---------------------------------------------------------------------------
# audit


def _params_from_summary(summary: dict, info: dict) -> PrivacyParams:
    sig = summary["sigma_schedule"]
    lr = summary["lr_schedule_base"]
    lr_mu = info.get("lr_mu")
    return PrivacyParams(
        eps_max=unjson_float(info["eps_max"]),
        delta=float(summary["delta"]),
        grad_bound=float(info["grad_bound"]),
        theta=float(info["theta"]),
        sigma_schedule=Schedule(sig["kind"], float(sig["scale"])),
        lr_schedule=Schedule(lr["kind"], float(lr["scale"])),
        lr_mu=None if lr_mu is None else float(lr_mu),
    )


def audit_run(run_dir: Path) -> dict:
    """Recompute every per-epoch link budget from the logged parameters and compare with the ledger."""
    needed = ["summary.json", "privacy_ledger.csv", "eps_matrix.csv"]
    missing = [n for n in needed if not (run_dir / n).exists()]
    if missing:
        raise ArtifactsMissingError(f"{run_dir} lacks {', '.join(missing)}")
    summary = json.loads((run_dir / "summary.json").read_text())
    topo_d = summary["topology"]
    topo = NetworkTopology(np.array(topo_d["gains"], dtype=float), int(topo_d["degree_bound"]))
    epochs = int(summary["epochs"])
    ledger_rows = read_csv(run_dir / "privacy_ledger.csv")
    matrix_rows = read_csv(run_dir / "eps_matrix.csv")
    report = {"run_dir": str(run_dir), "algorithms": {}, "mismatches": []}

    for alg, info in summary["algorithms"].items():
        params = _params_from_summary(summary, info)
        p = np.array(info["p"], dtype=float)
        if alg == ex.BASELINE:
            link_alpha = np.array(info["link_alpha"], dtype=float)

            def eps_at(t):
                return unicast_epsilon_matrix(topo, link_alpha, p, params, t)
        else:
            alloc = PowerAllocation(np.array(info["alpha"], dtype=float), p)

            def eps_at(t, alloc=alloc):
                if summary.get("resolve_each_epoch") and not params.proportional:
                    alloc = PowerAllocation(solve_lp(build_lp(topo, params, p, t)), p)
                return epsilon_matrix(topo, alloc, params, t)

        rows = [r for r in ledger_rows if r["algorithm"] == alg]
        if len(rows) != epochs:
            report["mismatches"].append(f"{alg}: ledger has {len(rows)} epochs, summary says {epochs}")
        links = topo.adjacency.T
        running = np.zeros((topo.num_nodes, topo.num_nodes))
        per_epoch = []
        for t in range(1, epochs + 1):
            eps = eps_at(t)
            vals = eps[links]
            per_epoch.append(float(vals.max()) if vals.size else 0.0)
            np.maximum(running, eps, out=running)
        for t, (row, value) in enumerate(zip(rows, per_epoch), start=1):
            logged = parse_float(row["eps_epoch_max"])
            if not _same(logged, value):
                report["mismatches"].append(f"{alg}: epoch {t} logged eps {row['eps_epoch_max']} != recomputed {fmt(value)}")
        for row in (r for r in matrix_rows if r["algorithm"] == alg):
            i, j = int(row["receiver"]), int(row["sender"])
            logged = parse_float(row["eps_max_over_epochs"])
            if not _same(logged, running[i, j]):
                report["mismatches"].append(
                    f"{alg}: eps[{i},{j}] logged {row['eps_max_over_epochs']} != recomputed {fmt(running[i, j])}"
                )
        composed = compose(epochs, per_epoch, params.delta)
        logged_comp = [unjson_float(v) for v in info["composition"]["realized"]]
        if not (_same(logged_comp[0], composed[0]) and _same(logged_comp[1], composed[1])):
            report["mismatches"].append(f"{alg}: composed {logged_comp} != recomputed {list(composed)}")
        report["algorithms"][alg] = {
            "per_epoch_max_first": per_epoch[0] if per_epoch else None,
            "per_epoch_max_last": per_epoch[-1] if per_epoch else None,
            "per_epoch_max_peak": max(per_epoch) if per_epoch else None,
            "composed": list(composed),
            "certified": list(certified_budget(epochs, params.eps_max, params.delta)),
            "unbounded": any(math.isinf(v) for v in per_epoch),
        }
    report["ok"] = not report["mismatches"]
    return report


def _same(a: float, b: float) -> bool:
    if math.isinf(a) or math.isinf(b):
        return a == b
    return abs(a - b) <= AUDIT_TOL


def cmd_audit(args) -> int:
    report = audit_run(Path(args.run_dir))
    if args.json:
        print(json.dumps(jsonable(report), indent=2, sort_keys=True))
    else:
        for alg, info in report["algorithms"].items():
            if info["unbounded"]:
                print(f"{alg}: eps = inf (UNBOUNDED: no privacy noise reaches some receiver)")
            else:
                print(f"{alg}: per-epoch max eps first={fmt(info['per_epoch_max_first'])} "
                      f"last={fmt(info['per_epoch_max_last'])} peak={fmt(info['per_epoch_max_peak'])}")
            print(f"{alg}: composed {_pair(info['composed'])}, certified {_pair(info['certified'])}")
        for line in report["mismatches"]:
            print(f"MISMATCH {line}")
        print("audit ok" if report["ok"] else f"audit FAILED: {len(report['mismatches'])} mismatch(es)")
    return 0 if report["ok"] else 1


# ---------------------------------------------------------------------------
# presets


def cmd_presets(args) -> int:
    if args.name is None:
        for name in sorted(PRESETS):
            print(name)
        return 0
    if args.name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {args.name!r}; known: {sorted(PRESETS)}")
    print(yaml.safe_dump(jsonable(PRESETS[args.name]), sort_keys=True), end="")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="powerdp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("config", help="YAML config file or preset name")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable; applied last)")

    run = sub.add_parser("run", help="allocate power, simulate and write artifacts")
    config_args(run)
    run.add_argument("--out", help="output directory (overrides the env root)")
    run.set_defaults(func=cmd_run)

    alloc = sub.add_parser("alloc", help="solve the power allocation and print it")
    config_args(alloc)
    alloc.add_argument("--json", action="store_true")
    alloc.set_defaults(func=cmd_alloc)

    audit = sub.add_parser("audit", help="recompute privacy budgets of a finished run")
    audit.add_argument("run_dir")
    audit.add_argument("--json", action="store_true")
    audit.set_defaults(func=cmd_audit)

    presets = sub.add_parser("presets", help="list presets or show one")
    presets.add_argument("name", nargs="?")
    presets.set_defaults(func=cmd_presets)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(json.dumps({"error": "ConfigError", "field": err.field, "message": str(err)}), file=sys.stderr)
        return 2
    except (PowerDPError, ValueError, OSError) as err:
        print(json.dumps({"error": type(err).__name__, "message": str(err)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
