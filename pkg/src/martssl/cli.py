"""Experiment driver: plan execution, table emission, and the verification battery.

Verbs:
    run     execute every cell of a plan file (idempotent per config hash)
    sweep   regularization-weight grid for one plan cell
    table   aggregate persisted runs into a delimited summary
    verify  run the analytic property battery; nonzero exit on failure

Run directories are keyed by config hash and contain config.json, steps.csv,
metrics.csv, checkpoint.jsonl, and runinfo.json. Metric files are byte-stable
given a config; wall times are confined to runinfo.json.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .rng import Rng
from .train import (GridResult, RunConfig, RunRecord, TrainingDiverged,
                    checkpoint_text, metrics_csv, run_grid, run_training,
                    steps_csv)

OUT_ENV_VAR = "MARTSSL_OUT"
PLAN_SCHEMA_VERSION = 1


class PlanError(ValueError):
    pass


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV_VAR, "runs"))


@dataclasses.dataclass
class ExperimentPlan:
    cells: list                 # RunConfig per (dataset, mode, variant, seed)
    out_dir: Path

    @classmethod
    def load(cls, path, out_override=None, seed_offset=0) -> "ExperimentPlan":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise PlanError(f"cannot parse plan {path}: {e}") from e
        if doc.get("schema_version") != PLAN_SCHEMA_VERSION:
            raise PlanError(f"plan {path}: expected schema_version "
                            f"{PLAN_SCHEMA_VERSION}, got {doc.get('schema_version')}")
        shared = doc.get("shared", {})
        cells = []
        for i, cell in enumerate(doc.get("cells", [])):
            merged = {**shared, **cell}
            seeds = merged.pop("seeds", [merged.pop("seed", 0)])
            for seed in seeds:
                try:
                    cells.append(RunConfig(**merged, seed=int(seed) + seed_offset))
                except (TypeError, ValueError) as e:
                    raise PlanError(f"plan cell {i}: {e}") from e
        out = Path(out_override) if out_override else Path(doc.get("out", default_out_root()))
        return cls(cells, out)


def run_dir_for(out_dir: Path, config: RunConfig) -> Path:
    return Path(out_dir) / config.config_hash()


def is_completed(run_dir: Path) -> bool:
    info = run_dir / "runinfo.json"
    if not info.exists():
        return False
    try:
        return json.loads(info.read_text()).get("completed", False)
    except json.JSONDecodeError:
        return False


def persist_record(record: RunRecord, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(record.config.to_dict(), indent=2, sort_keys=True) + "\n")
    (run_dir / "steps.csv").write_text(steps_csv(record))
    (run_dir / "metrics.csv").write_text(metrics_csv(record))
    (run_dir / "checkpoint.jsonl").write_text(checkpoint_text(record))
    (run_dir / "runinfo.json").write_text(json.dumps({
        "config_hash": record.config_hash,
        "completed": True,
        "param_count": record.param_count,
        "wall_time_s": record.wall_time,
        "steps": len(record.steps),
    }, indent=2) + "\n")


def _run_cell(args):
    config_dict, out_dir = args
    config = RunConfig.from_dict(config_dict)
    run_dir = run_dir_for(Path(out_dir), config)
    if is_completed(run_dir):
        return (config.config_hash(), "skipped", "")
    try:
        record = run_training(config)
        persist_record(record, run_dir)
        return (config.config_hash(), "ok", "")
    except TrainingDiverged as e:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "runinfo.json").write_text(json.dumps({
            "config_hash": config.config_hash(), "completed": False,
            "failed": True, "diverged_at_step": e.step,
            "breakdown": e.breakdown}, indent=2) + "\n")
        return (config.config_hash(), "failed", str(e))
    except Exception as e:  # cell isolation: one bad cell must not sink the plan
        return (config.config_hash(), "failed", f"{e}\n{traceback.format_exc()}")


def cmd_run(plan: ExperimentPlan, workers=1) -> dict:
    """Execute all plan cells; completed cells are skipped."""
    jobs = [(c.to_dict(), str(plan.out_dir)) for c in plan.cells]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    summary = {"ok": 0, "skipped": 0, "failed": 0, "cells": []}
    for h, status, msg in results:
        summary[status] += 1
        summary["cells"].append({"hash": h, "status": status, "error": msg})
    return summary


def _load_runs(out_dir: Path) -> list:
    runs = []
    for sub in sorted(Path(out_dir).iterdir()):
        cfg_file = sub / "config.json"
        metrics_file = sub / "metrics.csv"
        if not (cfg_file.exists() and metrics_file.exists() and is_completed(sub)):
            continue
        config = RunConfig.from_dict(json.loads(cfg_file.read_text()))
        metrics = {}
        for line in metrics_file.read_text().strip().split("\n")[1:]:
            c, name, value = line.split(",")
            metrics.setdefault(name, {})[float(c)] = float(value)
        runs.append((config, metrics))
    return runs


def _sem(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return 0.0 if len(v) < 2 else float(v.std(ddof=1) / np.sqrt(len(v)))


def _group_runs(runs):
    groups = {}
    for config, metrics in runs:
        key = (config.dataset.get("kind"), config.mode, config.variant)
        groups.setdefault(key, []).append(metrics)
    return groups


def table_main(runs) -> str:
    """Mean downstream accuracy over the completeness grid, mean +- SEM across
    seeds, with a relative-gain row against the matching base variant."""
    groups = _group_runs(runs)
    lines = ["dataset\tmode\tvariant\tn_seeds\tmean_acc\tsem\trel_gain_vs_base"]
    base_means = {}
    for (kind, mode, variant), cells in sorted(groups.items()):
        if variant == "base":
            base_means[(kind, mode)] = np.mean([m["mean_probe_acc"][-1.0] for m in cells])
    for (kind, mode, variant), cells in sorted(groups.items()):
        accs = [m["mean_probe_acc"][-1.0] for m in cells]
        base = base_means.get((kind, mode))
        gain = ""
        if base is not None and base > 0:
            gain = f"{100.0 * (np.mean(accs) - base) / base:+.1f}%"
        lines.append(f"{kind}\t{mode}\t{variant}\t{len(accs)}\t"
                     f"{np.mean(accs):.4f}\t{_sem(accs):.4f}\t{gain}")
    return "\n".join(lines) + "\n"


def table_sensitivity(runs) -> str:
    """Accuracy and violation means per (lam_imp, lam_mart) cell."""
    groups = {}
    for config, metrics in runs:
        key = (config.dataset.get("kind"), config.mode, config.variant,
               config.lam_imp, config.lam_mart)
        groups.setdefault(key, []).append(metrics)
    lines = ["dataset\tmode\tvariant\tlam_imp\tlam_mart\tn_seeds\tmean_acc\tmean_v_pred\tmean_v_lat"]
    for key, cells in sorted(groups.items()):
        accs = [m["mean_probe_acc"][-1.0] for m in cells]
        vp = [np.mean(list(m["v_pred"].values())) for m in cells if "v_pred" in m]
        vl = [np.mean(list(m["v_lat"].values())) for m in cells if "v_lat" in m]
        lines.append("\t".join([key[0], key[1], key[2], f"{key[3]:g}", f"{key[4]:g}",
                                str(len(accs)), f"{np.mean(accs):.4f}",
                                f"{np.mean(vp):.6g}" if vp else "",
                                f"{np.mean(vl):.6g}" if vl else ""]))
    return "\n".join(lines) + "\n"


def table_calibration(runs) -> str:
    groups = _group_runs(runs)
    lines = ["dataset\tmode\tvariant\tn_seeds\tmean_regret\tmean_ece\tmean_nll"]
    for (kind, mode, variant), cells in sorted(groups.items()):
        reg = [np.mean(list(m["anytime_regret"].values())) for m in cells
               if "anytime_regret" in m]
        e = [np.mean(list(m["ece"].values())) for m in cells if "ece" in m]
        nl = [np.mean(list(m["nll"].values())) for m in cells if "nll" in m]
        if not reg:
            continue
        lines.append(f"{kind}\t{mode}\t{variant}\t{len(reg)}\t"
                     f"{np.mean(reg):.4f}\t{np.mean(e):.4f}\t{np.mean(nl):.4f}")
    return "\n".join(lines) + "\n"


def table_violations(runs) -> str:
    """Per-completeness violations in long format (plot-ready)."""
    lines = ["dataset\tmode\tvariant\tc\tmetric\tmean\tsem"]
    groups = _group_runs(runs)
    for (kind, mode, variant), cells in sorted(groups.items()):
        for metric in ("v_pred", "v_lat"):
            per_c = {}
            for m in cells:
                for c, v in m.get(metric, {}).items():
                    per_c.setdefault(c, []).append(v)
            for c in sorted(per_c):
                vals = per_c[c]
                lines.append(f"{kind}\t{mode}\t{variant}\t{c:g}\t{metric}\t"
                             f"{np.mean(vals):.6g}\t{_sem(vals):.6g}")
    return "\n".join(lines) + "\n"


TABLES = {"main": table_main, "sensitivity": table_sensitivity,
          "calibration": table_calibration, "violations": table_violations}


def cmd_table(out_dir, which) -> str:
    runs = _load_runs(out_dir)
    try:
        return TABLES[which](runs)
    except KeyError:
        raise PlanError(f"unknown table {which!r}; choose from {sorted(TABLES)}") from None


# ---------------------------------------------------------------------------
# verification battery

def _verify_checks():
    from . import theory

    def check_unbiasedness():
        rep = theory.verify_unbiasedness(dims=4, n_trials=100_000, rng=Rng(7))
        assert rep.two_sample_ok, (
            f"two-sample mean {rep.two_sample_mean:.5f} vs target {rep.target:.5f} "
            f"exceeds 4 se ({rep.two_sample_se:.5f})")
        assert rep.single_bias_ok, (
            f"single-sample bias {rep.single_sample_mean - rep.target:.5f} vs "
            f"predicted {rep.predicted_bias:.5f}")

    def check_linear_gaussian():
        rng = Rng(11)
        for i in range(100):
            inst = theory.random_lg_instance(rng.split(f"i{i}"))
            for lam in (0.0, 0.1, 1.0, 10.0, 100.0):
                b1c, b2c = theory.lg_closed_form(inst, lam)
                b1n, b2n = theory.lg_numeric_min(inst, lam)
                cf = np.concatenate([b1c, b2c])
                nm = np.concatenate([b1n, b2n])
                rel = np.linalg.norm(cf - nm) / (1.0 + np.linalg.norm(cf))
                assert rel < 1e-10, f"instance {i}, lam={lam}: rel diff {rel:.2e}"
            b1, b2 = theory.lg_closed_form(inst, 0.0)
            assert np.allclose(np.concatenate([b1, b2]), inst.w, atol=1e-8), \
                "lam=0 does not recover the true coefficients"
            b1, b2 = theory.lg_closed_form(inst, 1e8)
            assert np.linalg.norm(b2) < 1e-4, f"penalized block not shrunk: {np.linalg.norm(b2):.2e}"
            coarse = inst.w1 + np.linalg.solve(inst.sigma11, inst.sigma12 @ inst.w2)
            assert np.linalg.norm(b1 - coarse) < 1e-4, "large-penalty limit misses coarse coefficients"

    def check_excess_risk():
        rep = theory.verify_excess_risk_bound(n_instances=1000, rng=Rng(13))
        assert rep.ok, f"{rep.violations} inequality violations (max slack {rep.max_slack:.2e})"

    def check_monotone_shrinkage():
        rng = Rng(17)
        for i in range(20):
            inst = theory.random_lg_instance(rng.split(f"i{i}"))
            norms = [np.linalg.norm(theory.lg_closed_form(inst, lam)[1])
                     for lam in (0.0, 0.1, 1.0, 10.0, 100.0, 1e4)]
            assert all(a >= b - 1e-12 for a, b in zip(norms, norms[1:])), \
                f"penalized block norm not nonincreasing: {norms}"

    return [("unbiasedness", check_unbiasedness),
            ("linear_gaussian_closed_form", check_linear_gaussian),
            ("excess_risk_bound", check_excess_risk),
            ("penalty_monotone_shrinkage", check_monotone_shrinkage)]


def cmd_verify(stream=None) -> int:
    """Run every analytic check; report per-check runtimes; nonzero on failure."""
    stream = stream if stream is not None else sys.stdout
    failures = 0
    for name, check in _verify_checks():
        t0 = time.perf_counter()
        try:
            check()
            status = "PASS"
        except AssertionError as e:
            status = f"FAIL: {e}"
            failures += 1
        print(f"[{time.perf_counter() - t0:6.2f}s] {name}: {status}", file=stream)
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="martssl",
                                description="martingale-consistent SSL experiments")
    sub = p.add_subparsers(dest="verb", required=True)

    run_p = sub.add_parser("run", help="execute a plan file")
    run_p.add_argument("--plan", required=True)
    run_p.add_argument("--out", default=None)
    run_p.add_argument("--workers", type=int, default=1)
    run_p.add_argument("--seed-offset", type=int, default=0)

    sweep_p = sub.add_parser("sweep", help="weight grid for one plan cell")
    sweep_p.add_argument("--plan", required=True)
    sweep_p.add_argument("--out", default=None)
    sweep_p.add_argument("--imp-grid", default="1e-4,1e-3,1e-2,1e-1,1,10,100,1000")
    sweep_p.add_argument("--mart-grid", default="1e-4,1e-3,1e-2,1e-1,1,10,100,1000,10000")

    table_p = sub.add_parser("table", help="aggregate persisted runs")
    table_p.add_argument("--out", default=None)
    table_p.add_argument("--table", default="main", choices=sorted(TABLES))

    sub.add_parser("verify", help="analytic property battery")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verb == "run":
        plan = ExperimentPlan.load(args.plan, args.out, args.seed_offset)
        summary = cmd_run(plan, workers=args.workers)
        print(json.dumps(summary, indent=2))
        return 1 if summary["failed"] else 0
    if args.verb == "sweep":
        plan = ExperimentPlan.load(args.plan, args.out)
        if not plan.cells:
            print("empty plan", file=sys.stderr)
            return 1
        imp = [float(v) for v in args.imp_grid.split(",")]
        mart = [float(v) for v in args.mart_grid.split(",")]
        result = run_grid(plan.cells[0], imp, mart)
        print("lam_imp\tlam_mart\tval_acc")
        for i, li in enumerate(result.imp_grid):
            for j, lm in enumerate(result.mart_grid):
                print(f"{li:g}\t{lm:g}\t{result.scores[i, j]:.4f}")
        print(f"best\t{result.best[0]:g}\t{result.best[1]:g}")
        return 0
    if args.verb == "table":
        out = Path(args.out) if args.out else default_out_root()
        sys.stdout.write(cmd_table(out, args.table))
        return 0
    if args.verb == "verify":
        return cmd_verify()
    return 2


if __name__ == "__main__":
    sys.exit(main())
