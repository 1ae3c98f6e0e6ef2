"""Command-line harness: plan one scenario, sweep scenario x algorithm x seed, classify.

Exit codes: 0 success, 1 parse or input error, 2 planning failure (``plan`` only).
``IAGPSTO_THREADS`` sets the number of worker processes for ``bench`` (default 1).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, is_dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from . import world as W
from .agd_core import feasibility
from .objective import Objective, classify
from .planner import ALGORITHMS, PlannerConfig, initial_problem, run_algorithm
from .scenario import Scenario, ScenarioError, from_dict, load, load_dir, suite_dir
from .trajgp import ParameterError

THREADS_ENV = "IAGPSTO_THREADS"
GRID_KEYS = ("theta1", "theta2")


class CliError(Exception):
    """Bad command line, config file or scenario; maps to exit code 1."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _override(obj, values: dict, where: str):
    if not isinstance(values, dict):
        raise CliError(f"{where}: expected a mapping")
    known = {f.name: f for f in fields(obj)}
    out = {}
    for k, v in values.items():
        if k not in known:
            raise CliError(f"{where}: unknown key {k!r}")
        cur = getattr(obj, k)
        if is_dataclass(cur):
            out[k] = _override(cur, v, f"{where}.{k}")
        elif isinstance(cur, tuple):
            out[k] = tuple(v)
        else:
            out[k] = v
    try:
        return replace(obj, **out)
    except (ParameterError, TypeError, ValueError) as e:
        raise CliError(f"{where}: {e}") from e


def config_from_dict(d: dict | None) -> PlannerConfig:
    """Planner defaults overridden by ``d``.

    Top-level keys are ``PlannerConfig`` fields; ``agd`` and ``asto`` hold nested overrides.
    """
    return _override(PlannerConfig(), d or {}, "config")


def load_config(path) -> PlannerConfig:
    if path is None:
        return PlannerConfig()
    try:
        with open(path) as fh:
            d = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as e:
        raise CliError(f"cannot read config {path}: {e}") from e
    return config_from_dict(d)


def with_thetas(cfg: PlannerConfig, theta1: float, theta2: float) -> PlannerConfig:
    return replace(cfg, agd=replace(cfg.agd, theta1=theta1, theta2=theta2))


def parse_grid(items) -> dict[str, list[float]]:
    """``["theta1=1,2", "theta2=0,0.25"]`` -> {"theta1": [1, 2], "theta2": [0, 0.25]}."""
    grid = {}
    for it in items:
        key, sep, vals = it.partition("=")
        if not sep or key not in GRID_KEYS:
            raise CliError(f"grid entries look like theta1=1,2 (got {it!r})")
        try:
            grid[key] = [float(v) for v in vals.split(",") if v.strip()]
        except ValueError as e:
            raise CliError(f"bad grid value in {it!r}") from e
        if not grid[key]:
            raise CliError(f"empty grid axis {key}")
    return grid


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    scenario: str
    cls: str
    algorithm: str
    seed: int
    theta1: float
    theta2: float
    success: bool
    wall_time: float
    iterations: int
    restarts: int
    asto_phases: int
    f_final: float
    f_obs: float
    continuous_safe: bool
    error: str = ""


CSV_FIELDS = [f.name for f in fields(RunRecord)]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow([_fmt(getattr(r, k)) for k in CSV_FIELDS])
    return buf.getvalue()


def tuple_rng(master_seed: int, scenario_id: str, algorithm: str, seed: int) -> np.random.Generator:
    """Independent stream per (scenario, algorithm, seed), derived from the master seed."""
    key = [int(master_seed), zlib.crc32(scenario_id.encode()), zlib.crc32(algorithm.encode()), int(seed)]
    return np.random.default_rng(np.random.SeedSequence(key))


def run_one(sc: Scenario, algorithm: str, seed: int, cfg: PlannerConfig, master_seed: int = 0,
            timing: bool = True):
    """(RunRecord, trajectory, GP, report). Planner exceptions become failed records."""
    rng = tuple_rng(master_seed, sc.id, algorithm, seed)
    rec = RunRecord(sc.id, sc.class_hint, algorithm, int(seed), float(cfg.agd.theta1), float(cfg.agd.theta2),
                    False, 0.0, 0, 0, 0, math.nan, math.nan, False)
    t0 = time.perf_counter()
    try:
        x, gp, rep = run_algorithm(algorithm, sc.start, sc.goal, sc.world, cfg, rng)
    except Exception as e:  # a failed run is data, the sweep goes on
        rec.wall_time = time.perf_counter() - t0 if timing else 0.0
        rec.error = f"{type(e).__name__}: {e}".replace("\n", " ")
        return rec, None, None, None
    rec.wall_time = time.perf_counter() - t0 if timing else 0.0
    # safety is re-derived from the returned trajectory rather than taken from the report
    w = sc.world
    unit = Objective.from_gp(gp, w, 1.0)
    rec.f_obs = float(unit.obstacle_free(x))
    rec.continuous_safe = bool(W.continuous_safe(x, gp, w.robot, w.grid, w.params, cfg.g_tol, cfg.n_intervals))
    rec.success = bool(rep.success and rec.f_obs <= cfg.g_tol and rec.continuous_safe)
    rec.f_final = float(rep.f_final)
    rec.iterations = int(rep.iterations)
    rec.restarts = int(rep.restarts)
    rec.asto_phases = int(rep.asto_phases)
    return rec, x, gp, rep


def trace_of(rec: RunRecord, rep) -> dict:
    def clean(v):
        if isinstance(v, (list, tuple)):
            return [clean(u) for u in v]
        if isinstance(v, dict):
            return {k: clean(u) for k, u in v.items()}
        if isinstance(v, (np.floating, float)):
            return float(v) if math.isfinite(v) else None
        if isinstance(v, np.integer):
            return int(v)
        if isinstance(v, np.bool_):
            return bool(v)
        return v
    out = {"record": clean(asdict(rec))}
    if rep is not None:
        out.update(cost=clean(rep.cost_trace), lipschitz=clean(rep.lipschitz_trace), events=clean(rep.events))
    return out


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------

def warm_up(sc: Scenario):
    """Load the compiled kernels outside any timed region."""
    gp, obj = initial_problem(sc.start, sc.goal, sc.world, PlannerConfig())
    obj.value_and_grad(gp.mean)
    w = sc.world
    W.continuous_safe(gp.mean, gp, w.robot, w.grid, w.params)


_WORKER_CACHE: dict = {}


def _task(args):
    src, algorithm, seed, cfg, master_seed, timing, want_trace = args
    sid = src["id"]
    if sid not in _WORKER_CACHE:
        _WORKER_CACHE[sid] = from_dict(src)
        warm_up(_WORKER_CACHE[sid])
    rec, _, _, rep = run_one(_WORKER_CACHE[sid], algorithm, seed, cfg, master_seed, timing)
    return rec, trace_of(rec, rep) if want_trace else None


def grid_cells(grid: dict | None, cfg: PlannerConfig) -> list[tuple[float, float]]:
    if not grid:
        return [(cfg.agd.theta1, cfg.agd.theta2)]
    t1 = grid.get("theta1", [cfg.agd.theta1])
    t2 = grid.get("theta2", [cfg.agd.theta2])
    return [(a, b) for a in t1 for b in t2]


def sweep(scenarios, algorithms, cfg: PlannerConfig, seeds: int | None = None, master_seed: int = 0,
          grid: dict | None = None, jobs: int = 1, timing: bool = True, want_trace: bool = False):
    """Run every (cell, scenario, algorithm, seed) tuple; returns (records, traces) in tuple order.

    Grid cells outside the admissible (theta1, theta2) region are skipped.
    """
    tasks = []
    for t1, t2 in grid_cells(grid, cfg):
        if t1 < 1 or t2 < 0 or feasibility(t1, t2) < 0:
            continue
        c = with_thetas(cfg, t1, t2)
        for sc in scenarios:
            for a in algorithms:
                for s in range(sc.repeats if seeds is None else seeds):
                    tasks.append((sc.source, a, s, c, master_seed, timing, want_trace))
    if jobs <= 1:
        out = []
        for sc in scenarios:
            warm_up(sc)
            _WORKER_CACHE[sc.id] = sc
        for t in tasks:
            out.append(_task(t))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            out = list(ex.map(_task, tasks, chunksize=1))
    return [o[0] for o in out], [o[1] for o in out]


def summarize(records) -> list[dict]:
    """One row per (theta1, theta2, algorithm, class) in first-seen order."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r.theta1, r.theta2, r.algorithm, r.cls), []).append(r)
    rows = []
    for (t1, t2, a, c), rs in groups.items():
        t = np.array([r.wall_time for r in rs])
        n_ok = sum(r.success for r in rs)
        rows.append({"theta1": t1, "theta2": t2, "algorithm": a, "cls": c, "runs": len(rs), "successes": n_ok,
                     "success_pct": 100.0 * n_ok / len(rs), "mean_time": float(t.mean()),
                     "std_time": float(t.std()), "median_time": float(np.median(t)),
                     "median_iterations": float(np.median([r.iterations for r in rs])),
                     "errors": sum(bool(r.error) for r in rs)})
    return rows


SUMMARY_FIELDS = ["theta1", "theta2", "algorithm", "cls", "runs", "successes", "success_pct", "mean_time",
                  "std_time", "median_time", "median_iterations", "errors"]


def summary_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in SUMMARY_FIELDS])
    return buf.getvalue()


def grid_matrix(records, grid: dict, algorithm: str | None = None) -> tuple[list, list, list[list[str]]]:
    """Rows theta1, columns theta2, cells "success% | mean time"; "-" marks inadmissible cells."""
    t1s, t2s = grid.get("theta1", []), grid.get("theta2", [])
    cells = []
    for a in t1s:
        row = []
        for b in t2s:
            rs = [r for r in records if r.theta1 == a and r.theta2 == b and (algorithm is None or r.algorithm == algorithm)]
            if not rs:
                row.append("-")
                continue
            pct = 100.0 * sum(r.success for r in rs) / len(rs)
            row.append(f"{pct:.0f} | {np.mean([r.wall_time for r in rs]):.2f}")
        cells.append(row)
    return t1s, t2s, cells


def best_cell(records, grid: dict) -> tuple[float, float]:
    """Highest success rate, ties broken by lower mean wall time."""
    best, key = None, None
    for a in grid.get("theta1", []):
        for b in grid.get("theta2", []):
            rs = [r for r in records if r.theta1 == a and r.theta2 == b]
            if not rs:
                continue
            k = (-sum(r.success for r in rs) / len(rs), float(np.mean([r.wall_time for r in rs])))
            if key is None or k < key:
                best, key = (a, b), k
    return best


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="iagpsto", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    pl = sub.add_parser("plan", help="run one algorithm on one scenario")
    pl.add_argument("--scenario", required=True)
    pl.add_argument("--algo", choices=ALGORITHMS, default="iagpsto")
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--master-seed", type=int, default=0)
    pl.add_argument("--out", default=None, help="JSON with trajectory and record")
    pl.add_argument("--config", default=None)

    b = sub.add_parser("bench", help="scenario x algorithm x seed sweep")
    b.add_argument("--scenarios", default=None, help="directory of scenario files (default: shipped suite)")
    b.add_argument("--only", default=None, help="comma-separated scenario ids")
    b.add_argument("--algos", default="iagpsto,agpsto,lreagd,agd-fixed")
    b.add_argument("--seeds", type=int, default=None, help="seeds per scenario (default: its repeat count)")
    b.add_argument("--master-seed", type=int, default=0)
    b.add_argument("--config", default=None)
    b.add_argument("--grid", nargs="+", default=None, metavar="KEY=V1,V2")
    b.add_argument("--out", default="records.csv")
    b.add_argument("--summary", default=None, help="summary CSV (default: <out stem>_summary.csv)")
    b.add_argument("--trace-dir", default=None, help="write one JSON trace per run here")
    b.add_argument("--jobs", type=int, default=None, help=f"worker processes (default: ${THREADS_ENV} or 1)")
    b.add_argument("--no-timing", action="store_true", help="record wall time as 0 for byte-stable output")

    c = sub.add_parser("classify", help="difficulty measures of the straight-line initialization")
    c.add_argument("--scenario", required=True)
    c.add_argument("--config", default=None)
    return p


def _load_scenario(path) -> Scenario:
    try:
        return load(path)
    except (OSError, ScenarioError) as e:
        raise CliError(str(e)) from e


def cmd_plan(args) -> int:
    sc = _load_scenario(args.scenario)
    cfg = load_config(args.config)
    warm_up(sc)
    rec, x, gp, rep = run_one(sc, args.algo, args.seed, cfg, args.master_seed)
    if args.out:
        doc = trace_of(rec, rep)
        if x is not None:
            doc["times"] = gp.times.tolist()
            doc["trajectory"] = np.asarray(x).reshape(gp.n_support, -1).tolist()
        Path(args.out).write_text(json.dumps(doc, indent=1))
    state = "success" if rec.success else "failure"
    print(f"{sc.id} {args.algo} seed={args.seed}: {state} F_obs={rec.f_obs:.3e} t={rec.wall_time:.3f}s"
          + (f" ({rec.error})" if rec.error else ""))
    return 0 if rec.success else 2


def _jobs(args) -> int:
    if args.jobs is not None:
        return max(1, args.jobs)
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError as e:
        raise CliError(f"{THREADS_ENV} must be an integer (got {raw!r})") from e


def cmd_bench(args) -> int:
    algos = [a for a in args.algos.split(",") if a]
    bad = [a for a in algos if a not in ALGORITHMS]
    if bad or not algos:
        raise CliError(f"unknown algorithm(s) {bad}; choose from {', '.join(ALGORITHMS)}")
    try:
        scenarios = load_dir(args.scenarios or suite_dir())
    except (OSError, ScenarioError) as e:
        raise CliError(str(e)) from e
    if args.only:
        ids = args.only.split(",")
        scenarios = [s for s in scenarios if s.id in ids]
        if not scenarios:
            raise CliError(f"no scenario matches {args.only!r}")
    cfg = load_config(args.config)
    grid = parse_grid(args.grid) if args.grid else None
    records, traces = sweep(scenarios, algos, cfg, args.seeds, args.master_seed, grid, _jobs(args),
                            timing=not args.no_timing, want_trace=args.trace_dir is not None)
    out = Path(args.out)
    out.write_text(records_csv(records))
    rows = summarize(records)
    summary = Path(args.summary) if args.summary else out.with_name(out.stem + "_summary.csv")
    summary.write_text(summary_csv(rows))
    if args.trace_dir:
        d = Path(args.trace_dir)
        d.mkdir(parents=True, exist_ok=True)
        for r, t in zip(records, traces):
            name = f"{r.scenario}__{r.algorithm}__t{r.theta1:g}_{r.theta2:g}__s{r.seed}.json"
            (d / name).write_text(json.dumps(t))
    for r in rows:
        print(f"{r['algorithm']:>10} {r['cls']}  theta=({r['theta1']:g}, {r['theta2']:g})  "
              f"success {r['success_pct']:5.1f}%  time {r['mean_time']:.3f} +- {r['std_time']:.3f} s  "
              f"runs {r['runs']}")
    if grid:
        t1s, t2s, cells = grid_matrix(records, grid)
        print("theta1 \\ theta2 " + " ".join(f"{b:>12g}" for b in t2s))
        for a, row in zip(t1s, cells):
            print(f"{a:>15g} " + " ".join(f"{c:>12}" for c in row))
        print("best cell:", best_cell(records, grid))
    print(f"{len(records)} runs -> {out}, summary -> {summary}")
    return 0


def cmd_classify(args) -> int:
    sc = _load_scenario(args.scenario)
    cfg = load_config(args.config)
    gp, obj = initial_problem(sc.start, sc.goal, sc.world, cfg)
    pc = classify(obj, gp.mean, cfg.n_intervals)
    print(f"{pc.caption()} {pc.label}")
    return 0


COMMANDS = {"plan": cmd_plan, "bench": cmd_bench, "classify": cmd_classify}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.cmd](args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
