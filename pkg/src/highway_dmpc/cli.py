"""Command-line front end: run, sweep, report, validate.

Exit codes: 0 success, 1 collision under ``--strict``, 2 invalid config or
arguments, 3 run error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from itertools import product
from pathlib import Path

import numpy as np

from .config import PLANNERS, ConfigError, ScenarioConfig, default_config, load_config, parse_config
from .metrics import Trajectories, aggregate, compare_to_baseline, travel_times
from .sim import RunResult, run_scenario

log = logging.getLogger(__name__)

TRAJ_COLUMNS = ("t", "id", "class", "s", "y_e", "v_s", "v_y", "a_t", "lane")
VEHICLE_COLUMNS = ("id", "class", "t_arrival", "t_enter", "t_exit", "lane", "v_do")
SWEEP_KEYS = ("demand", "penetration", "planner", "seed")


# ---------------------------------------------------------------- reports
def build_report(result: RunResult) -> dict:
    cfg = result.config
    metrics = aggregate(result.trajectories, cfg.scenario.dt_s, cfg.road.length,
                        result.end_time, cfg.metrics)
    return _report(cfg, metrics, result.entries, {
        "end_time": result.end_time,
        "solver": result.solver,
        "collisions": result.collisions,
        "hyperellipse_violations": len(result.hyperellipse_violations),
        "conservation_ok": result.conservation_ok,
        "rsa": _rsa_summary(result.rsa_log, cfg.scenario.planner),
    })


def _report(cfg: ScenarioConfig, metrics: dict, entries: list, run: dict) -> dict:
    tt = travel_times(entries)
    for cls in ("fleet", "cav", "hdv"):
        metrics[cls]["travel_time"] = tt[cls]
    return {"config": cfg.to_dict(), "metrics": metrics, "run": run}


def _rsa_summary(rsa_log: list, planner: str) -> dict:
    paths = [lane["path"] for rec in rsa_log for lane in rec["lanes"]]
    return {"assignments": len(rsa_log),
            "filtered": len(rsa_log) if planner == "1d" else 0,
            "fused_lanes": paths.count("fused"),
            "rule_lanes": paths.count("rule")}


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    return obj


# ---------------------------------------------------------------- artifacts
def write_run(result: RunResult, out: Path, trace: bool = False) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    report = build_report(result)
    (out / "report.json").write_text(dumps(report))
    tr = result.trajectories
    with open(out / "trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRAJ_COLUMNS)
        for k in range(len(tr.t)):
            w.writerow([repr(float(tr.t[k])), int(tr.vid[k]), "cav" if tr.is_cav[k] else "hdv",
                        repr(float(tr.s[k])), repr(float(tr.y[k])), repr(float(tr.v_s[k])),
                        repr(float(tr.v_y[k])), repr(float(tr.a[k])), int(tr.lane[k])])
    with open(out / "vehicles.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(VEHICLE_COLUMNS)
        for e in result.entries:
            w.writerow([e["vid"], "cav" if e["is_cav"] else "hdv", repr(e["t_arrival"]),
                        repr(e["t_enter"]), "" if e["t_exit"] is None else repr(e["t_exit"]),
                        e["lane"], repr(e["v_do"])])
    with open(out / "rsa_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t", "id", "lane", "v_l", "path", "density", "v_d", "signal", "filtered"))
        filtered = int(result.config.scenario.planner == "1d")
        for rec in result.rsa_log:
            for lane in rec["lanes"]:
                w.writerow([repr(rec["t"]), rec["vid"], lane["lane"], repr(float(lane["v_l"])),
                            lane["path"], repr(float(lane["density"])), repr(float(rec["v_d"])),
                            rec["signal"], filtered])
    if trace:
        with open(out / "solver_trace.jsonl", "w") as fh:
            for rec in result.solver_trace:
                fh.write(json.dumps(_jsonable(rec), sort_keys=True) + "\n")
    return report


def read_trajectories(path: Path) -> Trajectories:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    col = lambda k, f=float: np.array([f(r[k]) for r in rows])
    return Trajectories(t=col("t"), vid=col("id", int), is_cav=np.array([r["class"] == "cav" for r in rows]),
                        s=col("s"), y=col("y_e"), v_s=col("v_s"), v_y=col("v_y"), a=col("a_t"),
                        lane=col("lane", int))


def read_entries(path: Path) -> list:
    with open(path, newline="") as fh:
        return [{"vid": int(r["id"]), "is_cav": r["class"] == "cav",
                 "t_arrival": float(r["t_arrival"]), "t_enter": float(r["t_enter"]),
                 "t_exit": float(r["t_exit"]) if r["t_exit"] else None,
                 "lane": int(r["lane"]), "v_do": float(r["v_do"])} for r in csv.DictReader(fh)]


# ---------------------------------------------------------------- sweep
def cell_hash(cfg: ScenarioConfig) -> str:
    return hashlib.sha256(cfg.to_json().encode()).hexdigest()[:16]


def _run_cell(cfg_json: str, out: str) -> dict:
    cfg = parse_config(json.loads(cfg_json))
    try:
        report = write_run(run_scenario(cfg), Path(out))
        return {"status": "ok", "report": report}
    except Exception as exc:  # a failed cell must not stop the sweep
        log.exception("sweep cell failed")
        return {"status": f"error: {type(exc).__name__}: {exc}"}


def sweep_rows(cells: list, reports: list) -> list:
    """One CSV row per cell; fuel percentages against the 0%-penetration cell of the same group."""
    base = {}
    for cfg, rep in zip(cells, reports):
        sc = cfg.scenario
        if rep.get("status") == "ok" and sc.penetration == 0.0:
            base[(sc.demand, sc.planner, sc.seed)] = rep["report"]["metrics"]
    rows = []
    for cfg, rep in zip(cells, reports):
        sc = cfg.scenario
        row = {"demand": sc.demand, "penetration": sc.penetration, "planner": sc.planner,
               "seed": sc.seed, "cell": cell_hash(cfg), "status": rep.get("status", "ok")}
        if row["status"] == "ok":
            m = rep["report"]["metrics"]
            b = base.get((sc.demand, sc.planner, sc.seed))
            pct = compare_to_baseline(m, b) if b is not None else {}
            for cls in ("fleet", "cav", "hdv"):
                r = m[cls]
                row.update({f"{cls}_density": r["density"], f"{cls}_mean_speed": r["mean_speed"],
                            f"{cls}_flow": r["flow"], f"{cls}_travel_time": r["travel_time"],
                            f"{cls}_lc_per_veh": r["lane_changes_per_vehicle"],
                            f"{cls}_fc_per_100km": r["fc_per_100km"]})
                p = pct.get(cls)
                for key in ("fc_pct", "afc_pct", "delta_rfc", "delta_rfc_pct"):
                    row[f"{cls}_{key}"] = p[key] if p else None
        rows.append(row)
    return rows


def run_sweep(base: ScenarioConfig, demands, penetrations, planners, seeds: int, out: Path,
              jobs: int = 1) -> list:
    if not demands or not penetrations or not planners or seeds < 1:
        raise ConfigError("sweep: demands, penetrations and planners must be nonempty; seeds >= 1")
    out.mkdir(parents=True, exist_ok=True)
    cells = [base.with_overrides(demand=d, penetration=p, planner=m, seed=base.scenario.seed + k)
             for d, p, m, k in product(demands, penetrations, planners, range(seeds))]
    results = [None] * len(cells)
    todo = []
    for i, cfg in enumerate(cells):
        cdir = out / "cells" / cell_hash(cfg)
        done = cdir / "report.json"
        if done.exists():
            results[i] = {"status": "ok", "report": json.loads(done.read_text())}
        else:
            todo.append((i, cfg.to_json(), str(cdir)))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [(i, pool.submit(_run_cell, c, d)) for i, c, d in todo]
            for i, f in futs:
                results[i] = f.result()
    else:
        for i, c, d in todo:
            results[i] = _run_cell(c, d)
    rows = sweep_rows(cells, results)
    fields = list(dict.fromkeys(k for r in rows for k in r))
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})
    return rows


# ---------------------------------------------------------------- parser
def _scenario_overrides(args) -> dict:
    return {"seed": args.seed, "demand": args.demand, "penetration": args.penetration,
            "planner": args.planner, "duration": args.duration}


def _load(args) -> ScenarioConfig:
    path = args.config or getattr(args, "config_pos", None)
    cfg = load_config(path) if path else default_config()
    return cfg.with_overrides(**_scenario_overrides(args))


def _common(p, with_out=True):
    p.add_argument("config_pos", nargs="?", metavar="CONFIG", help="scenario JSON (or --config)")
    p.add_argument("--config", help="scenario JSON file")
    p.add_argument("--seed", type=int)
    p.add_argument("--demand", type=float, help="veh/h")
    p.add_argument("--penetration", type=float, help="CAV fraction in [0, 1]")
    p.add_argument("--planner", choices=PLANNERS)
    p.add_argument("--duration", type=float, help="s")
    if with_out:
        p.add_argument("--out", default="out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="highway-dmpc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario")
    _common(p)
    p.add_argument("--strict", action="store_true", help="exit 1 if any collision was recorded")
    p.add_argument("--trace-solver", action="store_true", help="write per-call SQP iteration logs")

    p = sub.add_parser("sweep", help="run a demand x penetration x planner grid")
    _common(p)
    p.add_argument("--demands", type=float, nargs="+", required=True)
    p.add_argument("--penetrations", type=float, nargs="+", required=True)
    p.add_argument("--planners", choices=PLANNERS, nargs="+", default=["2d"])
    p.add_argument("--seeds", type=int, default=1, help="seeds per cell (base seed + k)")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("report", help="recompute metrics from a run directory")
    p.add_argument("run_dir")
    p.add_argument("--config", help="config to use instead of the one echoed in report.json")
    p.add_argument("--out", help="write the recomputed report here (default: stdout)")

    p = sub.add_parser("validate", help="check a config file")
    p.add_argument("config_pos", metavar="CONFIG")
    p.add_argument("--print", action="store_true", help="print the config with defaults filled in")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate":
            cfg = load_config(args.config_pos)
            print(cfg.to_json() if args.print else "ok")
            return 0
        if args.command == "report":
            return _cmd_report(args)
        cfg = _load(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.command == "run":
        try:
            result = run_scenario(cfg, trace_solver=args.trace_solver)
            write_run(result, Path(args.out), trace=args.trace_solver)
        except Exception as exc:
            log.exception("run failed")
            print(f"run error: {type(exc).__name__}: {exc}", file=sys.stderr)
            return 3
        n_col = len(result.collisions)
        print(f"{Path(args.out) / 'report.json'}: {n_col} collision(s), "
              f"{result.solver['infeasible']}/{result.solver['calls']} infeasible solver calls")
        return 1 if args.strict and n_col else 0
    try:
        rows = run_sweep(cfg, args.demands, args.penetrations, args.planners, args.seeds,
                         Path(args.out), args.jobs)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{Path(args.out) / 'sweep.csv'}: {len(rows)} cells, {failed} failed")
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if args.config:
        cfg = load_config(args.config)
        old = {}
    else:
        old = json.loads((run_dir / "report.json").read_text())
        cfg = parse_config(old["config"])
    tr = read_trajectories(run_dir / "trajectories.csv")
    entries = read_entries(run_dir / "vehicles.csv")
    end = old.get("run", {}).get("end_time", cfg.scenario.duration)
    metrics = aggregate(tr, cfg.scenario.dt_s, cfg.road.length, end, cfg.metrics)
    text = dumps(_report(cfg, metrics, entries, old.get("run", {"end_time": end})))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
