"""Top-level run loop, metrics and log files."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..bt.actions import build_tree
from ..bt.engine import BehaviorTree, TickStatus
from ..cloth import SimulationDiverged
from ..control import task_error
from .config import ScenarioConfig
from .world import World

CONVERGED, TIMEOUT, DIVERGED = "converged", "timeout", "diverged"
EXIT_CODES = {CONVERGED: 0, TIMEOUT: 2, DIVERGED: 3}


def fmt(x) -> str:
    return format(float(x), ".17g")


@dataclass
class RunResult:
    outcome: str
    metrics: dict
    world: Optional[World]
    tree: Optional[BehaviorTree]
    blackboard: object
    initial_s: np.ndarray
    diverged_at: Optional[str] = None

    @property
    def episodes(self):
        return self.blackboard["episodes"]


def run_scenario(cfg: ScenarioConfig, seed: Optional[int] = None, max_time: Optional[float] = None,
                 out_dir=None) -> RunResult:
    """Build the world, tick the tree once per control period, and collect metrics.

    Stops on overall SUCCESS or when ``max_time`` (default ``cfg.max_sim_time``)
    of simulated time has elapsed.
    """
    seed = cfg.seed if seed is None else seed
    max_time = cfg.max_sim_time if max_time is None else max_time
    try:
        world = World(cfg, seed)
    except SimulationDiverged as exc:
        return _diverged_during_setup(cfg, seed, str(exc), out_dir)
    tree, bb = build_tree(world, cfg, seed)
    initial_s = world.measure().values.copy()
    max_ticks = int(math.floor(max_time / world.period + 1e-9))

    outcome = TIMEOUT
    diverged_at = None
    try:
        while True:
            status = tree.tick(bb)
            if status is TickStatus.SUCCESS:
                outcome = CONVERGED
                break
            if status is TickStatus.FAILURE:
                break
            if world.tick_index >= max_ticks:
                break
            world.advance()
    except SimulationDiverged as exc:
        outcome = DIVERGED
        diverged_at = str(exc)

    result = RunResult(outcome, {}, world, tree, bb, initial_s, diverged_at)
    result.metrics = compute_metrics(result, cfg, seed)
    if out_dir is not None:
        write_logs(result, Path(out_dir))
    return result


def _diverged_during_setup(cfg: ScenarioConfig, seed: int, message: str, out_dir) -> RunResult:
    """The deformation recipe blew up before the first tick; only metrics.json is written."""
    metrics = {
        "scenario": cfg.name, "seed": seed, "outcome": DIVERGED, "diverged_at": f"setup: {message}",
        "sim_time": 0.0, "ticks": 0, "control_period": cfg.cloth.control_period,
        "initial_error": None, "final_error": None, "final_feature_errors": [], "convergence_time": None,
        "episodes": [], "base_path_length": 0.0, "standing_positions": [], "n_standing_positions": 0,
        "grasp_checks": 0, "grasp_attempts_per_standing_position": [], "walk_cycles": 0,
        "footprint_violations": 0, "bt_status": "RUNNING",
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.json", "w") as f:
            json.dump(metrics, f, indent=2, sort_keys=True)
            f.write("\n")
    return RunResult(DIVERGED, metrics, None, None, None, np.zeros(0), metrics["diverged_at"])


def _episode_metrics(ep, period: float) -> dict:
    recs = ep.controller.records
    conv = ep.controller.convergence_time if ep.outcome is not None and ep.outcome.value == "converged" else None
    return {
        "features": list(ep.feature_ids),
        "grasp_feature": ep.grasp_feature,
        "stand_index": ep.stand_index,
        "start_time": ep.start_time,
        "end_time": ep.end_time,
        "outcome": ep.outcome.value if ep.outcome is not None else "running",
        "ticks": len(recs),
        "initial_task_error": recs[0].task_error if recs else None,
        "final_task_error": recs[-1].task_error if recs else None,
        "convergence_time": conv,
        "convergence_ticks": int(round((conv - ep.start_time) / period)) if conv is not None else None,
    }


def compute_metrics(result: RunResult, cfg: ScenarioConfig, seed: int) -> dict:
    world, bb = result.world, result.blackboard
    targets = world.targets
    episodes = bb["episodes"]
    all_records = [r for ep in episodes for r in ep.controller.records]
    last_s = all_records[-1].s if all_records else world.measure().values
    final_meas = world.measure()
    checks = bb["grasp_checks"]
    stands = bb["standing_positions"]
    attempts = [0] * len(stands)
    for c in checks:
        attempts[c.stand_index] += 1
    eps = [_episode_metrics(ep, world.period) for ep in episodes]
    conv_times = [e["convergence_time"] for e in eps if e["convergence_time"] is not None]
    return {
        "scenario": cfg.name,
        "seed": seed,
        "outcome": result.outcome,
        "diverged_at": result.diverged_at,
        "sim_time": world.time,
        "ticks": world.tick_index,
        "control_period": world.period,
        "initial_error": task_error(result.initial_s, targets),
        "final_error": task_error(last_s, targets),
        "final_feature_errors": [float(e) for e in world.feature_errors(final_meas)],
        "convergence_time": conv_times[-1] if conv_times else None,
        "episodes": eps,
        "base_path_length": world.path_length,
        "standing_positions": [list(p) for p in stands],
        "n_standing_positions": len(stands),
        "grasp_checks": len(checks),
        "grasp_attempts_per_standing_position": attempts,
        "walk_cycles": bb["walk_cycle"],
        "footprint_violations": len(world.footprint_violations()),
        "bt_status": "SUCCESS" if result.outcome == CONVERGED else "RUNNING",
    }


def write_logs(result: RunResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    world, bb = result.world, result.blackboard
    k2 = len(world.targets)

    with open(out / "controller.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["episode", "step_index", "sim_time", "task_error", "dx_norm", "update_accepted"]
                   + [f"s{i}" for i in range(k2)] + ["y", "y_target", "u_x", "u_y", "u_z"])
        for e, ep in enumerate(bb["episodes"]):
            for r in ep.controller.records:
                w.writerow([e, r.step_index, fmt(r.sim_time), fmt(r.task_error), fmt(r.dx_norm),
                            int(r.update_accepted)] + [fmt(v) for v in r.s]
                           + [" ".join(fmt(v) for v in r.y), " ".join(fmt(v) for v in r.target)]
                           + [fmt(v) for v in list(r.u) + [0.0] * (3 - len(r.u))])

    with open(out / "bt_trace.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sim_time", "node", "status"])
        for r in result.tree.trace:
            w.writerow([fmt(r.sim_time), r.node, r.status.value])

    with open(out / "base_path.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sim_time", "x", "y", "yaw"])
        for b in world.base_log:
            w.writerow([fmt(b.sim_time), fmt(b.x), fmt(b.y), fmt(b.yaw)])

    with open(out / "grasp_checks.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sim_time", "walk_cycle", "stand_index", "feature_id", "height_offset", "grasped",
                    "displacement", "success"])
        for c in bb["grasp_checks"]:
            w.writerow([fmt(c.sim_time), c.walk_cycle, c.stand_index, c.feature_id, fmt(c.height_offset),
                        int(c.grasped), fmt(c.displacement), int(c.success)])

    with open(out / "metrics.json", "w") as f:
        json.dump(result.metrics, f, indent=2, sort_keys=True)
        f.write("\n")


# --- comparison ----------------------------------------------------------------------------------


class CompareError(ValueError):
    pass


def compare_runs(metrics: list[dict]) -> dict:
    """Per-trial table plus mean/min/max of convergence time and final error over non-diverged runs."""
    if not metrics:
        raise CompareError("nothing to compare")
    names = {m["scenario"] for m in metrics}
    if len(names) != 1:
        raise CompareError(f"runs come from different scenarios: {sorted(names)}")
    trials = [{"seed": m["seed"], "outcome": m["outcome"], "converged": m["outcome"] == CONVERGED,
               "convergence_time": m.get("convergence_time"),
               "final_error": None if m["outcome"] == DIVERGED else m["final_error"]} for m in metrics]
    summary = {}
    for key in ("convergence_time", "final_error"):
        vals = [t[key] for t in trials if t[key] is not None and t["outcome"] != DIVERGED]
        summary[key] = ({"mean": float(np.mean(vals)), "min": float(np.min(vals)), "max": float(np.max(vals)),
                         "n": len(vals)} if vals else None)
    return {"scenario": names.pop(), "trials": trials, "summary": summary,
            "all_converged": all(t["converged"] for t in trials),
            "diverged_seeds": [t["seed"] for t in trials if t["outcome"] == DIVERGED]}


def format_report(report: dict) -> str:
    lines = [f"scenario: {report['scenario']}", "seed  outcome    conv_time[s]  final_error[m]"]
    for t in report["trials"]:
        ct = "-" if t["convergence_time"] is None else f"{t['convergence_time']:.3f}"
        fe = "-" if t["final_error"] is None else f"{t['final_error']:.4f}"
        lines.append(f"{t['seed']:<5} {t['outcome']:<10} {ct:>12}  {fe:>14}")
    for key, s in report["summary"].items():
        if s is None:
            lines.append(f"{key}: no data")
        else:
            lines.append(f"{key}: mean {s['mean']:.4f}  min {s['min']:.4f}  max {s['max']:.4f}  (n={s['n']})")
    if report["diverged_seeds"]:
        lines.append(f"diverged (excluded from summary): {report['diverged_seeds']}")
    return "\n".join(lines)
