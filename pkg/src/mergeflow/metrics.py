"""Evaluation metrics and table emission.

Throughput is released vehicles as a percentage of vehicles scheduled during
the episode, averaged over the pool. Waiting time pools every vehicle that
never exited (still on the map, queued, or never inserted): episode duration
minus its scheduled entry time. Travel-time quartiles use midpoint
interpolation between order statistics, pooled per vehicle group.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .runio import write_jsonl


def quartiles(values) -> tuple[float, float, float]:
    """(lower, median, upper) with midpoint interpolation, e.g.
    {10, 20, 30, 40} -> (15, 25, 35)."""
    arr = np.asarray(sorted(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("quartiles of an empty sample")
    lo, med, hi = np.percentile(arr, [25.0, 50.0, 75.0], method="midpoint")
    return float(lo), float(med), float(hi)


@dataclass
class EvalReport:
    map_name: str
    demand_level: float
    controller: str
    penetration: float
    episodes: int
    seeds: list[int]
    throughput: float | None  # percent, None when nothing was scheduled
    t_wait: float  # seconds, 0 when every vehicle exited
    groups: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        if self.throughput is not None and not (0.0 <= self.throughput <= 100.0 + 1e-9):
            raise ValueError(f"throughput {self.throughput} out of range")
        for g in self.groups.values():
            if not (g["tt_lower"] <= g["tt_median"] <= g["tt_upper"]):
                raise ValueError("quartiles out of order")

    def to_dict(self) -> dict:
        return {
            "map": self.map_name,
            "demand_level": self.demand_level,
            "controller": self.controller,
            "penetration": self.penetration,
            "episodes": self.episodes,
            "seeds": self.seeds,
            "throughput": self.throughput,
            "t_wait": self.t_wait,
            "groups": self.groups,
        }


def compute_metrics(episode_results: list[dict]) -> EvalReport:
    """Aggregate one controller's per-episode results at one demand level."""
    if not episode_results:
        raise ValueError("no episode results")
    first = episode_results[0]
    ratios = [100.0 * r["released"] / r["scheduled"]
              for r in episode_results if r["scheduled"] > 0]
    throughput = float(np.mean(ratios)) if ratios else None
    waits: list[float] = []
    for r in episode_results:
        waits.extend(r["wait_times"])
    t_wait = float(np.mean(waits)) if waits else 0.0

    groups: dict[str, dict] = {}
    names = sorted({g for r in episode_results for g in r["scheduled_by_group"]})
    for name in names:
        sched = sum(r["scheduled_by_group"].get(name, 0) for r in episode_results)
        rel = sum(r["released_by_group"].get(name, 0) for r in episode_results)
        travel: list[float] = []
        for r in episode_results:
            travel.extend(r["travel"].get(name, ()))
        entry = {
            "count": rel,
            "scheduled": sched,
            "throughput": 100.0 * rel / sched if sched else None,
        }
        if travel:
            lo, med, hi = quartiles(travel)
            entry.update({"tt_lower": lo, "tt_median": med, "tt_upper": hi})
        else:
            entry.update({"tt_lower": 0.0, "tt_median": 0.0, "tt_upper": 0.0})
        groups[name] = entry

    return EvalReport(
        map_name=first["map"],
        demand_level=first["demand_level"],
        controller=first["controller"],
        penetration=first["penetration"],
        episodes=len(episode_results),
        seeds=[r["seed"] for r in episode_results],
        throughput=throughput,
        t_wait=t_wait,
        groups=groups,
    )


def _fmt(x, nd=1) -> str:
    return "-" if x is None else f"{x:.{nd}f}"


def emit_tables(reports: list[EvalReport], out_dir) -> list[str]:
    """CSV per map for throughput and waiting time (controllers x demand
    levels) plus per-group plot data; re-emission is byte-identical."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    maps = sorted({r.map_name for r in reports})
    for map_name in maps:
        sub = [r for r in reports if r.map_name == map_name]
        levels = sorted({r.demand_level for r in sub})
        controllers = sorted({r.controller for r in sub})
        cells = {(r.controller, r.demand_level): r for r in sub}
        for metric, nd in (("throughput", 1), ("t_wait", 1)):
            path = os.path.join(out_dir, f"{metric}_{map_name}.csv")
            with open(path, "w") as fh:
                fh.write("controller," + ",".join(f"{lv:g}" for lv in levels) + "\n")
                for ctrl in controllers:
                    row = [ctrl]
                    for lv in levels:
                        rep = cells.get((ctrl, lv))
                        row.append(_fmt(getattr(rep, metric), nd) if rep else "-")
                    fh.write(",".join(row) + "\n")
            written.append(path)
        path = os.path.join(out_dir, f"groups_{map_name}.csv")
        with open(path, "w") as fh:
            fh.write("controller,demand_level,penetration,group,released,scheduled,"
                     "throughput,tt_lower,tt_median,tt_upper\n")
            for r in sorted(sub, key=lambda r: (r.controller, r.demand_level)):
                for name in sorted(r.groups):
                    g = r.groups[name]
                    fh.write(",".join([
                        r.controller, f"{r.demand_level:g}", f"{r.penetration:g}",
                        name, str(g["count"]), str(g["scheduled"]),
                        _fmt(g["throughput"], 3), _fmt(g["tt_lower"], 3),
                        _fmt(g["tt_median"], 3), _fmt(g["tt_upper"], 3),
                    ]) + "\n")
        written.append(path)
    return written


def save_reports(reports: list[EvalReport], path) -> None:
    write_jsonl(path, [r.to_dict() for r in reports])
