"""Stochastic traffic episode generation.

An episode is a deterministic description of 1200 s of demand: per-route
piecewise-constant arrival rates resampled every period, per-junction turn
rates sampled once, an AV penetration rate, and the seed that drives the
in-simulation arrival process.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .profiles import PROFILE_SETS
from .roadnet import RoadNetwork, routes_for

SCHEMA_VERSION = 1


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class GenerationConfig:
    demand_level: float  # nominal total vehicles/hour across all routes
    demand_range: tuple[float, float] = (0.6, 1.4)  # per-period multiplier range
    resample_period: float = 120.0  # s
    penetration: float = 0.0
    profile_set: str = "normal"
    duration: float = 1200.0
    # straight / left / right concentration for junction turn-rate sampling
    turn_alpha: tuple[float, float, float] = (5.0, 1.5, 1.5)
    # absolute per-route rate range (vehicles/hour); overrides demand_level
    route_demand_range: tuple[float, float] | None = None

    def __post_init__(self):
        if not (0.0 <= self.penetration <= 1.0):
            raise GenerationError("penetration must be in [0, 1]")
        if self.duration <= 0:
            raise GenerationError("duration must be positive")
        if self.profile_set not in PROFILE_SETS:
            raise GenerationError(f"unknown profile set {self.profile_set!r}")
        lo, hi = self.demand_range
        if lo < 0 or hi < lo:
            raise GenerationError("bad demand_range")


@dataclass(frozen=True)
class EpisodeSpec:
    episode_id: str
    map_name: str
    duration: float
    seed: int
    demand_level: float
    penetration: float
    profile_set: str
    # (route_id, ((t_start, rate_vph), ...)) in route order
    schedules: tuple[tuple[str, tuple[tuple[float, float], ...]], ...]
    # (approach_edge, movement, rate) per junction approach
    turn_rates: tuple[tuple[str, str, float], ...]

    def __post_init__(self):
        if self.duration <= 0:
            raise GenerationError("duration must be positive")
        if not (0.0 <= self.penetration <= 1.0):
            raise GenerationError("penetration must be in [0, 1]")
        for _, sched in self.schedules:
            if any(rate < 0 for _, rate in sched):
                raise GenerationError("negative demand")

    def rate_at(self, route_id: str, t: float) -> float:
        for rid, sched in self.schedules:
            if rid == route_id:
                rate = 0.0
                for t0, r in sched:
                    if t >= t0:
                        rate = r
                    else:
                        break
                return rate
        raise KeyError(route_id)

    def to_json(self) -> str:
        doc = {"schema_version": SCHEMA_VERSION, **asdict(self)}
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "EpisodeSpec":
        doc = json.loads(text)
        if doc.pop("schema_version", None) != SCHEMA_VERSION:
            raise GenerationError("unsupported episode schema version")
        doc["schedules"] = tuple(
            (rid, tuple((float(t), float(r)) for t, r in sched))
            for rid, sched in doc["schedules"]
        )
        doc["turn_rates"] = tuple((e, m, float(r)) for e, m, r in doc["turn_rates"])
        return EpisodeSpec(**doc)


def empty_episode(network: RoadNetwork, duration: float = 60.0, seed: int = 0,
                  profile_set: str = "normal", penetration: float = 0.0) -> EpisodeSpec:
    """Zero-demand episode for synthetic scenes driven by injected vehicles."""
    schedules = tuple((r.route_id, ((0.0, 0.0),)) for r in routes_for(network))
    return EpisodeSpec(
        episode_id=f"{network.name}-empty-{seed}",
        map_name=network.name,
        duration=duration,
        seed=seed,
        demand_level=0.0,
        penetration=penetration,
        profile_set=profile_set,
        schedules=schedules,
        turn_rates=(),
    )


def _approach_groups(network: RoadNetwork):
    """Routes grouped by their first edge, in deterministic route order."""
    groups: dict[str, list] = {}
    for route in routes_for(network):
        groups.setdefault(route.edges[0], []).append(route)
    return groups


def generate_episode(network: RoadNetwork, config: GenerationConfig, seed: int) -> EpisodeSpec:
    """Sample one episode: per-period total flow and route split, per-episode
    turn rates. Deterministic given (network, config, seed)."""
    routes = routes_for(network)
    if not routes:
        raise GenerationError("network has no routes")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 0xE9))))
    n_periods = int(np.ceil(config.duration / config.resample_period))
    period_starts = [i * config.resample_period for i in range(n_periods)]

    groups = _approach_groups(network)
    turn_rates: list[tuple[str, str, float]] = []
    move_rate: dict[str, float] = {}
    for approach in sorted(groups):
        members = groups[approach]
        if len(members) == 1 or members[0].turns.count("none") == len(members[0].turns):
            for r in members:
                move_rate[r.route_id] = 1.0 / len(members)
            continue
        # junction approach: sample movement split once per episode
        alpha = []
        for r in members:
            move = next((t for t in r.turns if t != "none"), "straight")
            idx = {"straight": 0, "left": 1, "right": 2}[move]
            alpha.append(config.turn_alpha[idx])
        rates = rng.dirichlet(np.asarray(alpha, dtype=float))
        for r, rate in zip(members, rates):
            move = next((t for t in r.turns if t != "none"), "straight")
            move_rate[r.route_id] = float(rate)
            turn_rates.append((approach, move, float(rate)))

    # approach weight: entry lane count
    weights = {a: float(len(network.edges[a])) for a in groups}
    w_total = sum(weights[a] * 1.0 for a in groups)

    per_route: dict[str, list[tuple[float, float]]] = {r.route_id: [] for r in routes}
    lo, hi = config.demand_range
    for t0 in period_starts:
        if config.route_demand_range is not None:
            alo, ahi = config.route_demand_range
            for r in routes:
                per_route[r.route_id].append((t0, float(rng.uniform(alo, ahi))))
            continue
        total = config.demand_level * float(rng.uniform(lo, hi))
        # per-period approach split around the lane-count weights
        conc = np.asarray([4.0 * weights[a] for a in sorted(groups)], dtype=float)
        shares = rng.dirichlet(conc)
        for a, share in zip(sorted(groups), shares):
            for r in groups[a]:
                rate = total * float(share) * move_rate[r.route_id]
                per_route[r.route_id].append((t0, rate))

    schedules = tuple(
        (r.route_id, tuple(per_route[r.route_id])) for r in routes
    )
    episode_id = f"{network.name}-{config.demand_level:g}-{seed}"
    return EpisodeSpec(
        episode_id=episode_id,
        map_name=network.name,
        duration=config.duration,
        seed=seed,
        demand_level=config.demand_level,
        penetration=config.penetration,
        profile_set=config.profile_set,
        schedules=schedules,
        turn_rates=tuple(turn_rates),
    )
