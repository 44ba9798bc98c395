"""Baseline controllers and the paired evaluation harness.

All controllers consume identical episode pools. NC runs the bare driver
models; ALINEA meters the lane-drop corridor with occupancy feedback; policy
evaluation replays a trained checkpoint greedily at the decision interval.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .engine import VEHICLE_LENGTH, Simulation
from .env import BottleneckEnv, EnvConfig
from .episodes import EpisodeSpec
from .nn import ParameterStore
from .policy import PolicyConfig, act
from .roadnet import RoadNetwork


class EvalConfigError(ValueError):
    pass


def run_nc(network: RoadNetwork, spec: EpisodeSpec, drain: bool = True,
           log_trajectories: bool = False) -> Simulation:
    """No controller: every vehicle follows its driver profile."""
    sim = Simulation(network, spec, log_trajectories=log_trajectories)
    sim.run(drain=drain)
    return sim


@dataclass
class AlineaConfig:
    gain: float = 70.0  # vehicles/hour per occupancy percentage point
    target_occupancy: float = 18.0  # percent of the final segment occupied
    period: float = 30.0  # s between rate updates
    min_rate: float = 200.0
    max_rate: float = 4000.0
    initial_rate: float = 1800.0
    meter_offset: float = 60.0  # meter line this far before the first funnel


@dataclass
class AlineaState:
    rate: float
    tokens: float = 0.0
    occupancy_accum: float = 0.0
    occupancy_samples: int = 0

    def clamp(self, cfg: AlineaConfig) -> None:
        self.rate = min(max(self.rate, cfg.min_rate), cfg.max_rate)


def alinea_rate_update(rate: float, occupancy: float, cfg: AlineaConfig) -> float:
    """One feedback step: rate + K_R * (target - occupancy), clamped."""
    new = rate + cfg.gain * (cfg.target_occupancy - occupancy)
    return min(max(new, cfg.min_rate), cfg.max_rate)


def run_alinea(network: RoadNetwork, spec: EpisodeSpec,
               cfg: AlineaConfig | None = None, drain: bool = True) -> Simulation:
    """Occupancy-feedback ramp metering on the lane-drop corridor: vehicles
    queue at a virtual meter upstream of the first funnel and are released
    at the controlled rate, FIFO by arrival."""
    if network.name != "lanedrop":
        raise EvalConfigError("the metering baseline only supports the lanedrop map")
    cfg = cfg or AlineaConfig()
    sim = Simulation(network, spec)
    entry_lanes = list(network.edges["e1"])
    final_lane = network.edges["e3"][0]
    final_len = network.lane(final_lane).length
    meter_pos = network.lane(entry_lanes[0]).length - cfg.meter_offset
    state = AlineaState(rate=cfg.initial_rate)
    state.clamp(cfg)
    released_ids: set[int] = set()
    waiting: deque[int] = deque()
    waiting_set: set[int] = set()
    dt = sim.clock.sim_step
    next_update = cfg.period

    def control_substep() -> None:
        # measure occupancy of the final segment (percent of length covered)
        occ_len = sum(VEHICLE_LENGTH for v in sim.lane_occ[final_lane])
        state.occupancy_accum += 100.0 * occ_len / final_len
        state.occupancy_samples += 1
        nonlocal next_update
        if sim.clock.now >= next_update - 1e-9:
            occ = (state.occupancy_accum / state.occupancy_samples
                   if state.occupancy_samples else 0.0)
            state.rate = alinea_rate_update(state.rate, occ, cfg)
            state.occupancy_accum = 0.0
            state.occupancy_samples = 0
            next_update += cfg.period
        # register vehicles approaching the meter, FIFO by (time, id)
        for lane_id in entry_lanes:
            for veh in sim.lane_occ[lane_id]:
                if (veh.vid not in released_ids and veh.vid not in waiting_set
                        and veh.pos < meter_pos):
                    veh.hold_pos = meter_pos
                    waiting.append(veh.vid)
                    waiting_set.add(veh.vid)
        state.tokens = min(state.tokens + state.rate * dt / 3600.0, 2.0)
        while state.tokens >= 1.0 and waiting:
            vid = waiting.popleft()
            waiting_set.discard(vid)
            veh = sim.vehicles.get(vid)
            if veh is None:
                continue
            veh.hold_pos = None
            released_ids.add(vid)
            state.tokens -= 1.0

    while sim.clock.now < spec.duration - 1e-9:
        control_substep()
        sim.substep()
    if drain:
        for veh in list(sim.vehicles.values()):
            veh.hold_pos = None
        sim.run(drain=True)
    return sim


def run_policy(network: RoadNetwork, spec: EpisodeSpec, store: ParameterStore,
               policy_config: PolicyConfig, env_config: EnvConfig,
               greedy: bool = True, drain: bool = True,
               action_log: list | None = None,
               rng: np.random.Generator | None = None) -> Simulation:
    """Evaluate a trained policy at the decision interval."""
    env = BottleneckEnv(network, env_config)
    state, obs = env.reset(spec)
    mode = "greedy" if greedy else "sample"
    done = False
    while not done:
        actions, _, _, _ = act(store, state, obs, policy_config, rng, mode)
        if action_log is not None:
            action_log.append({"t": env.sim.clock.now, "actions": actions.tolist()})
        (state, obs), _, done, _ = env.step(actions)
    if drain:
        for veh in list(env.sim.vehicles.values()):
            env.sim.clear_control(veh)
        env.sim.run(drain=True)
    return env.sim


def replay_actions(network: RoadNetwork, spec: EpisodeSpec,
                   action_log: list[dict]) -> Simulation:
    """Re-run an episode applying a recorded joint-action stream; used to
    reproduce trajectories without the policy."""
    env = BottleneckEnv(network, EnvConfig())
    env.reset(spec)
    env.sim.trajectory_log = []
    by_t = {round(rec["t"], 3): np.asarray(rec["actions"], dtype=np.int64)
            for rec in action_log}
    done = False
    while not done:
        actions = by_t.get(round(env.sim.clock.now, 3))
        _, _, done, _ = env.step(actions)
    return env.sim


def episode_result(sim: Simulation, spec: EpisodeSpec, controller: str,
                   network: RoadNetwork) -> dict:
    """Per-episode evaluation record with per-group accounting."""
    origin_of = {r.route_id: r.origin for r in network.routes}

    def group(route_id: str, category: str) -> str:
        return f"{origin_of[route_id]}-{category}"

    scheduled_by_group: dict[str, int] = {}
    released_by_group: dict[str, int] = {}
    travel: dict[str, list[float]] = {}
    for rec in sim.release_log:
        g = group(rec["route"], rec["category"])
        released_by_group[g] = released_by_group.get(g, 0) + 1
        scheduled_by_group[g] = scheduled_by_group.get(g, 0) + 1
        travel.setdefault(g, []).append(rec["travel_time"])
    for veh in sim.vehicles.values():
        g = group(veh.route.route_id, veh.category)
        scheduled_by_group[g] = scheduled_by_group.get(g, 0) + 1
    for q in sim.queues.values():
        for veh in q:
            g = group(veh.route.route_id, veh.category)
            scheduled_by_group[g] = scheduled_by_group.get(g, 0) + 1
    return {
        "episode_id": spec.episode_id,
        "seed": spec.seed,
        "map": spec.map_name,
        "demand_level": spec.demand_level,
        "penetration": spec.penetration,
        "controller": controller,
        "scheduled": sim.spawned_total,
        "released": sim.released_total,
        "wait_times": sim.unreleased_wait_times(),
        "scheduled_by_group": scheduled_by_group,
        "released_by_group": released_by_group,
        "travel": travel,
    }
