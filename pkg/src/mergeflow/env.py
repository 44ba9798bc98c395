"""Decision-step environment: simulator + encodings + reward."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoding import ObservationEncoding, RewardParams, StateEncoder, StateEncoding, compute_reward
from .engine import ContractViolation, SimClock, Simulation
from .episodes import EpisodeSpec
from .roadnet import RoadNetwork


@dataclass(frozen=True)
class EnvConfig:
    sensing_range: float = 100.0
    max_activated: int = 16
    capacity: int | None = None  # None: network jam-density hint
    activation_lane_cap: int | None = None  # max activated AVs per lane
    reward: RewardParams = field(default_factory=RewardParams)


class BottleneckEnv:
    """Steps one episode at the decision interval, exposing (M_s, F_s,
    M_AV, M_obs, M_a) and the throughput-equity reward."""

    def __init__(self, network: RoadNetwork, config: EnvConfig | None = None):
        self.net = network
        self.config = config or EnvConfig()
        self.sim: Simulation | None = None
        self.encoder: StateEncoder | None = None
        self._obs: ObservationEncoding | None = None

    def reset(self, spec: EpisodeSpec) -> tuple[StateEncoding, ObservationEncoding]:
        self.sim = Simulation(self.net, spec, SimClock())
        self.encoder = StateEncoder(
            self.net,
            capacity=self.config.capacity,
            max_activated=self.config.max_activated,
            sensing_range=self.config.sensing_range,
            activation_lane_cap=self.config.activation_lane_cap,
        )
        state, obs = self.encoder.encode(self.sim)
        self._obs = obs
        return state, obs

    @property
    def n_activated(self) -> int:
        return int(self._obs.av_mask.sum())

    def step(self, actions: np.ndarray | None):
        """Apply one discrete action per activated AV slot, advance one
        decision interval, and return (state, obs), reward, done, info."""
        sim, obs = self.sim, self._obs
        if actions is not None:
            for av_slot, veh in self.encoder.activated_vehicles(sim):
                action = int(actions[av_slot])
                if not obs.action_mask[av_slot, action]:
                    raise ContractViolation(
                        f"action {action} masked off for AV slot {av_slot}")
                sim.apply_action(veh, action)
        released: list[float] = []
        for _ in range(sim.clock.substeps_per_decision):
            sim.substep()
            released.extend(sim.step_releases)
        reward = compute_reward(released, self.config.reward)
        done = sim.clock.now >= self.sim.spec.duration - 1e-9
        state, obs = self.encoder.encode(sim)
        self._obs = obs
        info = {
            "t": sim.clock.now,
            "released": len(released),
            "released_travel_times": released,
            "on_map": sim.on_map,
            "queued": sim.queue_size,
        }
        return (state, obs), reward, done, info
