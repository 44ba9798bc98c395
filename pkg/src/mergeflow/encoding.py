"""State, observation, and reward encodings for the learning stack.

The scenario state is a fixed-capacity slot table: a boolean existence mask
over C slots plus a C x 8 feature matrix. Controlled vehicles are described
by an activated-AV mask over N slots, a per-AV observation mask over state
slots (sensing disk), and a per-AV action mask. Slot assignments are stable
for as long as a vehicle stays on the map.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .engine import N_ACTIONS, Simulation, Vehicle
from .roadnet import RoadNetwork

D_V = 8  # vehicle feature width: x, y, sin, cos, v, signal, category, time
D_A = N_ACTIONS
TRAVEL_NORM = 300.0  # s; empirical travel-time normalizer
HV_TIME_SENTINEL = -1.0
ENCODING_MAGIC = b"MFEN"
ENCODING_VERSION = 1


class CapacityExceeded(RuntimeError):
    """More vehicles on the map than the configured slot capacity."""


@dataclass(frozen=True)
class RewardParams:
    eta_a: float = 1.0  # weight per normalized travel-time unit released
    eta_b: float = -0.05  # constant per-step bias
    travel_norm: float = TRAVEL_NORM

    def __post_init__(self):
        if self.travel_norm <= 0:
            raise ValueError("travel_norm must be positive")


def compute_reward(travel_times, params: RewardParams) -> float:
    """r_t = eta_b + eta_a * sum_i tau_i / norm over this step's releases."""
    total = 0.0
    for tau in travel_times:
        if tau < 0:
            raise ValueError("travel times must be non-negative")
        total += tau / params.travel_norm
    return params.eta_b + params.eta_a * total


@dataclass
class StateEncoding:
    mask: np.ndarray  # (C,) bool
    features: np.ndarray  # (C, D_V) float64
    slot_vehicle: np.ndarray  # (C,) int64 vehicle id or -1

    @property
    def capacity(self) -> int:
        return self.mask.shape[0]


@dataclass
class ObservationEncoding:
    av_mask: np.ndarray  # (N,) bool
    obs_mask: np.ndarray  # (N, C) bool
    action_mask: np.ndarray  # (N, D_A) bool
    av_slots: np.ndarray  # (N,) int64 state-slot index or -1

    @property
    def max_activated(self) -> int:
        return self.av_mask.shape[0]


def encodings_to_bytes(state: StateEncoding, obs: ObservationEncoding) -> bytes:
    """Flat little-endian layout: header (magic, version, C, N, d_v, d_a),
    then row-major M_s, F_s (f32), slot ids (i64), M_AV, M_obs, M_a, AV slot
    indices (i64)."""
    c = state.capacity
    n = obs.max_activated
    header = ENCODING_MAGIC + struct.pack("<HIIHH", ENCODING_VERSION, c, n, D_V, D_A)
    payload = b"".join((
        np.ascontiguousarray(state.mask, dtype=np.uint8).tobytes(),
        np.ascontiguousarray(state.features, dtype="<f4").tobytes(),
        np.ascontiguousarray(state.slot_vehicle, dtype="<i8").tobytes(),
        np.ascontiguousarray(obs.av_mask, dtype=np.uint8).tobytes(),
        np.ascontiguousarray(obs.obs_mask, dtype=np.uint8).tobytes(),
        np.ascontiguousarray(obs.action_mask, dtype=np.uint8).tobytes(),
        np.ascontiguousarray(obs.av_slots, dtype="<i8").tobytes(),
    ))
    return header + payload


def encodings_from_bytes(buf: bytes) -> tuple[StateEncoding, ObservationEncoding]:
    if buf[:4] != ENCODING_MAGIC:
        raise ValueError("bad encoding magic")
    version, c, n, d_v, d_a = struct.unpack_from("<HIIHH", buf, 4)
    if version != ENCODING_VERSION or d_v != D_V or d_a != D_A:
        raise ValueError("unsupported encoding layout")
    off = 4 + struct.calcsize("<HIIHH")

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    mask = take(c, np.uint8).astype(bool)
    features = take(c * D_V, "<f4").astype(np.float64).reshape(c, D_V)
    slot_vehicle = take(c, "<i8").astype(np.int64)
    av_mask = take(n, np.uint8).astype(bool)
    obs_mask = take(n * c, np.uint8).astype(bool).reshape(n, c)
    action_mask = take(n * d_a, np.uint8).astype(bool).reshape(n, d_a)
    av_slots = take(n, "<i8").astype(np.int64)
    return (StateEncoding(mask, features, slot_vehicle),
            ObservationEncoding(av_mask, obs_mask, action_mask, av_slots))


def select_activated(sim: Simulation, network: RoadNetwork, limit: int,
                     lane_cap: int | None = None) -> list[Vehicle]:
    """AVs inside the bottleneck zone, nearest the bottleneck point first,
    truncated at `limit`. All other AVs follow default driving rules.

    With `lane_cap`, at most that many AVs per lane are taken, so a standing
    queue on one lane cannot monopolize the controlled set."""
    x0, y0, x1, y1 = network.bottleneck_zone
    px, py = network.bottleneck_point
    ranked = []
    for veh in sim.vehicles.values():
        if not veh.is_av:
            continue
        x, y, _ = network.lane(veh.lane).pose_at(veh.pos)
        if x0 <= x <= x1 and y0 <= y <= y1:
            ranked.append((math.hypot(x - px, y - py), veh.vid, veh))
    ranked.sort()
    if lane_cap is None:
        return [veh for _, _, veh in ranked[:limit]]
    chosen: list[Vehicle] = []
    per_lane: dict[int, int] = {}
    for _, _, veh in ranked:
        if len(chosen) == limit:
            break
        if per_lane.get(veh.lane, 0) >= lane_cap:
            continue
        per_lane[veh.lane] = per_lane.get(veh.lane, 0) + 1
        chosen.append(veh)
    return chosen


class StateEncoder:
    """Owns the slot tables of one simulation instance."""

    def __init__(self, network: RoadNetwork, capacity: int | None = None,
                 max_activated: int = 16, sensing_range: float = 100.0,
                 activation_lane_cap: int | None = None):
        self.net = network
        self.capacity = capacity if capacity is not None else network.capacity_hint
        self.max_activated = max_activated
        self.sensing_range = sensing_range
        self.activation_lane_cap = activation_lane_cap
        self._slot_of: dict[int, int] = {}  # vid -> state slot
        self._free = list(range(self.capacity - 1, -1, -1))  # lowest slot on top
        self._av_slot_of: dict[int, int] = {}  # vid -> AV slot
        self._av_free = list(range(max_activated - 1, -1, -1))

    def sync_slots(self, sim: Simulation) -> None:
        """Free slots of exited vehicles, give entrants the lowest free slot."""
        live = sim.vehicles
        for vid in [v for v in self._slot_of if v not in live]:
            self._free.append(self._slot_of.pop(vid))
        self._free.sort(reverse=True)
        new = sorted(v for v in live if v not in self._slot_of)
        if len(new) > len(self._free):
            raise CapacityExceeded(
                f"{len(live)} vehicles exceed capacity {self.capacity}")
        for vid in new:
            self._slot_of[vid] = self._free.pop()

    def update_activation(self, sim: Simulation) -> None:
        """Recompute the activated set; newly selected AVs take the lowest
        free AV slot, dropped ones revert to default control."""
        selected = {v.vid for v in
                    select_activated(sim, self.net, self.max_activated,
                                     self.activation_lane_cap)}
        for vid in [v for v in self._av_slot_of if v not in selected]:
            self._av_free.append(self._av_slot_of.pop(vid))
            veh = sim.vehicles.get(vid)
            if veh is not None:
                sim.clear_control(veh)
        self._av_free.sort(reverse=True)
        for vid in sorted(selected):
            if vid not in self._av_slot_of:
                self._av_slot_of[vid] = self._av_free.pop()
            sim.vehicles[vid].activated = True

    def encode_state(self, sim: Simulation) -> StateEncoding:
        c = self.capacity
        mask = np.zeros(c, dtype=bool)
        features = np.zeros((c, D_V), dtype=np.float64)
        slot_vehicle = np.full(c, -1, dtype=np.int64)
        width, height = self.net.map_extent
        now = sim.clock.now
        for vid, slot in self._slot_of.items():
            veh = sim.vehicles[vid]
            lane = self.net.lane(veh.lane)
            x, y, heading = lane.pose_at(veh.pos)
            if veh.is_av:
                cat = 1.0 if veh.activated else 0.0
                t_feat = (now - veh.entry_time) / TRAVEL_NORM
            else:
                cat = -1.0
                t_feat = HV_TIME_SENTINEL
            mask[slot] = True
            slot_vehicle[slot] = vid
            features[slot] = (
                x / width, y / height, math.sin(heading), math.cos(heading),
                veh.speed / lane.speed_limit, float(veh.signal), cat, t_feat,
            )
        return StateEncoding(mask, features, slot_vehicle)

    def encode_observation(self, sim: Simulation,
                           state: StateEncoding) -> ObservationEncoding:
        n, c = self.max_activated, self.capacity
        av_mask = np.zeros(n, dtype=bool)
        obs_mask = np.zeros((n, c), dtype=bool)
        action_mask = np.zeros((n, D_A), dtype=bool)
        av_slots = np.full(n, -1, dtype=np.int64)
        if not self._av_slot_of:
            return ObservationEncoding(av_mask, obs_mask, action_mask, av_slots)
        # actual metric positions of every occupied slot
        pos = np.zeros((c, 2))
        for vid, slot in self._slot_of.items():
            veh = sim.vehicles[vid]
            x, y, _ = self.net.lane(veh.lane).pose_at(veh.pos)
            pos[slot] = (x, y)
        occupied = state.mask
        for vid, av_slot in self._av_slot_of.items():
            veh = sim.vehicles[vid]
            slot = self._slot_of[vid]
            av_mask[av_slot] = True
            av_slots[av_slot] = slot
            d = np.hypot(pos[:, 0] - pos[slot, 0], pos[:, 1] - pos[slot, 1])
            obs_mask[av_slot] = occupied & (d <= self.sensing_range)
            obs_mask[av_slot, slot] = True
            lane = self.net.lane(veh.lane)
            action_mask[av_slot, 0] = lane.left is not None
            action_mask[av_slot, 1] = lane.right is not None
            action_mask[av_slot, 2:] = True
        return ObservationEncoding(av_mask, obs_mask, action_mask, av_slots)

    def encode(self, sim: Simulation) -> tuple[StateEncoding, ObservationEncoding]:
        """Decision-step entry point: refresh slots and activation, then
        build both encodings."""
        self.sync_slots(sim)
        self.update_activation(sim)
        state = self.encode_state(sim)
        return state, self.encode_observation(sim, state)

    def activated_vehicles(self, sim: Simulation) -> list[tuple[int, Vehicle]]:
        """(av_slot, vehicle) pairs for the currently activated set."""
        return sorted(
            (slot, sim.vehicles[vid]) for vid, slot in self._av_slot_of.items()
        )
