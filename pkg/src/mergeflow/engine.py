"""Discrete-time microscopic traffic simulation.

Car following is the Intelligent Driver Model; lane changing is gap
acceptance scaled by driver assertiveness with a speed-gain incentive for
discretionary moves. Crossing into junction connectors and merge funnels is
gated by conflict zones (priority or zipper arbitration). The physics layer
hard-clamps positions so the environment stays collision-free; an overlap is
a simulation bug and raises immediately.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .episodes import EpisodeSpec
from .profiles import PROFILE_SETS, DriverProfile
from .roadnet import RoadNetwork

VEHICLE_LENGTH = 5.0
SIM_STEP = 0.5  # s
DECISION_INTERVAL = 1.0  # s
INTENT_DURATION = 5.0  # s a commanded lane change stays alive
LEADER_HORIZON = 80.0  # m of look-ahead across lane boundaries
WALL_MARGIN = 0.5  # m standoff from a closed lane end
SPEED_ACTION_FRACTIONS = (0.0, 0.33, 0.66, 1.0)
N_ACTIONS = 6  # left, right, four target speeds

_LC_COOLDOWN = 5.0  # s between discretionary changes
_LC_INCENTIVE = 0.25  # m/s^2 advantage needed at eagerness 1
_ZIP_HEADWAY = 1.5  # s separating granted merge arrivals
_JUNCTION_MARGIN = 1.0  # s added to crossing-time clearance checks
_CROSS_SPEED_FLOOR = 4.0  # m/s assumed when estimating crossing times from low speed
# merge start-up losses: a vehicle crossing the funnel below a fraction of
# the speed limit blocks it for up to this long on top of normal spacing, so
# queue discharge runs below free-flow capacity (classic capacity drop)
_ZIP_FAST_FRAC = 0.6
_ZIP_OCCUPANCY_MAX = 2.6  # s at a standing start
DRAIN_CAP = 600.0  # s allowed for the map to empty after demand ends


class SimulationIntegrityError(RuntimeError):
    """A collision-free-environment invariant was violated (a bug)."""


class ContractViolation(ValueError):
    """Caller passed an action or state the interface forbids."""


@dataclass
class SimClock:
    sim_step: float = SIM_STEP
    decision_interval: float = DECISION_INTERVAL
    now: float = 0.0

    def __post_init__(self):
        ratio = self.decision_interval / self.sim_step
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("decision_interval must be a multiple of sim_step")

    @property
    def substeps_per_decision(self) -> int:
        return int(round(self.decision_interval / self.sim_step))


class Vehicle:
    """Mutable per-vehicle simulation record."""

    __slots__ = (
        "vid", "is_av", "activated", "lane", "pos", "speed", "route",
        "route_idx", "signal", "profile", "scheduled_entry", "entry_time",
        "intent_side", "intent_deadline", "cmd_speed", "cooldown",
        "next_lane", "zone_grant", "zone_stamp", "hold_pos", "_v_new",
    )

    def __init__(self, vid, is_av, lane, pos, speed, route, profile, scheduled_entry):
        self.vid = vid
        self.is_av = is_av
        self.activated = False
        self.lane = lane
        self.pos = pos
        self.speed = speed
        self.route = route
        self.route_idx = 0
        self.signal = 0  # +1 left, -1 right
        self.profile = profile
        self.scheduled_entry = scheduled_entry
        self.entry_time: Optional[float] = None
        self.intent_side = 0  # +1 left, -1 right, 0 none
        self.intent_deadline = 0.0
        self.cmd_speed: Optional[float] = None
        self.cooldown = 0.0
        self.next_lane: Optional[int] = None
        self.zone_grant = False
        self.zone_stamp: Optional[float] = None
        self.hold_pos: Optional[float] = None
        self._v_new = 0.0

    @property
    def category(self) -> str:
        return "AV" if self.is_av else "HV"


def idm_accel(speed, v_target, gap, lead_speed, profile: DriverProfile) -> float:
    """IDM acceleration toward v_target with an optional leader at (gap,
    lead_speed); clamped to the profile's acceleration envelope."""
    a_max, b_max = profile.max_accel, profile.max_decel
    if v_target <= 1e-9:
        acc = -b_max if speed > 0 else 0.0
    else:
        acc = a_max * (1.0 - (speed / v_target) ** 4)
    if gap is not None:
        if gap <= 1e-6:
            return -b_max
        dyn = speed * profile.desired_headway + speed * (speed - lead_speed) / profile.two_sqrt_ab
        s_star = profile.min_gap + (dyn if dyn > 0.0 else 0.0)
        acc -= a_max * (s_star / gap) ** 2
    if acc > a_max:
        return a_max
    if acc < -b_max:
        return -b_max
    return acc


def car_following_accel(follower: Vehicle, leader: Optional[Vehicle],
                        network: RoadNetwork) -> float:
    """Acceleration of `follower` given an optional `leader` on the same lane
    or the imminent successor."""
    lane = network.lane(follower.lane)
    v_target = lane.speed_limit
    if follower.cmd_speed is not None:
        v_target = min(v_target, follower.cmd_speed)
    if leader is None:
        return idm_accel(follower.speed, v_target, None, 0.0, follower.profile)
    if leader.lane == follower.lane:
        gap = leader.pos - VEHICLE_LENGTH - follower.pos
    else:
        gap = (lane.length - follower.pos) + leader.pos - VEHICLE_LENGTH
    return idm_accel(follower.speed, v_target, gap, leader.speed, follower.profile)


class _ZoneState:
    __slots__ = ("zone", "stamp_start", "conflict_map", "connector_set",
                 "block_until")

    def __init__(self, zone, network: RoadNetwork):
        self.zone = zone
        self.block_until = -1e9
        # arrival stamps register inside the tracked interval of gated lanes
        self.stamp_start = {}
        for lane_id, start, _ in zone.intervals:
            self.stamp_start[lane_id] = start
        for lane_id in zone.gated:
            self.stamp_start.setdefault(
                lane_id, max(0.0, network.lane(lane_id).length - 30.0)
            )
        self.conflict_map: dict[int, set[int]] = {}
        for a, b in zone.conflicts:
            self.conflict_map.setdefault(a, set()).add(b)
            self.conflict_map.setdefault(b, set()).add(a)
        self.connector_set = {
            lane_id for lane_id, _, _ in zone.intervals
        } if zone.rule == "priority" else set()


class Simulation:
    """One episode of microscopic traffic on a road network."""

    def __init__(self, network: RoadNetwork, spec: EpisodeSpec,
                 clock: SimClock | None = None, log_trajectories: bool = False):
        if spec.map_name != network.name:
            raise ContractViolation(
                f"episode is for map {spec.map_name!r}, network is {network.name!r}")
        self.net = network
        self.spec = spec
        self.clock = clock or SimClock()
        self.hv_profile, self.av_profile = PROFILE_SETS[spec.profile_set]
        self.rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((spec.seed, 0x51)))
        )

        self.vehicles: dict[int, Vehicle] = {}
        self.lane_occ: list[list[Vehicle]] = [[] for _ in network.lanes]
        self.queues: dict[int, deque[Vehicle]] = {}  # source lane -> FIFO
        self.release_log: list[dict] = []
        self.step_releases: list[float] = []  # travel times released this substep
        self.spawned_total = 0
        self.released_total = 0
        self.clamp_events = 0
        self.trajectory_log: list[dict] | None = [] if log_trajectories else None

        self._routes = {r.route_id: r for r in network.routes}
        # (lane_id, route_id) -> successor lane on the route's next edge
        self._next_lane: dict[tuple[int, str], Optional[int]] = {}
        # (lane_id, route_id) -> side (+1/-1) toward a lane that connects
        self._mand_side: dict[tuple[int, str], int] = {}
        self._route_lanes: dict[str, list[int]] = {}
        for route in network.routes:
            lanes_on_route = []
            for i, edge in enumerate(route.edges):
                nxt = route.edges[i + 1] if i + 1 < len(route.edges) else None
                edge_lanes = network.edges[edge]
                lanes_on_route.extend(edge_lanes)
                for lane_id in edge_lanes:
                    succ = None
                    if nxt is not None:
                        for s in network.lane(lane_id).successors:
                            if network.lane(s).edge == nxt:
                                succ = s
                                break
                    self._next_lane[(lane_id, route.route_id)] = succ
                if nxt is not None:
                    connecting = [
                        l for l in edge_lanes
                        if self._next_lane[(l, route.route_id)] is not None
                    ]
                    for lane_id in edge_lanes:
                        if self._next_lane[(lane_id, route.route_id)] is None:
                            idx = network.lane(lane_id).index
                            best = min(connecting,
                                       key=lambda l: abs(network.lane(l).index - idx))
                            side = 1 if network.lane(best).index < idx else -1
                            self._mand_side[(lane_id, route.route_id)] = side
            self._route_lanes[route.route_id] = lanes_on_route

        self._edge_pos_in_route: dict[tuple[str, str], int] = {}
        for route in network.routes:
            for i, edge in enumerate(route.edges):
                self._edge_pos_in_route[(edge, route.route_id)] = i

        self._zones = [_ZoneState(z, network) for z in network.conflict_zones]
        self._gated_zone: dict[int, _ZoneState] = {}
        for zs in self._zones:
            for lane_id in zs.zone.gated:
                self._gated_zone[lane_id] = zs

        # reverse-topological order over the successor DAG (downstream first)
        order, seen = [], set()

        def visit(lid):
            if lid in seen:
                return
            seen.add(lid)
            for s in network.lane(lid).successors:
                visit(s)
            order.append(lid)

        for lane in network.lanes:
            visit(lane.lane_id)
        self._lane_order = order  # downstream lanes appear first

        self._sink_set = set(network.sinks)
        self._source_lanes_by_route: dict[str, list[int]] = {}
        source_set = {s for s, _ in network.sources}
        for route in network.routes:
            first = route.edges[0]
            self._source_lanes_by_route[route.route_id] = [
                l for l in network.edges[first] if l in source_set
            ]
        self._next_vid = 0
        # pre-drawn Poisson arrival counts: (substep, route) for determinism
        n_steps = int(round(spec.duration / self.clock.sim_step))
        tgrid = np.arange(n_steps) * self.clock.sim_step
        sched_by_route = dict(spec.schedules)
        lam = np.zeros((n_steps, len(network.routes)))
        for j, route in enumerate(network.routes):
            sched = sched_by_route[route.route_id]
            t0s = np.asarray([t for t, _ in sched])
            rates = np.asarray([r for _, r in sched])
            idx = np.clip(np.searchsorted(t0s, tgrid, side="right") - 1, 0, len(rates) - 1)
            lam[:, j] = rates[idx] * self.clock.sim_step / 3600.0
        self._arrivals = self.rng.poisson(lam)

    # ------------------------------------------------------------------ #
    # sub-steps
    # ------------------------------------------------------------------ #

    def _route_next(self, veh: Vehicle) -> Optional[int]:
        return self._next_lane[(veh.lane, veh.route.route_id)]

    def spawn_step(self) -> None:
        """Draw arrivals for this step, insert where the entry gap is safe,
        queue the rest; drain queues FIFO as space frees."""
        now = self.clock.now
        step_idx = int(round(now / self.clock.sim_step))
        if step_idx < self._arrivals.shape[0]:
            for j, route in enumerate(self.net.routes):
                for _ in range(int(self._arrivals[step_idx, j])):
                    self._create_vehicle(route, now)
        for lane_id in sorted(self.queues):
            q = self.queues[lane_id]
            while q and self._try_insert(q[0]):
                q.popleft()

    def _create_vehicle(self, route, now: float) -> None:
        is_av = bool(self.rng.random() < self.spec.penetration)
        profile = self.av_profile if is_av else self.hv_profile
        lanes = self._source_lanes_by_route[route.route_id]
        lane = lanes[int(self.rng.integers(len(lanes)))] if len(lanes) > 1 else lanes[0]
        veh = Vehicle(self._next_vid, is_av, lane, VEHICLE_LENGTH, 0.0, route,
                      profile, now)
        self._next_vid += 1
        self.spawned_total += 1
        queue = self.queues.setdefault(lane, deque())
        if queue or not self._try_insert(veh):
            queue.append(veh)  # FIFO: never jump vehicles already waiting

    def _try_insert(self, veh: Vehicle) -> bool:
        lane = self.net.lane(veh.lane)
        occ = self.lane_occ[veh.lane]
        entry_pos = VEHICLE_LENGTH
        if occ:
            rear = occ[0]
            gap = rear.pos - VEHICLE_LENGTH - entry_pos
            if gap < veh.profile.min_gap + 1.0:
                return False
            v_safe = math.sqrt(max(
                0.0, rear.speed * rear.speed
                + 2.0 * veh.profile.max_decel * (gap - veh.profile.min_gap)))
            speed = min(lane.speed_limit, v_safe)
        else:
            speed = lane.speed_limit
        veh.pos = entry_pos
        veh.speed = speed
        veh.entry_time = self.clock.now
        veh.next_lane = self._route_next(veh)
        occ.insert(0, veh)
        self.vehicles[veh.vid] = veh
        return True

    # -- lane changes --------------------------------------------------- #

    def _neighbor_gaps(self, veh: Vehicle, target: int):
        """(leader, front_gap, follower, rear_gap) at veh.pos on target lane."""
        occ = self.lane_occ[target]
        leader = follower = None
        front = rear = math.inf
        for other in occ:
            if other is veh:
                continue
            if other.pos >= veh.pos:
                leader = other
                front = other.pos - VEHICLE_LENGTH - veh.pos
                break
            follower = other
        if follower is not None:
            rear = veh.pos - VEHICLE_LENGTH - follower.pos
        return leader, front, follower, rear

    def _gap_ok(self, veh: Vehicle, target: int) -> bool:
        leader, front, follower, rear = self._neighbor_gaps(veh, target)
        p = veh.profile
        v = veh.speed
        lead_v = leader.speed if leader is not None else v
        req_front = (p.min_gap + 0.5 * p.desired_headway * v
                     + 1.2 * max(0.0, v - lead_v)) / p.assertiveness
        if front < req_front:
            return False
        if follower is not None:
            fv = follower.speed
            req_rear = (p.min_gap + 0.5 * p.desired_headway * fv
                        + 1.2 * max(0.0, fv - v)) / p.assertiveness
            if rear < req_rear:
                return False
        return True

    def _execute_change(self, veh: Vehicle, target: int) -> None:
        self.lane_occ[veh.lane].remove(veh)
        occ = self.lane_occ[target]
        idx = 0
        while idx < len(occ) and occ[idx].pos < veh.pos:
            idx += 1
        occ.insert(idx, veh)
        veh.lane = target
        veh.next_lane = self._route_next(veh)
        veh.signal = 0
        veh.intent_side = 0
        veh.zone_stamp = None
        veh.cooldown = self.clock.now + _LC_COOLDOWN

    def _route_feasible(self, veh: Vehicle, target: int) -> bool:
        if veh.route_idx + 1 >= len(veh.route.edges):
            return True
        return self._next_lane[(target, veh.route.route_id)] is not None

    def _current_accel(self, veh: Vehicle, lane_id: int) -> float:
        """IDM accel veh would have on lane_id at its current position."""
        lane = self.net.lane(lane_id)
        leader, front, _, _ = self._neighbor_gaps(veh, lane_id)
        v_target = lane.speed_limit
        if veh.cmd_speed is not None:
            v_target = min(v_target, veh.cmd_speed)
        if leader is None:
            return idm_accel(veh.speed, v_target, None, 0.0, veh.profile)
        return idm_accel(veh.speed, v_target, front, leader.speed, veh.profile)

    def lane_change_step(self) -> None:
        now = self.clock.now
        net = self.net
        todo: list[Vehicle] = []
        for lane_id in range(len(net.lanes)):
            occ = self.lane_occ[lane_id]
            for i in range(len(occ) - 1, -1, -1):
                todo.append(occ[i])
        for veh in todo:
            if veh.vid not in self.vehicles:
                continue
            lane = net.lane(veh.lane)
            # expire stale commanded intents
            if veh.intent_side != 0 and now > veh.intent_deadline:
                veh.intent_side = 0
                veh.signal = 0
            side = 0
            mandatory = False
            if veh.intent_side != 0:
                side = veh.intent_side
            elif veh.next_lane is None and veh.route_idx + 1 < len(veh.route.edges):
                side = self._mand_side[(veh.lane, veh.route.route_id)]
                mandatory = True
            elif (veh.profile.speed_gain_eagerness > 0.0 and now >= veh.cooldown
                  and veh.speed < 0.85 * lane.speed_limit):
                best_adv = 0.0
                a_here = self._current_accel(veh, veh.lane)
                for cand in (lane.left, lane.right):
                    if cand is None or not self._route_feasible(veh, cand):
                        continue
                    adv = self._current_accel(veh, cand) - a_here
                    if adv * veh.profile.speed_gain_eagerness > _LC_INCENTIVE and adv > best_adv:
                        best_adv = adv
                        side = 1 if cand == lane.left else -1
            if side == 0:
                self._route_signal(veh, lane)
                continue
            target = lane.left if side > 0 else lane.right
            if target is None:
                continue  # no lane on that side; a commanded intent just ages out
            veh.signal = side
            if not mandatory and veh.intent_side == 0 and not self._route_feasible(veh, target):
                veh.signal = 0
                continue
            if self._gap_ok(veh, target):
                self._execute_change(veh, target)

    def _route_signal(self, veh: Vehicle, lane) -> None:
        """Turn signals for junction movements (observability only)."""
        turn = None
        if lane.turn != "none":
            turn = lane.turn
        elif veh.next_lane is not None:
            nxt = self.net.lane(veh.next_lane)
            if nxt.turn != "none" and lane.length - veh.pos < 50.0:
                turn = nxt.turn
        if turn == "left":
            veh.signal = 1
        elif turn == "right":
            veh.signal = -1
        else:
            veh.signal = 0

    # -- yielding -------------------------------------------------------- #

    def yield_step(self) -> None:
        """Update zone arrival stamps and grant end-of-lane crossings."""
        now = self.clock.now
        for zs in self._zones:
            if zs.zone.rule == "zipper":
                self._yield_zipper(zs, now)
            else:
                self._yield_priority(zs, now)

    def _front(self, lane_id: int) -> Optional[Vehicle]:
        occ = self.lane_occ[lane_id]
        return occ[-1] if occ else None

    def _eta_to_end(self, veh: Vehicle) -> float:
        dist = self.net.lane(veh.lane).length - veh.pos
        return dist / max(veh.speed, 1.0)

    def _stamp(self, veh: Vehicle, zs: _ZoneState, now: float) -> float:
        start = zs.stamp_start.get(veh.lane, 0.0)
        if veh.pos >= start:
            if veh.zone_stamp is None:
                veh.zone_stamp = now
            return veh.zone_stamp
        veh.zone_stamp = None
        return now + self._eta_to_end(veh)  # projected arrival orders approachers

    def _yield_zipper(self, zs: _ZoneState, now: float) -> None:
        cands = []
        for lane_id in zs.zone.gated:
            veh = self._front(lane_id)
            if veh is not None:
                veh.zone_grant = False
                cands.append((self._stamp(veh, zs, now), veh.vid, veh))
        if not cands:
            return
        if now < zs.block_until:
            return  # the previous slow crossing still occupies the funnel
        cands.sort()
        last_eta = None
        for _, _, veh in cands:
            eta = self._eta_to_end(veh)
            if last_eta is None or eta - last_eta >= _ZIP_HEADWAY:
                veh.zone_grant = True
                last_eta = eta
            else:
                break  # later arrivals wait behind the unresolved merge

    def _exit_has_room(self, connector: int) -> bool:
        succs = self.net.lane(connector).successors
        if not succs:
            return True
        occ = self.lane_occ[succs[0]]
        if not occ:
            return True
        return occ[0].pos - VEHICLE_LENGTH >= VEHICLE_LENGTH + 3.0

    def _yield_priority(self, zs: _ZoneState, now: float) -> None:
        net = self.net
        occupied = {c for c in zs.connector_set if self.lane_occ[c]}
        cands = []
        for lane_id in zs.zone.gated:
            veh = self._front(lane_id)
            if veh is None:
                continue
            veh.zone_grant = False
            conn = veh.next_lane
            if conn is None:
                continue
            rank = net.lane(conn).priority_rank
            cands.append((-rank, self._stamp(veh, zs, now), veh.vid, veh, conn))
        cands.sort()
        granted_conns: set[int] = set()
        for neg_rank, stamp, _, veh, conn in cands:
            conflicts = zs.conflict_map.get(conn, set())
            if any(c in occupied for c in conflicts):
                continue
            if conn in granted_conns or granted_conns & conflicts:
                continue
            # clearance against higher-priority traffic still approaching
            rank = -neg_rank
            t_cross = (net.lane(conn).length / max(veh.speed, _CROSS_SPEED_FLOOR)
                       + _JUNCTION_MARGIN)
            blocked = False
            for other_lane in zs.zone.gated:
                if other_lane == veh.lane or blocked:
                    continue
                other = self._front(other_lane)
                if other is None or other.next_lane is None:
                    continue
                oconn = other.next_lane
                if oconn not in conflicts and oconn != conn:
                    continue
                orank = net.lane(oconn).priority_rank
                if orank > rank and self._eta_to_end(other) < t_cross:
                    blocked = True
                elif orank == rank:
                    ostamp = self._stamp(other, zs, now)
                    if (ostamp, other.vid) < (stamp, veh.vid) and not other.zone_grant:
                        blocked = True
            if blocked:
                continue
            if not self._exit_has_room(conn):
                continue
            veh.zone_grant = True
            granted_conns.add(conn)

    # -- physics --------------------------------------------------------- #

    def _leader_info(self, veh: Vehicle, occ_idx: int):
        """(gap, lead_speed) to the next vehicle ahead along the route, or
        (None, 0) within the look-ahead horizon."""
        occ = self.lane_occ[veh.lane]
        if occ_idx + 1 < len(occ):
            lead = occ[occ_idx + 1]
            return lead.pos - VEHICLE_LENGTH - veh.pos, lead.speed
        dist = self.net.lane(veh.lane).length - veh.pos
        lane_id = veh.next_lane
        route_id = veh.route.route_id
        while lane_id is not None and dist < LEADER_HORIZON:
            occ2 = self.lane_occ[lane_id]
            if occ2:
                lead = occ2[0]
                return dist + lead.pos - VEHICLE_LENGTH, lead.speed
            dist += self.net.lane(lane_id).length
            lane_id = self._next_lane[(lane_id, route_id)]
        return None, 0.0

    def physics_step(self) -> None:
        """Integrate speeds/positions (semi-implicit Euler), advance across
        lane boundaries, release at sinks, and verify integrity."""
        net = self.net
        dt = self.clock.sim_step
        now = self.clock.now
        self.step_releases = []

        # pass 1: accelerations from the synchronous old state
        for lane_id in self._lane_order:
            occ = self.lane_occ[lane_id]
            if not occ:
                continue
            lane = net.lane(lane_id)
            limit = lane.speed_limit
            for i, veh in enumerate(occ):
                v_target = limit if veh.cmd_speed is None else min(limit, veh.cmd_speed)
                gap, lead_v = self._leader_info(veh, i)
                dist_end = lane.length - veh.pos
                # anticipate a slower successor lane
                nxt = veh.next_lane
                if nxt is not None and dist_end < 100.0:
                    nlimit = net.lane(nxt).speed_limit
                    if nlimit < v_target:
                        v_allow = math.sqrt(
                            nlimit * nlimit + 2.0 * veh.profile.max_decel * max(dist_end, 0.0))
                        if v_allow < v_target:
                            v_target = v_allow
                acc = idm_accel(veh.speed, v_target, gap, lead_v, veh.profile)
                # closed end of lane (denied crossing, dead end, or sink-less)
                crossing_open = veh.zone_grant if lane_id in self._gated_zone else (
                    nxt is not None or lane_id in self._sink_set)
                if not crossing_open:
                    wall_gap = dist_end - WALL_MARGIN
                    acc = min(acc, idm_accel(veh.speed, v_target, wall_gap, 0.0, veh.profile))
                if veh.hold_pos is not None:
                    if veh.pos >= veh.hold_pos:
                        veh.hold_pos = None
                    else:
                        wall_gap = veh.hold_pos - veh.pos
                        acc = min(acc, idm_accel(veh.speed, v_target, wall_gap, 0.0,
                                                 veh.profile))
                v_new = veh.speed + acc * dt
                if v_new < 0.0:
                    v_new = 0.0
                elif v_new > limit:
                    v_new = limit
                veh._v_new = v_new

        # pass 2: apply moves downstream-first with hard no-overlap clamps
        exit_time = now + dt
        for lane_id in self._lane_order:
            occ = self.lane_occ[lane_id]
            if not occ:
                continue
            length = net.lane(lane_id).length
            for i in range(len(occ) - 1, -1, -1):
                veh = occ[i]
                x_new = veh.pos + veh._v_new * dt
                v_new = veh._v_new
                if i + 1 < len(occ):  # leader already moved
                    ceiling = occ[i + 1].pos - VEHICLE_LENGTH - 0.05
                    if x_new > ceiling:
                        x_new = max(veh.pos, ceiling)
                        v_new = (x_new - veh.pos) / dt
                        self.clamp_events += 1
                if x_new > length:
                    if lane_id in self._sink_set:
                        occ.pop(i)
                        self._release(veh, exit_time)
                        continue
                    open_end = veh.zone_grant if lane_id in self._gated_zone else (
                        veh.next_lane is not None)
                    moved = False
                    if open_end and veh.next_lane is not None:
                        target = veh.next_lane
                        overshoot = x_new - length
                        tocc = self.lane_occ[target]
                        if tocc:
                            ceiling = tocc[0].pos - VEHICLE_LENGTH - 0.05
                        else:
                            ceiling = math.inf
                        if overshoot <= ceiling:
                            tlane = net.lane(target)
                            occ.pop(i)
                            veh.lane = target
                            veh.pos = min(overshoot, tlane.length)
                            veh.speed = min(v_new, tlane.speed_limit)
                            veh.route_idx = self._edge_pos_in_route[
                                (tlane.edge, veh.route.route_id)]
                            veh.next_lane = self._next_lane[(target, veh.route.route_id)]
                            veh.zone_stamp = None
                            veh.zone_grant = False
                            zone = self._gated_zone.get(lane_id)
                            if zone is not None and zone.zone.rule == "zipper":
                                # slow crossings block the funnel: start-up loss
                                fast = _ZIP_FAST_FRAC * tlane.speed_limit
                                if veh.speed < fast:
                                    zone.block_until = exit_time + (
                                        _ZIP_OCCUPANCY_MAX * (1.0 - veh.speed / fast))
                            tocc.insert(0, veh)
                            moved = True
                    if not moved:
                        x_new = min(x_new, length)
                        v_new = max(0.0, (x_new - veh.pos) / dt)
                        veh.pos = x_new
                        veh.speed = v_new
                    continue
                veh.pos = x_new
                veh.speed = v_new

        # integrity scan: strict ordering with non-negative net gaps
        for lane_id, occ in enumerate(self.lane_occ):
            prev = None
            for veh in occ:
                if prev is not None and veh.pos - VEHICLE_LENGTH - prev.pos < -1e-9:
                    raise SimulationIntegrityError(
                        f"overlap on lane {lane_id} at t={now:.1f} "
                        f"(vids {prev.vid},{veh.vid}; seed {self.spec.seed})")
                limit = net.lane(lane_id).speed_limit
                if veh.speed > limit + 1e-9:
                    raise SimulationIntegrityError(
                        f"speed {veh.speed:.3f} above limit on lane {lane_id} "
                        f"(vid {veh.vid}; seed {self.spec.seed})")
                prev = veh

        if self.trajectory_log is not None:
            for veh in self.vehicles.values():
                self.trajectory_log.append(
                    {"t": exit_time, "id": veh.vid, "lane": veh.lane,
                     "pos": round(veh.pos, 3), "speed": round(veh.speed, 3)})

    def _release(self, veh: Vehicle, exit_time: float) -> None:
        del self.vehicles[veh.vid]
        travel = exit_time - veh.entry_time
        self.released_total += 1
        self.step_releases.append(travel)
        self.release_log.append({
            "id": veh.vid,
            "category": veh.category,
            "route": veh.route.route_id,
            "origin": veh.route.origin,
            "scheduled_entry": veh.scheduled_entry,
            "entry": veh.entry_time,
            "exit": exit_time,
            "travel_time": travel,
        })

    def inject_vehicle(self, route_id: str, lane_id: int | None = None,
                       pos: float = VEHICLE_LENGTH, speed: float = 0.0,
                       is_av: bool = False, profile: DriverProfile | None = None) -> Vehicle:
        """Place a vehicle directly on the map (synthetic scenes, tests)."""
        route = self._routes[route_id]
        if lane_id is None:
            lane_id = self._source_lanes_by_route[route_id][0]
        if profile is None:
            profile = self.av_profile if is_av else self.hv_profile
        veh = Vehicle(self._next_vid, is_av, lane_id, pos, speed, route, profile,
                      self.clock.now)
        self._next_vid += 1
        self.spawned_total += 1
        veh.entry_time = self.clock.now
        veh.route_idx = self._edge_pos_in_route[(self.net.lane(lane_id).edge, route_id)]
        veh.next_lane = self._route_next(veh)
        occ = self.lane_occ[lane_id]
        idx = 0
        while idx < len(occ) and occ[idx].pos < veh.pos:
            idx += 1
        occ.insert(idx, veh)
        self.vehicles[veh.vid] = veh
        return veh

    # -- control interface ------------------------------------------------ #

    def apply_action(self, veh: Vehicle, action: int) -> None:
        """One discrete action for an activated vehicle: lane-change intents
        or a persistent target-speed command."""
        lane = self.net.lane(veh.lane)
        if action == 0 or action == 1:
            side = 1 if action == 0 else -1
            neighbor = lane.left if side > 0 else lane.right
            if neighbor is None:
                raise ContractViolation(
                    f"lane-change action {action} with no neighbor lane "
                    f"(vid {veh.vid}, lane {veh.lane})")
            veh.intent_side = side
            veh.intent_deadline = self.clock.now + INTENT_DURATION
            veh.signal = side
        elif 2 <= action < N_ACTIONS:
            veh.cmd_speed = SPEED_ACTION_FRACTIONS[action - 2] * lane.speed_limit
        else:
            raise ContractViolation(f"unknown action {action}")

    def clear_control(self, veh: Vehicle) -> None:
        """Deactivation: the vehicle reverts to default driving rules."""
        veh.cmd_speed = None
        veh.intent_side = 0
        veh.signal = 0
        veh.activated = False

    # -- stepping ---------------------------------------------------------- #

    def substep(self) -> None:
        if self.clock.now < self.spec.duration:
            self.spawn_step()
        self.lane_change_step()
        self.yield_step()
        self.physics_step()
        self.clock.now += self.clock.sim_step

    def run(self, until: float | None = None, drain: bool = False) -> None:
        """Advance to `until` (default: episode duration). With drain=True,
        keep stepping past the end of demand until vehicles already on the
        map have exited; queued vehicles never enter during the drain."""
        end = self.spec.duration if until is None else until
        while self.clock.now < end - 1e-9:
            self.substep()
        if drain:
            cap = self.spec.duration + DRAIN_CAP
            while self.vehicles and self.clock.now < cap - 1e-9:
                self.substep()

    # -- accounting ---------------------------------------------------------#

    @property
    def queue_size(self) -> int:
        return sum(len(q) for q in self.queues.values())

    @property
    def on_map(self) -> int:
        return len(self.vehicles)

    def conservation_ok(self) -> bool:
        return self.spawned_total == self.on_map + self.released_total + self.queue_size

    def unreleased_wait_times(self) -> list[float]:
        """duration - scheduled_entry for every vehicle that never exited."""
        waits = [self.spec.duration - v.scheduled_entry for v in self.vehicles.values()]
        for q in self.queues.values():
            waits.extend(self.spec.duration - v.scheduled_entry for v in q)
        return waits
