"""Lane-graph definitions of the four bottleneck maps.

A map is a set of lanes grouped into edges (parallel lane groups). Junctions
are modeled as single-lane connector edges between approach and exit edges,
with geometrically derived conflict pairs. Merging funnels (two lanes feeding
one successor) are gated by zipper zones. Networks are immutable after
construction and serialize to a versioned JSON document.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

MAP_NAMES = ("onramp", "threeway", "fourway", "lanedrop")
SCHEMA_VERSION = 1

# Space one vehicle occupies in a standing queue (length + jam gap), used for
# the capacity hint.
_JAM_SPACING = 7.0


class MapConfigError(ValueError):
    """Unknown map name or invalid geometry parameters."""


@dataclass(frozen=True)
class MapParams:
    """Geometry knobs; defaults give desk-scale maps that congest at the
    benchmark demand levels."""

    lane_width: float = 3.5
    # on-ramp
    freeway_upstream_len: float = 250.0
    accel_len: float = 150.0
    freeway_down_len: float = 200.0
    freeway_speed: float = 25.0
    ramp_speed: float = 15.0
    # intersections
    approach_len: float = 200.0
    approach_speed: float = 13.9
    junction_half: float = 9.0
    straight_speed: float = 13.9
    left_speed: float = 8.0
    right_speed: float = 7.0
    # lane drop
    drop_lens: tuple[float, float, float] = (250.0, 150.0, 200.0)
    drop_speed: float = 16.0
    # zipper bookkeeping region at the tail of merging lanes
    zipper_tail: float = 30.0


@dataclass(frozen=True)
class Lane:
    lane_id: int
    edge: str
    index: int  # 0 = leftmost within the edge
    length: float
    speed_limit: float
    polyline: tuple[tuple[float, float], ...]
    successors: tuple[int, ...] = ()
    left: int | None = None
    right: int | None = None
    priority_rank: int = 0
    turn: str = "none"  # movement tag carried by junction connectors

    def __post_init__(self):
        if self.length <= 0 or self.speed_limit <= 0:
            raise MapConfigError(f"lane {self.lane_id}: non-positive length or speed")

    def pose_at(self, offset: float) -> tuple[float, float, float]:
        """(x, y, heading) at a longitudinal offset along the polyline."""
        pts = self.polyline
        remaining = min(max(offset, 0.0), self.length)
        for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
            seg = math.hypot(x1 - x0, y1 - y0)
            if remaining <= seg or (x1, y1) == pts[-1]:
                f = remaining / seg if seg > 0 else 0.0
                return (
                    x0 + f * (x1 - x0),
                    y0 + f * (y1 - y0),
                    math.atan2(y1 - y0, x1 - x0),
                )
            remaining -= seg
        x, y = pts[-1]
        return x, y, 0.0


@dataclass(frozen=True)
class ConflictZone:
    zone_id: str
    rule: str  # "priority" | "zipper"
    # (lane_id, start, end): the mutually exclusive / arrival-tracking region
    intervals: tuple[tuple[int, float, float], ...]
    # lanes whose end-of-lane crossing is gated by this zone
    gated: tuple[int, ...]
    # conflicting connector pairs (priority zones only)
    conflicts: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class RouteSpec:
    route_id: str
    edges: tuple[str, ...]
    turns: tuple[str, ...]  # per edge; connectors carry their movement
    origin: str  # grouping label: freeway/ramp/main/side/all

    def __post_init__(self):
        if len(self.edges) != len(self.turns):
            raise MapConfigError(f"route {self.route_id}: edges/turns length mismatch")


@dataclass(frozen=True)
class RoadNetwork:
    name: str
    lanes: tuple[Lane, ...]
    edges: dict[str, tuple[int, ...]]  # edge -> lane ids, leftmost first
    sources: tuple[tuple[int, tuple[float, float]], ...]  # (lane_id, entry xy)
    sinks: tuple[int, ...]
    conflict_zones: tuple[ConflictZone, ...]
    bottleneck_zone: tuple[float, float, float, float]  # x0, y0, x1, y1
    bottleneck_point: tuple[float, float]
    map_extent: tuple[float, float]
    routes: tuple[RouteSpec, ...]
    params: MapParams = field(default=MapParams(), repr=False)

    def lane(self, lane_id: int) -> Lane:
        return self.lanes[lane_id]

    @property
    def capacity_hint(self) -> int:
        """Safe upper bound on simultaneous on-map vehicles (jam density)."""
        total = sum(lane.length for lane in self.lanes)
        return int(math.ceil(total / _JAM_SPACING)) + len(self.lanes)

    def route(self, route_id: str) -> RouteSpec:
        for r in self.routes:
            if r.route_id == route_id:
                return r
        raise KeyError(route_id)

    def validate(self) -> None:
        ids = {lane.lane_id for lane in self.lanes}
        by_id = {lane.lane_id: lane for lane in self.lanes}
        for lane in self.lanes:
            for s in lane.successors:
                if s not in ids:
                    raise MapConfigError(f"lane {lane.lane_id}: missing successor {s}")
            if lane.left is not None and by_id[lane.left].right != lane.lane_id:
                raise MapConfigError(f"lane {lane.lane_id}: asymmetric left neighbor")
            if lane.right is not None and by_id[lane.right].left != lane.lane_id:
                raise MapConfigError(f"lane {lane.lane_id}: asymmetric right neighbor")
        for zone in self.conflict_zones:
            for lane_id, start, end in zone.intervals:
                if lane_id not in ids:
                    raise MapConfigError(f"zone {zone.zone_id}: unknown lane {lane_id}")
                if not (0.0 <= start < end <= by_id[lane_id].length + 1e-9):
                    raise MapConfigError(f"zone {zone.zone_id}: bad interval on {lane_id}")
        # every source reaches at least one sink (successors plus lane changes:
        # dead-ending lanes such as acceleration lanes require a lateral move)
        sink_set = set(self.sinks)
        for lane_id, _ in self.sources:
            frontier, seen = [lane_id], set()
            reached = False
            while frontier:
                cur = frontier.pop()
                if cur in seen:
                    continue
                seen.add(cur)
                if cur in sink_set:
                    reached = True
                    break
                cur_lane = by_id[cur]
                frontier.extend(cur_lane.successors)
                frontier.extend(n for n in (cur_lane.left, cur_lane.right) if n is not None)
            if not reached:
                raise MapConfigError(f"source lane {lane_id} reaches no sink")

    def to_json(self) -> str:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "lanes": [
                {
                    "lane_id": lane.lane_id,
                    "edge": lane.edge,
                    "index": lane.index,
                    "length": lane.length,
                    "speed_limit": lane.speed_limit,
                    "polyline": [list(p) for p in lane.polyline],
                    "successors": list(lane.successors),
                    "left": lane.left,
                    "right": lane.right,
                    "priority_rank": lane.priority_rank,
                    "turn": lane.turn,
                }
                for lane in self.lanes
            ],
            "edges": {k: list(v) for k, v in self.edges.items()},
            "sources": [[lane_id, list(xy)] for lane_id, xy in self.sources],
            "sinks": list(self.sinks),
            "zones": [
                {
                    "zone_id": z.zone_id,
                    "rule": z.rule,
                    "intervals": [list(i) for i in z.intervals],
                    "gated": list(z.gated),
                    "conflicts": [list(c) for c in z.conflicts],
                }
                for z in self.conflict_zones
            ],
            "bottleneck_zone": list(self.bottleneck_zone),
            "bottleneck_point": list(self.bottleneck_point),
            "map_extent": list(self.map_extent),
            "routes": [
                {
                    "route_id": r.route_id,
                    "edges": list(r.edges),
                    "turns": list(r.turns),
                    "origin": r.origin,
                }
                for r in self.routes
            ],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))


class _Builder:
    """Accumulates lanes/edges with automatic id assignment."""

    def __init__(self, params: MapParams):
        self.params = params
        self.lanes: list[dict] = []
        self.edges: dict[str, list[int]] = {}

    def add_lane(self, edge: str, index: int, p0, p1, speed, rank, turn="none") -> int:
        lane_id = len(self.lanes)
        length = math.hypot(p1[0] - p0[0], p1[1] - p0[1])
        self.lanes.append(
            dict(
                lane_id=lane_id,
                edge=edge,
                index=index,
                length=length,
                speed_limit=speed,
                polyline=(tuple(p0), tuple(p1)),
                successors=[],
                left=None,
                right=None,
                priority_rank=rank,
                turn=turn,
            )
        )
        self.edges.setdefault(edge, []).append(lane_id)
        return lane_id

    def add_edge(self, edge: str, n_lanes, p0, p1, speed, rank) -> list[int]:
        """Parallel straight lanes offset to the right of the p0->p1 axis;
        index 0 is leftmost (the p0->p1 line itself)."""
        dx, dy = p1[0] - p0[0], p1[1] - p0[1]
        norm = math.hypot(dx, dy)
        # right-hand normal of the travel direction
        rx, ry = dy / norm, -dx / norm
        ids = []
        for i in range(n_lanes):
            off = i * self.params.lane_width
            ids.append(
                self.add_lane(
                    edge,
                    i,
                    (p0[0] + rx * off, p0[1] + ry * off),
                    (p1[0] + rx * off, p1[1] + ry * off),
                    speed,
                    rank,
                )
            )
        self._link_neighbors(ids)
        return ids

    def _link_neighbors(self, ids: list[int]) -> None:
        for a, b in zip(ids, ids[1:]):
            self.lanes[a]["right"] = b
            self.lanes[b]["left"] = a

    def connect(self, src: int, dst: int) -> None:
        self.lanes[src]["successors"].append(dst)

    def lane_end(self, lane_id: int) -> tuple[float, float]:
        return self.lanes[lane_id]["polyline"][-1]

    def lane_start(self, lane_id: int) -> tuple[float, float]:
        return self.lanes[lane_id]["polyline"][0]

    def finish(
        self,
        name: str,
        sources: list[int],
        zones: list[ConflictZone],
        bottleneck_zone,
        bottleneck_point,
        routes: list[RouteSpec],
        sinks: list[int] | None = None,
    ) -> RoadNetwork:
        if sinks is None:
            sinks = [lane["lane_id"] for lane in self.lanes if not lane["successors"]]
        sinks = tuple(sinks)
        lanes = tuple(
            Lane(
                lane_id=l["lane_id"],
                edge=l["edge"],
                index=l["index"],
                length=l["length"],
                speed_limit=l["speed_limit"],
                polyline=l["polyline"],
                successors=tuple(l["successors"]),
                left=l["left"],
                right=l["right"],
                priority_rank=l["priority_rank"],
                turn=l["turn"],
            )
            for l in self.lanes
        )
        xs = [p[0] for lane in lanes for p in lane.polyline]
        ys = [p[1] for lane in lanes for p in lane.polyline]
        extent = (max(xs), max(ys))
        net = RoadNetwork(
            name=name,
            lanes=lanes,
            edges={k: tuple(v) for k, v in self.edges.items()},
            sources=tuple((s, lanes[s].polyline[0]) for s in sources),
            sinks=sinks,
            conflict_zones=tuple(zones),
            bottleneck_zone=tuple(bottleneck_zone),
            bottleneck_point=tuple(bottleneck_point),
            map_extent=extent,
            routes=tuple(routes),
            params=self.params,
        )
        net.validate()
        return net


def _segment_distance(p0, p1, q0, q1) -> float:
    """Minimum distance between two 2D segments."""

    def clamp(t):
        return min(1.0, max(0.0, t))

    def pt(p, q, t):
        return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))

    def d2(a, b):
        return (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2

    # check proper intersection first
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2_ = orient(p0, p1, q0), orient(p0, p1, q1)
    d3, d4 = orient(q0, q1, p0), orient(q0, q1, p1)
    if ((d1 > 0) != (d2_ > 0)) and ((d3 > 0) != (d4 > 0)):
        return 0.0
    best = math.inf
    for a, b, c in ((p0, p1, q0), (p0, p1, q1), (q0, q1, p0), (q0, q1, p1)):
        ab2 = d2(a, b)
        t = clamp(((c[0] - a[0]) * (b[0] - a[0]) + (c[1] - a[1]) * (b[1] - a[1])) / ab2) if ab2 else 0.0
        best = min(best, d2(pt(a, b, t), c))
    return math.sqrt(best)


def _junction_conflicts(builder: _Builder, connector_ids: list[int]) -> list[tuple[int, int]]:
    """Connector pairs that cannot occupy the junction simultaneously: chords
    closer than ~a lane width, or connectors merging into the same lane."""
    pairs = []
    for i, a in enumerate(connector_ids):
        for b in connector_ids[i + 1:]:
            la, lb = builder.lanes[a], builder.lanes[b]
            same_target = bool(set(la["successors"]) & set(lb["successors"]))
            dist = _segment_distance(
                la["polyline"][0], la["polyline"][1], lb["polyline"][0], lb["polyline"][1]
            )
            if same_target or dist < 2.5:
                pairs.append((a, b))
    return pairs


def _build_onramp(p: MapParams) -> RoadNetwork:
    b = _Builder(p)
    w = p.lane_width
    y0 = 2 * w + 59.5  # leftmost freeway lane center height
    x_merge = p.freeway_upstream_len
    x_down = x_merge + p.accel_len
    x_end = x_down + p.freeway_down_len

    fw_up = b.add_edge("fw_up", 2, (0.0, y0), (x_merge, y0), p.freeway_speed, 1)
    fw_merge = b.add_edge("fw_merge", 2, (x_merge, y0), (x_down, y0), p.freeway_speed, 1)
    accel = b.add_lane(
        "fw_merge", 2, (x_merge, y0 - 2 * w), (x_down, y0 - 2 * w), p.ramp_speed, 0
    )
    b._link_neighbors([fw_merge[1], accel])
    fw_down = b.add_edge("fw_down", 2, (x_down, y0), (x_end, y0), p.freeway_speed, 1)
    ramp = b.add_lane("ramp", 0, (70.0, 0.0), (x_merge, y0 - 2 * w), p.ramp_speed, 0)

    b.connect(fw_up[0], fw_merge[0])
    b.connect(fw_up[1], fw_merge[1])
    b.connect(fw_merge[0], fw_down[0])
    b.connect(fw_merge[1], fw_down[1])
    b.connect(ramp, accel)  # acceleration lane dead-ends: merge left is mandatory

    routes = [
        RouteSpec("fw_up|fw_merge|fw_down", ("fw_up", "fw_merge", "fw_down"),
                  ("none", "none", "none"), "freeway"),
        RouteSpec("ramp|fw_merge|fw_down", ("ramp", "fw_merge", "fw_down"),
                  ("none", "none", "none"), "ramp"),
    ]
    # activation stops at the merge end: vehicles past it cannot help anymore
    zone = (max(0.0, x_merge - 60.0), 0.0, x_down, y0 + w)
    return b.finish(
        "onramp",
        sources=[fw_up[0], fw_up[1], ramp],
        zones=[],
        bottleneck_zone=zone,
        bottleneck_point=(x_merge + 0.5 * p.accel_len, y0 - 2 * w),
        routes=routes,
        sinks=fw_down,  # the acceleration lane dead-ends but is not an exit
    )


def _build_lanedrop(p: MapParams) -> RoadNetwork:
    b = _Builder(p)
    w = p.lane_width
    l1, l2, l3 = p.drop_lens
    y0 = 3 * w
    e1 = b.add_edge("e1", 4, (0.0, y0), (l1, y0), p.drop_speed, 1)
    e2 = b.add_edge("e2", 2, (l1, y0 - 0.5 * w), (l1 + l2, y0 - 0.5 * w), p.drop_speed, 1)
    e3 = b.add_edge("e3", 1, (l1 + l2, y0 - 1.5 * w), (l1 + l2 + l3, y0 - 1.5 * w),
                    p.drop_speed, 1)
    for src, dst in ((e1[0], e2[0]), (e1[1], e2[0]), (e1[2], e2[1]), (e1[3], e2[1]),
                     (e2[0], e3[0]), (e2[1], e3[0])):
        b.connect(src, dst)

    tail = p.zipper_tail
    zones = [
        ConflictZone(
            "drop_a", "zipper",
            ((e1[0], l1 - tail, l1), (e1[1], l1 - tail, l1)),
            gated=(e1[0], e1[1]),
        ),
        ConflictZone(
            "drop_b", "zipper",
            ((e1[2], l1 - tail, l1), (e1[3], l1 - tail, l1)),
            gated=(e1[2], e1[3]),
        ),
        ConflictZone(
            "drop_c", "zipper",
            ((e2[0], l2 - tail, l2), (e2[1], l2 - tail, l2)),
            gated=(e2[0], e2[1]),
        ),
    ]
    routes = [RouteSpec("e1|e2|e3", ("e1", "e2", "e3"), ("none",) * 3, "all")]
    zone = (max(0.0, l1 - 80.0), 0.0, l1 + l2, y0 + w)
    return b.finish(
        "lanedrop",
        sources=e1,
        zones=zones,
        bottleneck_zone=zone,
        bottleneck_point=(l1 + l2, y0 - 1.5 * w),
        routes=routes,
    )


# clockwise-consistent exit for each (approach, movement) at a crossroads
_FOURWAY_MOVES = {
    "S": {"straight": "N", "left": "W", "right": "E"},
    "N": {"straight": "S", "left": "E", "right": "W"},
    "W": {"straight": "E", "left": "N", "right": "S"},
    "E": {"straight": "W", "left": "S", "right": "N"},
}
_MOVE_ORDER = ("straight", "left", "right")


def _build_crossroads(p: MapParams, arms: tuple[str, ...], main: tuple[str, ...],
                      name: str) -> RoadNetwork:
    b = _Builder(p)
    w, hb, al = p.lane_width, p.junction_half, p.approach_len
    c = al + hb  # junction center coordinate on both axes
    half = 0.5 * w
    # approach end / exit start poses per arm (right-hand traffic)
    geo = {
        "W": dict(app=((0.0, c - half), (c - hb, c - half)),
                  exit=((c - hb, c + half), (0.0, c + half))),
        "E": dict(app=((2 * c, c + half), (c + hb, c + half)),
                  exit=((c + hb, c - half), (2 * c, c - half))),
        "S": dict(app=((c + half, 0.0), (c + half, c - hb)),
                  exit=((c - half, c - hb), (c - half, 0.0))),
        "N": dict(app=((c - half, 2 * c), (c - half, c + hb)),
                  exit=((c + half, c + hb), (c + half, 2 * c))),
    }
    approaches, exits = {}, {}
    for arm in arms:
        rank = 1 if arm in main else 0
        g = geo[arm]
        approaches[arm] = b.add_lane(f"in_{arm}", 0, *g["app"], p.approach_speed, rank)
        exits[arm] = b.add_lane(f"out_{arm}", 0, *g["exit"], p.approach_speed, rank)

    conn_speed = {"straight": p.straight_speed, "left": p.left_speed,
                  "right": p.right_speed}
    connectors, routes = [], []
    for arm in arms:
        app_rank = 1 if arm in main else 0
        for move in _MOVE_ORDER:
            dst = _FOURWAY_MOVES[arm][move]
            if dst not in arms:
                continue
            # lower rank yields: left turns rank below straight/right of same road
            rank = app_rank * 10 + (0 if move == "left" else 5)
            edge = f"conn_{arm}_{move}"
            cid = b.add_lane(edge, 0, b.lane_end(approaches[arm]),
                             b.lane_start(exits[dst]), conn_speed[move], rank,
                             turn=move)
            b.connect(approaches[arm], cid)
            b.connect(cid, exits[dst])
            connectors.append(cid)
            routes.append(RouteSpec(
                f"in_{arm}|{edge}|out_{dst}", (f"in_{arm}", edge, f"out_{dst}"),
                ("none", move, "none"),
                "main" if arm in main else "side",
            ))

    zone = ConflictZone(
        "junction", "priority",
        tuple((cid, 0.0, b.lanes[cid]["length"]) for cid in connectors),
        gated=tuple(approaches[a] for a in arms),
        conflicts=tuple(_junction_conflicts(b, connectors)),
    )
    margin = 60.0
    bz = (c - hb - margin, c - hb - margin, c + hb + margin, c + hb + margin)
    return b.finish(
        name,
        sources=[approaches[a] for a in arms],
        zones=[zone],
        bottleneck_zone=bz,
        bottleneck_point=(c, c),
        routes=routes,
    )


def build_map(map_name: str, params: MapParams | None = None) -> RoadNetwork:
    """Construct one of the four bottleneck networks."""
    p = params or MapParams()
    if map_name == "onramp":
        return _build_onramp(p)
    if map_name == "lanedrop":
        return _build_lanedrop(p)
    if map_name == "threeway":
        # main road: west/east arms; stem from the south
        return _build_crossroads(p, ("W", "E", "S"), ("W", "E"), "threeway")
    if map_name == "fourway":
        # main road: north/south arms
        return _build_crossroads(p, ("N", "S", "W", "E"), ("N", "S"), "fourway")
    raise MapConfigError(f"unknown map {map_name!r}; expected one of {MAP_NAMES}")


def routes_for(network: RoadNetwork) -> list[RouteSpec]:
    """All source->sink routes, sorted by (source lane id, sink lane id)."""

    def key(r: RouteSpec):
        first = min(network.edges[r.edges[0]])
        last = min(network.edges[r.edges[-1]])
        return (first, last, r.edges)

    return sorted(network.routes, key=key)


def scaled_params(scale: float, **overrides) -> MapParams:
    """Shrink every longitudinal dimension by `scale` (desk-scale runs)."""
    base = MapParams()
    p = replace(
        base,
        freeway_upstream_len=base.freeway_upstream_len * scale,
        accel_len=base.accel_len * scale,
        freeway_down_len=base.freeway_down_len * scale,
        approach_len=base.approach_len * scale,
        drop_lens=tuple(x * scale for x in base.drop_lens),
    )
    return replace(p, **overrides) if overrides else p
