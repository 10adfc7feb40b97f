"""Synthetic driving worlds and the scripted expert that drives them.

Every scene hangs off a reference path parametrized by arc length ``s``
(meters, agent at s=0, positive ahead) and a signed lateral offset
(meters, left positive).  Scenes are laid out in world coordinates with a
randomized rigid pose so downstream grid transforms are actually exercised.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, ScenarioError

AGENT_LENGTH = 4.0
AGENT_WIDTH = 1.8
DT = 0.2
K_STEPS = 10
PAST_STEPS = 5
COMFORT_DECEL = 2.0  # m/s^2, also the acceleration cap
STOP_MARGIN = 1.0    # meters of clearance ahead of the agent's front bumper
PINCH_CAP = 2.0      # m/s through a narrow gap
ROUTE_BEHIND = -8.0
ROUTE_AHEAD = 40.0

LIGHT_STATES = ("red", "yellow", "green", "unknown")
LIGHT_GRAY = {"red": 1.0, "yellow": 0.6, "green": 0.2, "unknown": 0.0}

SCENARIO_KINDS = (
    "straight",
    "curved_road",
    "stop_sign",
    "lead_vehicle_brake",
    "pinch_point",
    "crosswalk_pedestrian",
    "traffic_light",
)


def wrap_angle(theta):
    """Wrap radians into (-pi, pi]."""
    return -((-np.asarray(theta) + math.pi) % (2 * math.pi) - math.pi)


class StraightPath:
    """Line through ``origin`` with a fixed heading."""

    def __init__(self, origin, heading: float):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.heading = float(heading)

    def pose(self, s):
        s = np.asarray(s, dtype=np.float64)
        c, sn = math.cos(self.heading), math.sin(self.heading)
        x = self.origin[0] + s * c
        y = self.origin[1] + s * sn
        return np.stack([x, y, np.broadcast_to(self.heading, s.shape)], axis=-1)

    def point(self, s, lateral=0.0):
        c, sn = math.cos(self.heading), math.sin(self.heading)
        return np.asarray([
            self.origin[0] + s * c - lateral * sn,
            self.origin[1] + s * sn + lateral * c,
        ])

    def frame_of(self, points):
        """(s, lateral) of world points, shape-preserving over the leading dims."""
        p = np.asarray(points, dtype=np.float64) - self.origin
        c, sn = math.cos(self.heading), math.sin(self.heading)
        s = p[..., 0] * c + p[..., 1] * sn
        lat = -p[..., 0] * sn + p[..., 1] * c
        return s, lat

    def heading_at(self, s):
        return np.broadcast_to(self.heading, np.shape(s))

    def to_frame(self, pose):
        x, y, th = pose
        c, sn = math.cos(-th), math.sin(-th)
        d = self.origin - np.asarray([x, y])
        origin = np.asarray([d[0] * c - d[1] * sn, d[0] * sn + d[1] * c])
        return StraightPath(origin, self.heading - th)


class ArcPath:
    """Circular arc; ``turn`` is +1 for a left turn, -1 for a right turn.

    Arc length is capped well below pi*radius by the generator so the
    angular inverse in frame_of stays single-valued over the route.
    """

    def __init__(self, center, radius: float, theta0: float, turn: int):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.theta0 = float(theta0)
        self.turn = int(turn)

    @classmethod
    def from_pose(cls, pose, radius: float, turn: int):
        x, y, th = pose
        n = np.asarray([-math.sin(th), math.cos(th)])
        center = np.asarray([x, y]) + turn * radius * n
        theta0 = th - turn * math.pi / 2
        return cls(center, radius, theta0, turn)

    def pose(self, s):
        s = np.asarray(s, dtype=np.float64)
        ang = self.theta0 + self.turn * s / self.radius
        x = self.center[0] + self.radius * np.cos(ang)
        y = self.center[1] + self.radius * np.sin(ang)
        heading = ang + self.turn * math.pi / 2
        return np.stack([x, y, wrap_angle(heading)], axis=-1)

    def point(self, s, lateral=0.0):
        # left offsets move toward the center on left turns
        ang = self.theta0 + self.turn * s / self.radius
        r = self.radius - self.turn * lateral
        return self.center + r * np.asarray([math.cos(ang), math.sin(ang)])

    def frame_of(self, points):
        p = np.asarray(points, dtype=np.float64) - self.center
        r = np.sqrt(p[..., 0] ** 2 + p[..., 1] ** 2)
        ang = np.arctan2(p[..., 1], p[..., 0])
        s = self.turn * wrap_angle(ang - self.theta0) * self.radius
        lat = self.turn * (self.radius - r)
        return s, lat

    def heading_at(self, s):
        ang = self.theta0 + self.turn * np.asarray(s) / self.radius
        return wrap_angle(ang + self.turn * math.pi / 2)

    def to_frame(self, pose):
        x, y, th = pose
        c, sn = math.cos(-th), math.sin(-th)
        d = self.center - np.asarray([x, y])
        center = np.asarray([d[0] * c - d[1] * sn, d[0] * sn + d[1] * c])
        return ArcPath(center, self.radius, self.theta0 - th, self.turn)


@dataclass
class OrientedBox:
    center: np.ndarray  # (2,) world meters
    heading: float
    length: float
    width: float

    def corners(self):
        c, s = math.cos(self.heading), math.sin(self.heading)
        u = np.asarray([c, s]) * (self.length / 2)
        n = np.asarray([-s, c]) * (self.width / 2)
        return np.asarray([self.center + u + n, self.center + u - n,
                           self.center - u - n, self.center - u + n])


def boxes_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    """Separating-axis test for two oriented rectangles."""
    d = b.center - a.center
    for box in (a, b):
        c, s = math.cos(box.heading), math.sin(box.heading)
        for axis, own in (([c, s], box.length), ([-s, c], box.width)):
            axis = np.asarray(axis)
            ra = _projected_radius(a, axis)
            rb = _projected_radius(b, axis)
            if abs(float(d @ axis)) > ra + rb:
                return False
    return True


def _projected_radius(box: OrientedBox, axis) -> float:
    c, s = math.cos(box.heading), math.sin(box.heading)
    u = np.asarray([c, s])
    n = np.asarray([-s, c])
    return abs(float(u @ axis)) * box.length / 2 + abs(float(n @ axis)) * box.width / 2


@dataclass
class Lane:
    centerline: np.ndarray     # (n, 2) sampled world polyline
    offset: float              # lateral offset of the centerline from the path
    width: float
    speed_limit: float


@dataclass
class StopSign:
    position: np.ndarray       # (2,) world, roadside marker
    stop_s: float              # arc length of the stop line


@dataclass
class Crosswalk:
    center_s: float
    half_span: float           # half extent along s
    occupied: bool = False     # derived from pedestrian positions


@dataclass
class TrafficLight:
    stop_s: float
    states: tuple              # 5 states, oldest first, last = current


@dataclass
class DynamicObject:
    object_id: int
    role: str                  # vehicle | pedestrian | parked
    length: float
    width: float
    track: np.ndarray          # (5, 3) poses, oldest first, last = current
    future: np.ndarray         # (K, 3) scripted poses after now

    def box_at(self, pose) -> OrientedBox:
        return OrientedBox(np.asarray(pose[:2], dtype=np.float64), float(pose[2]),
                           self.length, self.width)

    def current_box(self) -> OrientedBox:
        return self.box_at(self.track[-1])


@dataclass
class SpeedZone:
    s0: float
    s1: float
    cap: float


@dataclass
class VectorScene:
    path: object
    s_min: float
    s_max: float
    road_lo: float             # lateral bounds of the drivable strip
    road_hi: float
    lane_width: float
    two_way: bool
    base_limit: float
    lanes: list
    road_edges: list
    stop_signs: list
    crosswalks: list
    traffic_lights: list
    objects: list
    route: np.ndarray          # (n, 2) world polyline the agent intends to follow
    agent_pose: np.ndarray     # (3,) current x, y, heading
    agent_past: np.ndarray = None   # (5, 3) poses, oldest first
    expert_future: np.ndarray = None  # (K, 3) poses after now
    speed_zones: list = field(default_factory=list)
    cross_path: object = None  # perpendicular road at intersections
    cross_half: float = 0.0
    kind: str = ""
    seed: int = 0
    k_steps: int = K_STEPS

    def copy(self) -> "VectorScene":
        return copy.deepcopy(self)

    def agent_box(self) -> OrientedBox:
        return OrientedBox(self.agent_pose[:2].copy(), float(self.agent_pose[2]),
                           AGENT_LENGTH, AGENT_WIDTH)

    def light_band_box(self, light: TrafficLight) -> OrientedBox:
        c = self.path.point(light.stop_s + 1.0, 0.0)
        return OrientedBox(c, float(self.path.heading_at(light.stop_s + 1.0)),
                           2.0, self.lane_width)

    def sign_band_box(self, sign: StopSign) -> OrientedBox:
        c = self.path.point(sign.stop_s, 0.0)
        return OrientedBox(c, float(self.path.heading_at(sign.stop_s)),
                           0.6, self.lane_width)


# --- expert planner ---------------------------------------------------------

def _stop_positions(scene: VectorScene) -> list:
    """Arc-length positions where the agent's *center* must come to rest."""
    stops = []
    half = AGENT_LENGTH / 2
    for sign in scene.stop_signs:
        stops.append(sign.stop_s - STOP_MARGIN - half)
    for light in scene.traffic_lights:
        if light.states[-1] in ("red", "yellow"):
            stops.append(light.stop_s - STOP_MARGIN - half)
    for cw in scene.crosswalks:
        if cw.occupied:
            stops.append(cw.center_s - cw.half_span - STOP_MARGIN - half)
    for obj in scene.objects:
        if obj.role != "vehicle":
            continue
        s_f, lat_f = scene.path.frame_of(obj.future[-1, :2])
        if s_f > 0 and abs(lat_f) < scene.lane_width / 2 + 0.3:
            stops.append(float(s_f) - obj.length / 2 - STOP_MARGIN - half)
    return stops


def _derive_speed_zones(scene: VectorScene) -> list:
    parked = [o for o in scene.objects if o.role == "parked"]
    if not parked:
        return []
    spans = []
    for o in parked:
        s, _ = scene.path.frame_of(o.track[-1, :2])
        spans.append((float(s) - o.length / 2, float(s) + o.length / 2))
    return [SpeedZone(min(a for a, _ in spans) - 2.0,
                      max(b for _, b in spans) + 2.0, PINCH_CAP)]


def _refresh_crosswalks(scene: VectorScene) -> None:
    peds = [o for o in scene.objects if o.role == "pedestrian"]
    for cw in scene.crosswalks:
        cw.occupied = False
        for p in peds:
            s, lat = scene.path.frame_of(p.track[-1, :2])
            on_road = scene.road_lo - 0.3 <= lat <= scene.road_hi + 0.3
            if on_road and abs(float(s) - cw.center_s) <= cw.half_span + 0.5:
                cw.occupied = True


def _envelope(s: float, limit: float, zones, stops) -> float:
    """Fastest permissible speed at s under braking-curve constraints."""
    v2 = limit * limit
    for z in zones:
        if s < z.s0:
            v2 = min(v2, z.cap ** 2 + 2 * COMFORT_DECEL * (z.s0 - s))
        elif s <= z.s1:
            v2 = min(v2, z.cap ** 2)
    for st in stops:
        d = st - s
        v2 = min(v2, 2 * COMFORT_DECEL * d if d > 0 else 0.0)
    return math.sqrt(max(v2, 0.0))


def _integrate_profile(scene, stops, zones, steps, dt, direction, substeps=10):
    """March the speed envelope forward or backward from s=0.

    Returns poses after each dt tick, nearest-in-time first for the forward
    direction and oldest first for the backward one.
    """
    limit = scene.lanes[0].speed_limit
    h = dt / substeps
    s = 0.0
    v = _envelope(0.0, limit, zones, stops)
    ticks = []
    for _ in range(steps):
        for _ in range(substeps):
            v = min(_envelope(s, limit, zones, stops), v + COMFORT_DECEL * h)
            s += direction * v * h
        ticks.append(s)
    poses = scene.path.pose(np.asarray(ticks))
    if direction < 0:
        poses = poses[::-1].copy()
    return poses


def refresh_derived(scene: VectorScene) -> VectorScene:
    """Recompute occupancy flags, slow zones, and the expert future in place.

    The agent history is left untouched: mutations change the world the
    planner reacts to, not what already happened.
    """
    _refresh_crosswalks(scene)
    scene.speed_zones = _derive_speed_zones(scene)
    stops = _stop_positions(scene)
    scene.expert_future = _integrate_profile(
        scene, stops, scene.speed_zones, scene.k_steps, DT, +1.0)
    if scene.agent_past is None:
        scene.agent_past = _integrate_profile(
            scene, stops, scene.speed_zones, PAST_STEPS, DT, -1.0)
    return scene


def expert_policy(scene: VectorScene) -> np.ndarray:
    """K future poses obeying the lane limit and braking envelopes."""
    if scene.route is None or len(scene.route) < 2:
        raise ScenarioError("scene has no usable route")
    stops = _stop_positions(scene)
    poses = _integrate_profile(scene, stops, scene.speed_zones,
                               scene.k_steps, DT, +1.0)
    final_s, _ = scene.path.frame_of(poses[-1, :2])
    if float(final_s) > scene.s_max - 1.0:
        raise ScenarioError("route shorter than the planning horizon")
    return poses


# --- scenario generation ----------------------------------------------------

def _braking_positions(s0: float, v0: float, decel: float, t_start: float, times):
    """Closed-form arc positions for an actor braking to rest from t_start."""
    t_stop = v0 / decel if decel > 0 else math.inf
    out = []
    for t in times:
        tau = min(max(t - t_start, 0.0), t_stop)
        out.append(s0 + v0 * tau - 0.5 * decel * tau * tau)
    return np.asarray(out)


def _actor_poses(path, s_vals, lateral: float, heading_jitter: float = 0.0):
    poses = path.pose(np.asarray(s_vals))
    pts = np.asarray([path.point(float(s), lateral) for s in s_vals])
    poses[:, :2] = pts
    poses[:, 2] = wrap_angle(poses[:, 2] + heading_jitter)
    return poses


_PAST_TIMES = tuple((i - 4) * DT for i in range(5))          # -0.8 .. 0.0
_FUTURE_TIMES = tuple((k + 1) * DT for k in range(K_STEPS))  # 0.2 .. 2.0


def _collision_free(scene: VectorScene) -> bool:
    if not scene.objects:
        return True
    agent_poses = np.concatenate([scene.agent_pose[None, :], scene.expert_future])
    for k, pose in enumerate(agent_poses):
        abox = OrientedBox(pose[:2], float(pose[2]), AGENT_LENGTH, AGENT_WIDTH)
        for obj in scene.objects:
            opose = obj.track[-1] if k == 0 else obj.future[k - 1]
            if boxes_overlap(abox, obj.box_at(opose)):
                return False
    return True


def _sample_polyline(path, s_lo, s_hi, lateral, step=0.5):
    svals = np.arange(s_lo, s_hi + step / 2, step)
    return np.asarray([path.point(float(s), lateral) for s in svals])


def _base_scene(kind, seed, rng, k_steps) -> VectorScene:
    agent_xy = rng.uniform(-50.0, 50.0, size=2)
    agent_th = rng.uniform(-math.pi, math.pi)
    pose = np.asarray([agent_xy[0], agent_xy[1], agent_th])
    base_limit = rng.uniform(2.5, 5.5)
    lane_width = rng.uniform(2.8, 3.6)
    two_way = bool(rng.random() < 0.7)

    if kind == "curved_road":
        radius = rng.uniform(14.0, 30.0)
        turn = 1 if rng.random() < 0.5 else -1
        path = ArcPath.from_pose(pose, radius, turn)
        limit = min(base_limit, math.sqrt(COMFORT_DECEL * radius))
    else:
        path = StraightPath(pose[:2], agent_th)
        limit = base_limit

    road_lo = -lane_width / 2
    road_hi = lane_width / 2 + (lane_width if two_way else 0.0)
    lanes = [Lane(_sample_polyline(path, ROUTE_BEHIND, ROUTE_AHEAD, 0.0),
                  0.0, lane_width, limit)]
    if two_way:
        lanes.append(Lane(_sample_polyline(path, ROUTE_BEHIND, ROUTE_AHEAD, lane_width),
                          lane_width, lane_width, limit))
    edges = [_sample_polyline(path, ROUTE_BEHIND, ROUTE_AHEAD, road_lo),
             _sample_polyline(path, ROUTE_BEHIND, ROUTE_AHEAD, road_hi)]
    route = _sample_polyline(path, -1.0, ROUTE_AHEAD, 0.0)
    return VectorScene(
        path=path, s_min=ROUTE_BEHIND, s_max=ROUTE_AHEAD,
        road_lo=road_lo, road_hi=road_hi, lane_width=lane_width, two_way=two_way,
        base_limit=base_limit, lanes=lanes, road_edges=edges,
        stop_signs=[], crosswalks=[], traffic_lights=[], objects=[],
        route=route, agent_pose=pose, kind=kind, seed=int(seed), k_steps=k_steps)


def _add_lead_vehicle(scene, rng) -> None:
    gap = rng.uniform(5.0, 7.5)                      # agent front to lead rear, now
    length = rng.uniform(3.8, 4.6)
    width = rng.uniform(1.7, 2.0)
    v0 = rng.uniform(1.5, scene.lanes[0].speed_limit)
    decel = rng.uniform(2.0, 3.0)
    lateral = rng.uniform(-0.25, 0.25)
    t0 = _PAST_TIMES[0]
    # anchor the braking curve so the sampled gap holds at t=0
    tau_now = min(-t0, v0 / decel)
    s_center0 = (AGENT_LENGTH / 2 + gap + length / 2
                 - (v0 * tau_now - 0.5 * decel * tau_now * tau_now))
    track_s = _braking_positions(s_center0, v0, decel, t0, _PAST_TIMES)
    future_s = _braking_positions(s_center0, v0, decel, t0, _FUTURE_TIMES)
    scene.objects.append(DynamicObject(
        object_id=len(scene.objects), role="vehicle", length=length, width=width,
        track=_actor_poses(scene.path, track_s, lateral),
        future=_actor_poses(scene.path, future_s, lateral)))


def _add_parked_pair(scene, rng) -> None:
    gap = rng.uniform(2.5, 2.9)
    shift = rng.uniform(-0.1, 0.1)
    s_mid = rng.uniform(4.5, 9.0)
    for side, stagger in ((-1, rng.uniform(-1.0, 0.0)), (+1, rng.uniform(0.0, 1.0))):
        length = rng.uniform(3.8, 4.5)
        width = rng.uniform(1.7, 2.0)
        inner = side * gap / 2 + shift
        lateral = inner + side * width / 2
        s_pos = s_mid + stagger
        jitter = rng.uniform(-0.03, 0.03)
        pose = _actor_poses(scene.path, [s_pos], lateral, jitter)[0]
        scene.objects.append(DynamicObject(
            object_id=len(scene.objects), role="parked", length=length, width=width,
            track=np.tile(pose, (PAST_STEPS, 1)),
            future=np.tile(pose, (scene.k_steps, 1))))


def _add_pedestrian(scene, rng, crosswalk: Crosswalk) -> None:
    speed = rng.uniform(0.8, 1.4)
    direction = 1 if rng.random() < 0.5 else -1
    lat0 = rng.uniform(scene.road_lo + 0.3, scene.road_hi - 0.3)
    s_pos = crosswalk.center_s + rng.uniform(-0.4, 0.4)
    heading = float(scene.path.heading_at(s_pos)) + direction * math.pi / 2
    track = np.asarray([
        [*scene.path.point(s_pos, lat0 - direction * speed * abs(t)), heading]
        for t in _PAST_TIMES])
    future = np.asarray([
        [*scene.path.point(s_pos, lat0 + direction * speed * t), heading]
        for t in _FUTURE_TIMES])
    scene.objects.append(DynamicObject(
        object_id=len(scene.objects), role="pedestrian", length=0.6, width=0.6,
        track=track, future=future))


def _light_states(rng, current: str) -> tuple:
    previous = {"red": "yellow", "yellow": "green", "green": "red"}[current]
    if rng.random() < 0.7:
        return (current,) * 5
    switch = int(rng.integers(1, 5))
    return tuple(previous if i < switch else current for i in range(5))


def _draw_scene(kind, seed, rng, k_steps) -> VectorScene:
    scene = _base_scene(kind, seed, rng, k_steps)
    if kind == "stop_sign":
        stop_s = rng.uniform(4.0, 10.0)
        scene.stop_signs.append(StopSign(
            position=scene.path.point(stop_s, scene.road_lo - 0.6), stop_s=stop_s))
    elif kind == "lead_vehicle_brake":
        _add_lead_vehicle(scene, rng)
    elif kind == "pinch_point":
        _add_parked_pair(scene, rng)
    elif kind == "crosswalk_pedestrian":
        cw = Crosswalk(center_s=rng.uniform(5.0, 10.0), half_span=0.75)
        scene.crosswalks.append(cw)
        _add_pedestrian(scene, rng, cw)
    elif kind == "traffic_light":
        stop_s = rng.uniform(5.0, 10.0)
        current = rng.choice(["red", "yellow", "green"], p=[0.45, 0.15, 0.40])
        scene.traffic_lights.append(TrafficLight(
            stop_s=stop_s, states=_light_states(rng, str(current))))
        scene.cross_path = StraightPath(
            scene.path.point(stop_s + 3.5, 0.0),
            float(scene.path.heading_at(stop_s + 3.5)) + math.pi / 2)
        scene.cross_half = scene.lane_width * (1.5 if scene.two_way else 1.0)
    refresh_derived(scene)
    return scene


def generate_scenario(kind: str, seed: int, k_steps: int = K_STEPS) -> VectorScene:
    """Deterministic scene for (kind, seed); draws are re-rolled until valid."""
    if kind not in SCENARIO_KINDS:
        raise InvalidArgumentError(f"unknown scenario kind {kind!r}")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF,
                                 SCENARIO_KINDS.index(kind)])
    for _ in range(64):
        scene = _draw_scene(kind, seed, rng, k_steps)
        expert_policy(scene)  # raises if the route cannot cover the horizon
        if _collision_free(scene):
            return scene
    raise ScenarioError(f"no valid {kind!r} layout found for seed {seed}")


def validate_scene(scene: VectorScene) -> None:
    """Re-check the structural invariants after a mutation."""
    if scene.expert_future is None or len(scene.expert_future) != scene.k_steps:
        raise ScenarioError("expert future missing or wrong length")
    if scene.agent_past is None or len(scene.agent_past) != PAST_STEPS:
        raise ScenarioError("agent history missing or wrong length")
    s_vals, lat = scene.path.frame_of(scene.expert_future[:, :2])
    if np.any(lat < scene.road_lo - 0.1) or np.any(lat > scene.road_hi + 0.1):
        raise ScenarioError("expert future leaves the drivable strip")
    if np.any(s_vals > scene.s_max - 1.0):
        raise ScenarioError("route shorter than the planning horizon")
    for light in scene.traffic_lights:
        if len(light.states) != PAST_STEPS:
            raise ScenarioError("traffic light needs one state per past frame")
        if any(st not in LIGHT_STATES for st in light.states):
            raise ScenarioError("unknown traffic light state")
    for obj in scene.objects:
        if obj.track.shape != (PAST_STEPS, 3) or obj.future.shape != (scene.k_steps, 3):
            raise ScenarioError("object track lengths do not match the horizon")
    if not _collision_free(scene):
        raise ScenarioError("expert trajectory intersects an object")
