"""Top-down rasterization of vector scenes into fixed channel stacks.

All drawing happens in the agent frame (x forward, y left, agent at the
anchor pixel facing up).  Scene geometry is converted into that frame first
and snapped to a ~1 micrometer lattice, so scenes that differ only by a rigid
world transform rasterize to identical grids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .scenes import (AGENT_LENGTH, AGENT_WIDTH, LIGHT_GRAY, PAST_STEPS, ArcPath,
                     StraightPath, VectorScene, wrap_angle)

CHANNEL_NAMES = (
    "roadmap_drivable", "roadmap_edges", "roadmap_markings",
    "speed_limit", "past_agent_poses", "current_agent_box", "route",
    "traffic_light_t0", "traffic_light_t1", "traffic_light_t2",
    "traffic_light_t3", "traffic_light_t4",
    "objects_t0", "objects_t1", "objects_t2", "objects_t3", "objects_t4",
)
DENSE_SUBSET_NAMES = CHANNEL_NAMES[:7]
OBJECT_CHANNEL_SLICE = slice(12, 17)
LIGHT_CHANNEL_SLICE = slice(7, 12)
SPEED_NORM = 8.0       # m/s mapped to channel value 1.0
ROLLOUT_FACTOR = 4     # feature/rollout grid downsample relative to pixels

_Q = 2.0 ** 20         # position lattice: ~1e-6 m
_QA = 2.0 ** 26        # angle lattice: ~1.5e-8 rad


def _q(x):
    return np.round(np.asarray(x, dtype=np.float64) * _Q) / _Q


def _qa(theta):
    return np.round(np.asarray(theta, dtype=np.float64) * _QA) / _QA


@dataclass(frozen=True)
class GridConfig:
    """Square agent-centered grid; the agent sits at a fixed anchor pixel."""

    field_of_view: float = 16.0
    resolution: int = 64

    def __post_init__(self):
        if self.field_of_view <= 0 or self.resolution <= 0:
            raise InvalidArgumentError("grid extents must be positive")

    @property
    def meters_per_pixel(self) -> float:
        return self.field_of_view / self.resolution

    @property
    def anchor_row(self) -> int:
        return round(0.75 * self.resolution)

    @property
    def anchor_col(self) -> int:
        return self.resolution // 2

    def pixel_centers(self) -> np.ndarray:
        """(res, res, 2) agent-frame coordinates of every pixel center."""
        mpp = self.meters_per_pixel
        fwd = (self.anchor_row - np.arange(self.resolution)) * mpp
        left = (self.anchor_col - np.arange(self.resolution)) * mpp
        out = np.empty((self.resolution, self.resolution, 2))
        out[..., 0] = fwd[:, None]
        out[..., 1] = left[None, :]
        return out

    def meters_to_pixel(self, xy):
        xy = np.asarray(xy, dtype=np.float64)
        mpp = self.meters_per_pixel
        return np.stack([self.anchor_row - xy[..., 0] / mpp,
                         self.anchor_col - xy[..., 1] / mpp], axis=-1)

    def pixel_to_meters(self, rc):
        rc = np.asarray(rc, dtype=np.float64)
        mpp = self.meters_per_pixel
        return np.stack([(self.anchor_row - rc[..., 0]) * mpp,
                         (self.anchor_col - rc[..., 1]) * mpp], axis=-1)

    # rollout-grid coordinates: cell (R, C) covers a factor x factor pixel block
    def cell_size(self, factor: int = ROLLOUT_FACTOR) -> float:
        return self.meters_per_pixel * factor

    def cell_origin(self, factor: int = ROLLOUT_FACTOR):
        """(row0, col0) such that meters = (origin - cell_index) * cell_size."""
        half = (factor - 1) / 2
        return ((self.anchor_row - half) / factor,
                (self.anchor_col - half) / factor)

    def meters_to_cell(self, xy, factor: int = ROLLOUT_FACTOR):
        r0, c0 = self.cell_origin(factor)
        size = self.cell_size(factor)
        xy = np.asarray(xy, dtype=np.float64)
        return np.stack([r0 - xy[..., 0] / size, c0 - xy[..., 1] / size], axis=-1)

    def cell_to_meters(self, rc, factor: int = ROLLOUT_FACTOR):
        r0, c0 = self.cell_origin(factor)
        size = self.cell_size(factor)
        rc = np.asarray(rc, dtype=np.float64)
        return np.stack([(r0 - rc[..., 0]) * size, (c0 - rc[..., 1]) * size], axis=-1)

    def cell_centers(self, factor: int = ROLLOUT_FACTOR) -> np.ndarray:
        res = self.resolution // factor
        r0, c0 = self.cell_origin(factor)
        size = self.cell_size(factor)
        fwd = (r0 - np.arange(res)) * size
        left = (c0 - np.arange(res)) * size
        out = np.empty((res, res, 2))
        out[..., 0] = fwd[:, None]
        out[..., 1] = left[None, :]
        return out


@dataclass
class RasterStack:
    channels: np.ndarray          # (res, res, 17) float32, values in [0, 1]
    channel_names: tuple = CHANNEL_NAMES
    dense_subset_names: tuple = DENSE_SUBSET_NAMES

    def channel(self, name: str) -> np.ndarray:
        return self.channels[..., self.channel_names.index(name)]

    def dense(self) -> np.ndarray:
        return self.channels[..., :len(self.dense_subset_names)]


def points_to_agent(points, agent_pose):
    """World points into the agent frame (x forward, y left), quantized."""
    x, y, th = agent_pose
    d = np.asarray(points, dtype=np.float64) - np.asarray([x, y])
    c, s = math.cos(th), math.sin(th)
    return _q(np.stack([d[..., 0] * c + d[..., 1] * s,
                        -d[..., 0] * s + d[..., 1] * c], axis=-1))


def poses_to_agent(poses, agent_pose):
    """World poses (..., 3) into the agent frame with relative headings."""
    poses = np.asarray(poses, dtype=np.float64)
    xy = points_to_agent(poses[..., :2], agent_pose)
    rel = _qa(wrap_angle(poses[..., 2] - agent_pose[2]))
    return np.concatenate([xy, rel[..., None]], axis=-1)


def _path_to_agent(path, agent_pose):
    p = path.to_frame(agent_pose)
    if isinstance(p, StraightPath):
        return StraightPath(_q(p.origin), float(_qa(p.heading)))
    return ArcPath(_q(p.center), float(_q(p.radius)), float(_qa(p.theta0)), p.turn)


def _box_mask(pts, center, heading, length, width):
    d = pts - np.asarray(center)
    c, s = math.cos(heading), math.sin(heading)
    u = d[..., 0] * c + d[..., 1] * s
    v = -d[..., 0] * s + d[..., 1] * c
    return (np.abs(u) <= length / 2) & (np.abs(v) <= width / 2)


def _disc_mask(pts, center, radius):
    d = pts - np.asarray(center)
    return d[..., 0] ** 2 + d[..., 1] ** 2 <= radius * radius


def rasterize(scene: VectorScene, grid: GridConfig = GridConfig()) -> RasterStack:
    pts = grid.pixel_centers()
    res = grid.resolution
    out = np.zeros((res, res, len(CHANNEL_NAMES)), dtype=np.float32)

    path = _path_to_agent(scene.path, scene.agent_pose)
    s, lat = path.frame_of(pts)
    on_len = (s >= scene.s_min) & (s <= scene.s_max)
    main_fill = on_len & (lat >= scene.road_lo) & (lat <= scene.road_hi)

    cross_fill = np.zeros((res, res), dtype=bool)
    cs = cl = None
    if scene.cross_path is not None:
        cross = _path_to_agent(scene.cross_path, scene.agent_pose)
        cs, cl = cross.frame_of(pts)
        cross_fill = (np.abs(cs) <= 20.0) & (np.abs(cl) <= scene.cross_half)

    out[..., 0] = main_fill | cross_fill

    edge_w = 0.12
    edges = on_len & ~cross_fill & (
        (np.abs(lat - scene.road_lo) <= edge_w) | (np.abs(lat - scene.road_hi) <= edge_w))
    if scene.two_way:
        sep = scene.lane_width / 2
        dash = (np.floor(s / 1.5).astype(np.int64) % 2) == 0
        edges |= on_len & ~cross_fill & dash & (np.abs(lat - sep) <= 0.07)
    if cs is not None:
        edges |= (np.abs(cs) <= 20.0) & ~main_fill & (
            np.abs(np.abs(cl) - scene.cross_half) <= edge_w)
    out[..., 1] = edges

    lane_half = scene.lane_width / 2
    in_lane = (lat >= -lane_half) & (lat <= lane_half)
    markings = np.zeros((res, res), dtype=bool)
    for cw in scene.crosswalks:
        band = (np.abs(s - cw.center_s) <= cw.half_span) & \
               (lat >= scene.road_lo) & (lat <= scene.road_hi)
        stripes = (np.floor((lat - scene.road_lo) / 0.5).astype(np.int64) % 2) == 0
        markings |= band & stripes
    for light in scene.traffic_lights:
        markings |= (np.abs(s - light.stop_s) <= 0.2) & in_lane
    out[..., 2] = markings

    out[..., 3] = main_fill * np.float32(scene.lanes[0].speed_limit / SPEED_NORM)
    if cs is not None:
        np.maximum(out[..., 3], cross_fill * np.float32(scene.base_limit / SPEED_NORM),
                   out=out[..., 3])

    past = np.zeros((res, res), dtype=bool)
    for pose in poses_to_agent(scene.agent_past, scene.agent_pose):
        past |= _box_mask(pts, pose[:2], pose[2], AGENT_LENGTH, AGENT_WIDTH)
    out[..., 4] = past

    out[..., 5] = _box_mask(pts, (0.0, 0.0), 0.0, AGENT_LENGTH, AGENT_WIDTH)
    out[..., 6] = (s >= -1.0) & (s <= scene.s_max) & (np.abs(lat) <= 0.3)

    # regulatory controls: lights paint their approach band per state frame,
    # stop signs paint a constant stop line plus a roadside disc
    for j in range(PAST_STEPS):
        ch = np.zeros((res, res), dtype=np.float32)
        for light in scene.traffic_lights:
            band = (s >= light.stop_s) & (s <= light.stop_s + 2.0) & in_lane
            np.maximum(ch, band * np.float32(LIGHT_GRAY[light.states[j]]), out=ch)
        for sign in scene.stop_signs:
            pos = points_to_agent(sign.position, scene.agent_pose)
            mark = _disc_mask(pts, pos, 0.35) | \
                ((np.abs(s - sign.stop_s) <= 0.2) & in_lane)
            np.maximum(ch, mark * np.float32(LIGHT_GRAY["red"]), out=ch)
        out[..., 7 + j] = ch

    for j in range(PAST_STEPS):
        occ = np.zeros((res, res), dtype=bool)
        for obj in scene.objects:
            pose = poses_to_agent(obj.track[j], scene.agent_pose)
            occ |= _box_mask(pts, pose[:2], pose[2], obj.length, obj.width)
        out[..., 12 + j] = occ

    return RasterStack(channels=out)


def future_object_occupancy(scene: VectorScene, grid: GridConfig = GridConfig(),
                            factor: int = ROLLOUT_FACTOR) -> np.ndarray:
    """(K, res/factor, res/factor) union of object boxes at each future step."""
    cells = grid.cell_centers(factor)
    res = grid.resolution // factor
    out = np.zeros((scene.k_steps, res, res), dtype=np.float32)
    for obj in scene.objects:
        for k in range(scene.k_steps):
            pose = poses_to_agent(obj.future[k], scene.agent_pose)
            out[k] = np.maximum(
                out[k], _box_mask(cells, pose[:2], pose[2], obj.length, obj.width))
    return out


def agent_box_occupancy(poses_agent, grid: GridConfig = GridConfig(),
                        factor: int = ROLLOUT_FACTOR) -> np.ndarray:
    """(K, res/factor, res/factor) agent box footprints for agent-frame poses."""
    poses_agent = np.asarray(poses_agent, dtype=np.float64)
    cells = grid.cell_centers(factor)
    res = grid.resolution // factor
    out = np.zeros((len(poses_agent), res, res), dtype=np.float32)
    for k, pose in enumerate(poses_agent):
        out[k] = _box_mask(cells, pose[:2], pose[2], AGENT_LENGTH, AGENT_WIDTH)
    return out
