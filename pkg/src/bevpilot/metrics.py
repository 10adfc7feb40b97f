"""Trajectory metrics, attention statistics, and model evaluation.

Scalar metrics are defined per example on plain numpy arrays; model-level
evaluation batches rollouts and aggregates with a fixed reduction order so
repeated runs report identical numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, UnsupportedVariantError
from .model import DrivingModel
from .raster import GridConfig
from .scenes import OrientedBox

ENTROPY_NORMALIZATION_TOL = 1e-4
MASS_DILATION_M = 3.0


def _as_waypoints(arr, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 2 or out.shape[1] != 2:
        raise InvalidArgumentError(f"{name} must be (K, 2), got {out.shape}")
    return out


def displacement_errors(pred, gt) -> np.ndarray:
    """(K,) per-step Euclidean displacement between waypoint sequences."""
    p = _as_waypoints(pred, "pred")
    g = _as_waypoints(gt, "gt")
    if p.shape != g.shape:
        raise InvalidArgumentError(
            f"waypoint sequences differ in length: {p.shape} vs {g.shape}")
    return np.linalg.norm(p - g, axis=1)


def ade(pred, gt) -> float:
    """Mean displacement over all K waypoints, meters."""
    return float(displacement_errors(pred, gt).mean())


def fde(pred, gt) -> float:
    """Displacement at the final waypoint only, meters."""
    return float(displacement_errors(pred, gt)[-1])


def collision_rate(box_probs, occupancy) -> float:
    """Mean over steps of the cellwise product sum of B_k and occupancy_k.

    ``box_probs`` holds the predicted agent-box probabilities per step,
    ``occupancy`` the ground-truth other-object cells at the matched step.
    """
    b = np.asarray(box_probs, dtype=np.float64)
    o = np.asarray(occupancy, dtype=np.float64)
    if b.shape != o.shape or b.ndim != 3:
        raise InvalidArgumentError(
            f"collision_rate needs matching (K, h, w) grids, got {b.shape} vs {o.shape}")
    return float((b * o).sum(axis=(1, 2)).mean())


def attention_entropy(alpha) -> float:
    """Shannon entropy -sum(a ln a) in nats; 0 ln 0 counts as 0."""
    a = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if np.any(a < 0):
        raise InvalidArgumentError("attention weights must be nonnegative")
    total = a.sum()
    if abs(total - 1.0) > ENTROPY_NORMALIZATION_TOL:
        raise InvalidArgumentError(
            f"attention map is not normalized: sum = {total!r}")
    nz = a[a > 0]
    return float(-(nz * np.log(nz)).sum())


def _expand2(a: np.ndarray) -> np.ndarray:
    """One 2x bilinear expansion with half-cell offset sampling, edge-clamped."""
    for axis in (0, 1):
        a = np.moveaxis(a, axis, 0)
        up = np.repeat(a, 2, axis=0) * 0.75
        up[0::2] += 0.25 * np.concatenate([a[:1], a[:-1]], axis=0)
        up[1::2] += 0.25 * np.concatenate([a[1:], a[-1:]], axis=0)
        a = np.moveaxis(up, 0, axis)
    return a


def upsample_pyramid(alpha, target: int) -> np.ndarray:
    """Expand a square map to ``target`` px by repeated 2x bilinear steps.

    The target must be the source size times a power of two. Total mass is
    renormalized to the source mass afterwards.
    """
    a = np.asarray(alpha, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidArgumentError(f"expected a square map, got {a.shape}")
    src = a.shape[0]
    if target < src or target % src != 0:
        raise InvalidArgumentError(
            f"target {target} is not an integer multiple of source {src}")
    factor = target // src
    if factor & (factor - 1):
        raise InvalidArgumentError(
            f"scale factor {factor} is not a power of two")
    mass = a.sum()
    while a.shape[0] < target:
        a = _expand2(a)
    out_mass = a.sum()
    if out_mass > 0:
        a = a * (mass / out_mass)
    return a


def attention_mass_in_region(alpha, regions, grid: GridConfig = GridConfig(),
                             dilation_m: float = MASS_DILATION_M) -> float:
    """Total attention weight within ``dilation_m`` of any agent-frame box.

    ``alpha`` may be at any resolution that divides the grid's; cell centers
    are placed accordingly. Distance to a box is the Euclidean distance to
    its rectangle (zero inside).
    """
    a = np.asarray(alpha, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidArgumentError(f"expected a square map, got {a.shape}")
    if grid.resolution % a.shape[0] != 0:
        raise InvalidArgumentError(
            f"map size {a.shape[0]} does not divide grid resolution")
    if not regions:
        return 0.0
    factor = grid.resolution // a.shape[0]
    centers = grid.cell_centers(factor)
    mask = np.zeros(a.shape, dtype=bool)
    for box in regions:
        d = centers - np.asarray(box.center, dtype=np.float64)
        c, s = np.cos(box.heading), np.sin(box.heading)
        local_x = d[..., 0] * c + d[..., 1] * s
        local_y = -d[..., 0] * s + d[..., 1] * c
        ex = np.maximum(np.abs(local_x) - box.length / 2, 0.0)
        ey = np.maximum(np.abs(local_y) - box.width / 2, 0.0)
        mask |= np.hypot(ex, ey) <= dilation_m
    return float(a[mask].sum())


@dataclass
class MetricsRow:
    variant: str
    count: int
    ade: float
    fde: float
    collision: float
    entropy: float | None       # None when the variant has no attention map

    def as_csv_row(self):
        ent = "" if self.entropy is None else f"{self.entropy:.6f}"
        return [self.variant, str(self.count), f"{self.ade:.6f}",
                f"{self.fde:.6f}", f"{self.collision:.6f}", ent]

    CSV_HEADER = ["variant", "count", "ade", "fde", "collision", "entropy"]


@dataclass
class EvaluationResult:
    row: MetricsRow
    ade_per_example: np.ndarray
    fde_per_example: np.ndarray
    collision_per_example: np.ndarray
    entropy_per_example: np.ndarray | None
    alphas: np.ndarray | None    # (M, h, w) raw attention maps


def evaluate_model(model: DrivingModel, examples, batch_size: int = 8) -> EvaluationResult:
    """Run the model over ``examples`` and aggregate MetricsRow statistics."""
    if not examples:
        raise InvalidArgumentError("cannot evaluate on an empty example list")
    ades, fdes, cols, ents, alphas = [], [], [], [], []
    has_attention = model.variant.has_attention
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        channels = np.stack([ex.channels for ex in chunk])
        rollout = model.rollout(channels)
        wp = rollout.waypoints_m.numpy()
        probs = 1.0 / (1.0 + np.exp(-rollout.box_logits.numpy().astype(np.float64)))
        if has_attention:
            alphas.append(rollout.alpha.numpy())
        for i, ex in enumerate(chunk):
            gt = ex.expert_future[:, :2].astype(np.float64)
            ades.append(ade(wp[i], gt))
            fdes.append(fde(wp[i], gt))
            cols.append(collision_rate(probs[i], ex.future_object_occupancy))
            if has_attention:
                ents.append(attention_entropy(alphas[-1][i]))
    row = MetricsRow(
        variant=model.variant.label(), count=len(examples),
        ade=float(np.mean(ades)), fde=float(np.mean(fdes)),
        collision=float(np.mean(cols)),
        entropy=float(np.mean(ents)) if has_attention else None)
    return EvaluationResult(
        row=row,
        ade_per_example=np.asarray(ades),
        fde_per_example=np.asarray(fdes),
        collision_per_example=np.asarray(cols),
        entropy_per_example=np.asarray(ents) if has_attention else None,
        alphas=np.concatenate(alphas) if alphas else None)


def paired_bootstrap_ci(a: np.ndarray, b: np.ndarray, n_resamples: int = 2000,
                        seed: int = 0, confidence: float = 0.95):
    """Percentile CI for mean(a - b) under paired resampling."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise InvalidArgumentError("paired bootstrap needs equal nonempty 1-D arrays")
    diff = a - b
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, diff.size, size=(n_resamples, diff.size))
    means = diff[idx].mean(axis=1)
    tail = (1.0 - confidence) / 2
    lo, hi = np.quantile(means, [tail, 1.0 - tail])
    return float(lo), float(hi)


def constant_velocity_baseline(past: np.ndarray, k_steps: int, dt: float) -> np.ndarray:
    """(K, 2) agent-frame waypoints extrapolating the latest past velocity.

    ``past`` holds agent-frame history poses, oldest first, ending at the
    current pose (the origin).
    """
    past = np.asarray(past, dtype=np.float64)
    if past.ndim != 2 or past.shape[0] < 2:
        raise InvalidArgumentError("baseline needs at least two past poses")
    v = (past[-1, :2] - past[-2, :2]) / dt
    steps = np.arange(1, k_steps + 1, dtype=np.float64)[:, None]
    return past[-1, :2] + steps * (v * dt)
