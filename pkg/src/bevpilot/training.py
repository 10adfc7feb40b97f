"""Imitation learning loop.

The model is trained to reproduce expert futures: waypoint positions in
meters, relative headings, the agent box footprint per step, and (for the
object branch) future object occupancy. Batching, shuffling, and parameter
init are all seeded, so a rerun with the same config is bit-identical.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .checkpoint import save_checkpoint
from .dataset import Example
from .errors import DivergenceError, InvalidArgumentError
from .model import DrivingModel, Rollout
from .nn import Adam
from .raster import ROLLOUT_FACTOR, GridConfig, agent_box_occupancy

POSITION_WEIGHT = 1.0
HEADING_WEIGHT = 0.5
BOX_WEIGHT = 1.0
OCCUPANCY_WEIGHT = 0.5


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    lr_decay: float = 0.9999
    seed: int = 0
    checkpoint_every: int = 0   # 0 disables intermediate checkpoints

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidArgumentError("steps must be >= 0")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be >= 1")
        if self.checkpoint_every < 0:
            raise InvalidArgumentError("checkpoint_every must be >= 0")


@dataclass
class LossReport:
    total: float
    position: float     # mean squared waypoint displacement, m^2
    heading: float      # 1 - mean cosine of the heading error
    box: float          # binary cross-entropy of the box footprint
    occupancy: float    # binary cross-entropy of object occupancy (0 if unused)

    def as_row(self):
        return [self.total, self.position, self.heading, self.box, self.occupancy]


@dataclass
class Targets:
    """Precomputed per-example training targets, stacked example-major."""

    channels: np.ndarray        # (M, res, res, 17)
    waypoints_m: np.ndarray     # (M, K, 2)
    headings: np.ndarray        # (M, K, 2) unit (cos, sin)
    box_occupancy: np.ndarray   # (M, K, g, g)
    object_occupancy: np.ndarray  # (M, g, g, K)

    def __len__(self):
        return self.channels.shape[0]

    def batch(self, idx):
        return Targets(self.channels[idx], self.waypoints_m[idx],
                       self.headings[idx], self.box_occupancy[idx],
                       self.object_occupancy[idx])


def build_targets(examples: list[Example], grid: GridConfig = GridConfig()) -> Targets:
    if not examples:
        raise InvalidArgumentError("cannot train on an empty example list")
    channels = np.stack([ex.channels for ex in examples])
    futures = np.stack([ex.expert_future for ex in examples]).astype(np.float64)
    waypoints = futures[..., :2].astype(np.float32)
    headings = np.stack([np.cos(futures[..., 2]),
                         np.sin(futures[..., 2])], axis=-1).astype(np.float32)
    boxes = np.stack([agent_box_occupancy(ex.expert_future, grid, ROLLOUT_FACTOR)
                      for ex in examples])
    objects = np.stack([np.moveaxis(ex.future_object_occupancy, 0, -1)
                        for ex in examples])
    return Targets(channels, waypoints, headings, boxes, objects)


def imitation_loss(rollout: Rollout, targets: Targets):
    """Weighted sum of the four objectives; returns (scalar Tensor, LossReport)."""
    dp = ad.sub(rollout.waypoints_m, targets.waypoints_m)
    position = ad.mul(ad.tmean(ad.mul(dp, dp)), 2.0)
    dot = ad.mul(ad.tmean(ad.mul(rollout.headings, targets.headings)), 2.0)
    heading = ad.sub(1.0, dot)
    box = ad.bce_with_logits(rollout.box_logits, targets.box_occupancy)
    total = ad.add(ad.add(ad.mul(position, POSITION_WEIGHT),
                          ad.mul(heading, HEADING_WEIGHT)),
                   ad.mul(box, BOX_WEIGHT))
    occ_value = 0.0
    if rollout.object_occupancy_logits is not None:
        occ = ad.bce_with_logits(rollout.object_occupancy_logits,
                                 targets.object_occupancy)
        total = ad.add(total, ad.mul(occ, OCCUPANCY_WEIGHT))
        occ_value = occ.item()
    report = LossReport(total.item(), position.item(), heading.item(),
                        box.item(), occ_value)
    return total, report


@dataclass
class TrainResult:
    steps: int
    final: LossReport | None
    history: list = field(default_factory=list)   # (step, lr, LossReport)


def _batch_indices(count: int, batch_size: int, steps: int, seed: int):
    """Seeded epoch permutations cut into fixed-size batches."""
    rng = np.random.default_rng([seed, 7])
    size = min(batch_size, count)
    per_epoch = count // size
    produced = 0
    while produced < steps:
        perm = rng.permutation(count)
        for b in range(per_epoch):
            if produced == steps:
                return
            yield perm[b * size:(b + 1) * size]
            produced += 1


def train(model: DrivingModel, examples: list[Example], config: TrainConfig,
          log_path=None, checkpoint_path=None) -> TrainResult:
    """Optimize ``model`` in place; optionally stream a CSV log and checkpoints.

    ``checkpoint_path`` always receives the final state, plus every
    ``checkpoint_every`` steps when that is nonzero. A non-finite loss or
    gradient aborts with DivergenceError naming the failing step.
    """
    targets = build_targets(examples, model.grid)
    optimizer = Adam(model.named_parameters(), lr=config.lr, decay=config.lr_decay)
    result = TrainResult(steps=config.steps, final=None)

    log_file = open(log_path, "w", newline="") if log_path else None
    writer = None
    if log_file:
        writer = csv.writer(log_file)
        writer.writerow(["step", "lr", "total", "position", "heading", "box",
                         "occupancy"])
    try:
        for step, idx in enumerate(
                _batch_indices(len(targets), config.batch_size, config.steps,
                               config.seed),
                start=1):
            batch = targets.batch(np.sort(idx))
            lr = optimizer.current_lr
            rollout = model.rollout(batch.channels)
            loss, report = imitation_loss(rollout, batch)
            if not math.isfinite(report.total):
                raise DivergenceError(f"non-finite loss at step {step}")
            backward(loss)
            try:
                optimizer.step()
            except DivergenceError as exc:
                raise DivergenceError(f"step {step}: {exc}") from exc
            optimizer.zero_grad()
            result.history.append((step, lr, report))
            result.final = report
            if writer:
                writer.writerow([step, f"{lr:.10g}"] +
                                [f"{v:.10g}" for v in report.as_row()])
            if (checkpoint_path and config.checkpoint_every
                    and step % config.checkpoint_every == 0
                    and step != config.steps):
                save_checkpoint(model, checkpoint_path, {"step": step})
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path, {"step": config.steps})
    return result


def evaluate_loss(model: DrivingModel, examples: list[Example],
                  batch_size: int = 8) -> LossReport:
    """Mean loss over ``examples`` without updating parameters."""
    targets = build_targets(examples, model.grid)
    n = len(targets)
    sums = np.zeros(5)
    seen = 0
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        batch = targets.batch(idx)
        rollout = model.rollout(batch.channels)
        _, report = imitation_loss(rollout, batch)
        sums += np.asarray(report.as_row()) * len(idx)
        seen += len(idx)
    vals = sums / seen
    return LossReport(*vals)
