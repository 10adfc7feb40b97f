"""Scene mutations and paired what-if rollouts.

A mutation edits the symbolic scene (drop objects, flip a light, remove a
sign), the expert plan is recomputed, and the model runs on both rasters.
The report quantifies how much attention sat on the mutated entity before
and after, and how far the predicted trajectory moved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, UnsupportedVariantError
from .metrics import (MASS_DILATION_M, ade, attention_mass_in_region,
                      upsample_pyramid)
from .model import DrivingModel, Rollout
from .raster import GridConfig, poses_to_agent, rasterize
from .scenes import (LIGHT_STATES, OrientedBox, VectorScene, refresh_derived,
                     validate_scene)

MUTATION_KINDS = ("identity", "remove_objects", "remove_object_by_id",
                  "set_light_state", "remove_sign")


@dataclass(frozen=True)
class Mutation:
    kind: str
    object_id: int | None = None
    light_state: str | None = None

    def __post_init__(self):
        if self.kind not in MUTATION_KINDS:
            raise InvalidArgumentError(
                f"unknown mutation kind {self.kind!r}; expected one of {MUTATION_KINDS}")
        if self.kind == "remove_object_by_id" and self.object_id is None:
            raise InvalidArgumentError("remove_object_by_id needs object_id")
        if self.kind == "set_light_state":
            if self.light_state not in LIGHT_STATES:
                raise InvalidArgumentError(
                    f"light_state must be one of {LIGHT_STATES}")

    def describe(self) -> str:
        if self.kind == "remove_object_by_id":
            return f"remove_object_by_id({self.object_id})"
        if self.kind == "set_light_state":
            return f"set_light_state({self.light_state})"
        return self.kind


def parse_mutation(text: str) -> Mutation:
    """'identity', 'remove_objects', 'remove_object_by_id=N',
    'set_light_state=green', or 'remove_sign'."""
    name, _, value = text.strip().partition("=")
    if name == "remove_object_by_id":
        if not value.lstrip("-").isdigit():
            raise InvalidArgumentError(f"bad object id {value!r}")
        return Mutation(name, object_id=int(value))
    if name == "set_light_state":
        return Mutation(name, light_state=value)
    if value:
        raise InvalidArgumentError(f"mutation {name!r} takes no value")
    return Mutation(name)


def _object_by_id(scene: VectorScene, object_id: int):
    for obj in scene.objects:
        if obj.object_id == object_id:
            return obj
    raise InvalidArgumentError(
        f"scene has no object with id {object_id}; present: "
        f"{[o.object_id for o in scene.objects]}")


def apply_mutation(scene: VectorScene, mutation: Mutation) -> VectorScene:
    """Return a new valid scene with the mutation applied and expert re-planned.

    The agent's past is part of the observed input and is kept as recorded;
    only the derived plan reacts to the edit.
    """
    out = scene.copy()
    if mutation.kind == "identity":
        return out
    if mutation.kind == "remove_objects":
        if not out.objects:
            raise InvalidArgumentError("scene has no objects to remove")
        out.objects = []
    elif mutation.kind == "remove_object_by_id":
        _object_by_id(out, mutation.object_id)
        out.objects = [o for o in out.objects if o.object_id != mutation.object_id]
    elif mutation.kind == "set_light_state":
        if not out.traffic_lights:
            raise InvalidArgumentError("scene has no traffic light to set")
        for light in out.traffic_lights:
            light.states = tuple([mutation.light_state] * len(light.states))
    elif mutation.kind == "remove_sign":
        if not out.stop_signs:
            raise InvalidArgumentError("scene has no stop sign to remove")
        out.stop_signs = []
    refresh_derived(out)
    validate_scene(out)
    return out


def _agent_frame_box(box: OrientedBox, agent_pose) -> OrientedBox:
    pose = poses_to_agent(np.array([*box.center, box.heading]), agent_pose)
    return OrientedBox(pose[:2], float(pose[2]), box.length, box.width)


def mutation_region(scene: VectorScene, mutation: Mutation) -> list:
    """Agent-frame boxes around everything the mutation touches (pre-edit)."""
    pose = scene.agent_pose
    if mutation.kind == "identity":
        return []
    if mutation.kind == "remove_objects":
        if not scene.objects:
            raise InvalidArgumentError("scene has no objects to remove")
        return [_agent_frame_box(o.current_box(), pose) for o in scene.objects]
    if mutation.kind == "remove_object_by_id":
        obj = _object_by_id(scene, mutation.object_id)
        return [_agent_frame_box(obj.current_box(), pose)]
    if mutation.kind == "set_light_state":
        if not scene.traffic_lights:
            raise InvalidArgumentError("scene has no traffic light to set")
        return [_agent_frame_box(scene.light_band_box(l), pose)
                for l in scene.traffic_lights]
    if not scene.stop_signs:
        raise InvalidArgumentError("scene has no stop sign to remove")
    regions = []
    for sign in scene.stop_signs:
        regions.append(_agent_frame_box(scene.sign_band_box(sign), pose))
        marker = OrientedBox(np.asarray(sign.position, dtype=np.float64),
                             float(pose[2]), 0.7, 0.7)
        regions.append(_agent_frame_box(marker, pose))
    return regions


@dataclass
class CounterfactualReport:
    mutation: Mutation
    base_rollout: Rollout
    mutated_rollout: Rollout
    base_channels: np.ndarray
    mutated_channels: np.ndarray
    alpha_before: np.ndarray      # upsampled to grid resolution
    alpha_after: np.ndarray
    delta_alpha: np.ndarray       # after - before
    regions: list = field(default_factory=list)
    mass_before: float = 0.0
    mass_after: float = 0.0
    trajectory_ade: float = 0.0

    @property
    def mass_drop(self) -> float:
        """Fractional reduction of attention mass in the mutated region."""
        if self.mass_before <= 0.0:
            return 0.0
        return (self.mass_before - self.mass_after) / self.mass_before

    def summary_line(self) -> str:
        return (f"{self.mutation.describe()}: region mass {self.mass_before:.4f}"
                f" -> {self.mass_after:.4f} (drop {self.mass_drop * 100:.1f}%),"
                f" trajectory ADE {self.trajectory_ade:.3f} m")


def counterfactual(model: DrivingModel, scene: VectorScene, mutation: Mutation,
                   grid: GridConfig = GridConfig(),
                   dilation_m: float = MASS_DILATION_M) -> CounterfactualReport:
    """Roll out the model on a scene and its mutated twin and compare.

    An identity mutation yields bitwise-zero deltas: the mutated raster is
    bit-identical, so both rollouts are too.
    """
    if not model.variant.has_attention:
        raise UnsupportedVariantError(
            "counterfactual attention analysis needs an attention variant")
    mutated = apply_mutation(scene, mutation)
    base_channels = rasterize(scene, grid).channels
    mutated_channels = rasterize(mutated, grid).channels
    base_roll = model.rollout(base_channels)
    mut_roll = model.rollout(mutated_channels)

    alpha_b = upsample_pyramid(base_roll.alpha.numpy()[0], grid.resolution)
    alpha_a = upsample_pyramid(mut_roll.alpha.numpy()[0], grid.resolution)
    regions = mutation_region(scene, mutation)
    mass_b = attention_mass_in_region(alpha_b, regions, grid, dilation_m)
    mass_a = attention_mass_in_region(alpha_a, regions, grid, dilation_m)
    traj = ade(base_roll.waypoints_m.numpy()[0], mut_roll.waypoints_m.numpy()[0])
    return CounterfactualReport(
        mutation=mutation, base_rollout=base_roll, mutated_rollout=mut_roll,
        base_channels=base_channels, mutated_channels=mutated_channels,
        alpha_before=alpha_b, alpha_after=alpha_a,
        delta_alpha=alpha_a - alpha_b, regions=regions,
        mass_before=mass_b, mass_after=mass_a, trajectory_ade=traj)
