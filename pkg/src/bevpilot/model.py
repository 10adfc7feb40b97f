"""Trajectory prediction network family.

Three wirings share one recurrent generator:

- ``none``: the generator consumes features of the whole input stack.
- ``vanilla``: per-cell soft attention reweights those features first.
- ``bottleneck``: a dense branch encodes only the static context channels,
  everything else must pass through attention, get pooled into a single
  vector z, and re-enter the generator broadcast to every cell.

All tensors are batched NHWC.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidArgumentError
from .nn import MLP, Conv2d, SpatialNorm
from .raster import (CHANNEL_NAMES, DENSE_SUBSET_NAMES, LIGHT_CHANNEL_SLICE,
                     OBJECT_CHANNEL_SLICE, ROLLOUT_FACTOR, GridConfig)
from .scenes import K_STEPS

FEATURE_DEPTH = 32
BOTTLENECK_DIM = 32
RNN_DEPTH = 32
MLP_HIDDEN = 64

ATTENTION_MODES = ("none", "vanilla", "bottleneck")
_DENSE_COUNT = len(DENSE_SUBSET_NAMES)


@dataclass(frozen=True)
class VariantConfig:
    attention_mode: str = "bottleneck"
    atrous: bool = True
    positional_encoding: bool = True
    object_branch: bool = False

    def __post_init__(self):
        if self.attention_mode not in ATTENTION_MODES:
            raise InvalidArgumentError(
                f"attention_mode must be one of {ATTENTION_MODES}")
        if self.attention_mode != "bottleneck":
            if self.atrous or self.positional_encoding or self.object_branch:
                raise InvalidArgumentError(
                    "atrous/positional/object flags apply to the bottleneck mode only")

    @property
    def has_attention(self) -> bool:
        return self.attention_mode != "none"

    def label(self) -> str:
        if self.attention_mode == "none":
            return "attn_none"
        if self.attention_mode == "vanilla":
            return "attn_vanilla"
        parts = ["bneck"]
        if not self.atrous:
            parts.append("no_atrous")
        if not self.positional_encoding:
            parts.append("no_pe")
        if self.object_branch:
            parts.append("object")
        return "_".join(parts) if len(parts) > 1 else "bneck_full"


PRESETS = {
    "A": VariantConfig("none", False, False, False),
    "B": VariantConfig("vanilla", False, False, False),
    "bottleneck": VariantConfig("bottleneck", True, True, False),
    "bottleneck-noatrous": VariantConfig("bottleneck", False, True, False),
    "bottleneck-nope": VariantConfig("bottleneck", True, False, False),
    "bottleneck-object": VariantConfig("bottleneck", True, True, True),
}


def parse_variant(text: str) -> VariantConfig:
    """Preset name or '[attention=]mode[,atrous=0|1][,pe=0|1][,object=0|1]'."""
    text = text.strip()
    if text in PRESETS:
        return PRESETS[text]
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if parts and parts[0].startswith("attention="):
        parts[0] = parts[0][len("attention="):]
    if not parts or parts[0] not in ATTENTION_MODES:
        raise InvalidArgumentError(f"unknown variant {text!r}")
    mode = parts[0]
    flags = {"atrous": mode == "bottleneck", "pe": mode == "bottleneck",
             "object": False}
    for p in parts[1:]:
        if "=" not in p:
            raise InvalidArgumentError(f"bad variant flag {p!r}")
        key, _, val = p.partition("=")
        if key not in flags or val not in ("0", "1", "on", "off"):
            raise InvalidArgumentError(f"bad variant flag {p!r}")
        flags[key] = val in ("1", "on")
    return VariantConfig(mode, flags["atrous"], flags["pe"], flags["object"])


def avg_pool2(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    return ad.mean_axes(ad.reshape(x, (n, h // 2, 2, w // 2, 2, c)), (2, 4))


class FeatureNet:
    """Two stride-2 stages with projection skips, then three 3x3 layers."""

    def __init__(self, rng, in_channels: int, depth: int = FEATURE_DEPTH,
                 dtype=np.float32):
        self.in_channels = in_channels
        self.stage1 = Conv2d(rng, 3, 3, in_channels, depth, stride=2, dtype=dtype)
        self.skip1 = Conv2d(rng, 1, 1, in_channels, depth, dtype=dtype)
        self.stage2 = Conv2d(rng, 3, 3, depth, depth, stride=2, dtype=dtype)
        self.skip2 = Conv2d(rng, 1, 1, depth, depth, dtype=dtype)
        self.post = [Conv2d(rng, 3, 3, depth, depth, dtype=dtype) for _ in range(3)]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_channels:
            raise InvalidArgumentError(
                f"expected {self.in_channels} input channels, got {x.shape[-1]}")
        h = ad.relu(ad.add(self.stage1(x), self.skip1(avg_pool2(x))))
        h = ad.relu(ad.add(self.stage2(h), self.skip2(avg_pool2(h))))
        for conv in self.post:
            h = ad.relu(conv(h))
        return h

    def named_parameters(self, prefix: str = ""):
        yield from self.stage1.named_parameters(f"{prefix}.stage1")
        yield from self.skip1.named_parameters(f"{prefix}.skip1")
        yield from self.stage2.named_parameters(f"{prefix}.stage2")
        yield from self.skip2.named_parameters(f"{prefix}.skip2")
        for i, conv in enumerate(self.post):
            yield from conv.named_parameters(f"{prefix}.post{i}")


class VanillaAttention:
    """Per-cell scoring MLP; each cell sees only its own feature vector."""

    def __init__(self, rng, depth: int, dtype=np.float32):
        self.depth = depth
        self.mlp = MLP(rng, (depth, MLP_HIDDEN, 1), dtype=dtype)

    def __call__(self, features: Tensor):
        n, h, w, d = features.shape
        flat = ad.reshape(features, (n * h * w, d))
        logits = ad.reshape(self.mlp(flat), (n, h, w))
        alpha = ad.spatial_softmax(logits)
        attended = ad.mul(features, ad.reshape(alpha, (n, h, w, 1)))
        return alpha, attended

    def named_parameters(self, prefix: str = ""):
        yield from self.mlp.named_parameters(f"{prefix}.score")


class AtrousAttention:
    """Three parallel dilated branches widen the scoring receptive field.

    Branch receptive fields: 1x1, 5x5 (rate 2), 9x9 (rate 4).  Each branch is
    normalized across cells before the merge so no branch drowns the others.
    """

    def __init__(self, rng, depth: int, dtype=np.float32):
        self.depth = depth
        self.branch1 = Conv2d(rng, 1, 1, depth, depth, dtype=dtype)
        self.branch2 = Conv2d(rng, 3, 3, depth, depth, dilation=2, dtype=dtype)
        self.branch3 = Conv2d(rng, 3, 3, depth, depth, dilation=4, dtype=dtype)
        self.norms = [SpatialNorm(depth, dtype=dtype) for _ in range(3)]
        self.merge = Conv2d(rng, 1, 1, 3 * depth, 1, dtype=dtype)

    def __call__(self, features: Tensor):
        n, h, w, _ = features.shape
        branches = []
        for conv, norm in zip((self.branch1, self.branch2, self.branch3), self.norms):
            branches.append(ad.relu(norm(conv(features))))
        logits = ad.reshape(self.merge(ad.concat(branches, axis=3)), (n, h, w))
        alpha = ad.spatial_softmax(logits)
        attended = ad.mul(features, ad.reshape(alpha, (n, h, w, 1)))
        return alpha, attended

    def named_parameters(self, prefix: str = ""):
        yield from self.branch1.named_parameters(f"{prefix}.branch1")
        yield from self.branch2.named_parameters(f"{prefix}.branch2")
        yield from self.branch3.named_parameters(f"{prefix}.branch3")
        for i, norm in enumerate(self.norms):
            yield from norm.named_parameters(f"{prefix}.norm{i}")
        yield from self.merge.named_parameters(f"{prefix}.merge")


_BASIS_CACHE = {}


def positional_basis(w: int, h: int, d: int, dtype=np.float64) -> np.ndarray:
    """(h, w, d) Fourier features: four function types over d/4 wavelengths.

    Wavelength index u runs over {4i/d : i = 0..d/4-1}; frequencies 1000**u.
    Cell coordinates are measured in cells (x along columns, y along rows).
    """
    if d % 4 != 0:
        raise InvalidArgumentError("positional basis depth must be divisible by 4")
    key = (w, h, d, np.dtype(dtype).str)
    if key not in _BASIS_CACHE:
        u = 4.0 * np.arange(d // 4) / d
        freq = 1000.0 ** u
        x = np.arange(w, dtype=np.float64)[None, :, None] / freq
        y = np.arange(h, dtype=np.float64)[:, None, None] / freq
        x = np.broadcast_to(x, (h, w, d // 4))
        y = np.broadcast_to(y, (h, w, d // 4))
        basis = np.concatenate([np.sin(x), np.cos(x), np.sin(y), np.cos(y)], axis=2)
        _BASIS_CACHE[key] = np.ascontiguousarray(basis, dtype=dtype)
    return _BASIS_CACHE[key]


class BottleneckEncoder:
    """Pool per-cell encodings of attended features into a single vector."""

    def __init__(self, rng, in_depth: int, positional: bool,
                 out_dim: int = BOTTLENECK_DIM, pool: str = "mean",
                 dtype=np.float32):
        self.in_depth = in_depth
        self.positional = positional
        self.pool = pool
        self.dtype = dtype
        g_in = in_depth + (FEATURE_DEPTH if positional else 0)
        self.g = MLP(rng, (g_in, MLP_HIDDEN, out_dim), dtype=dtype)

    def __call__(self, attended: Tensor) -> Tensor:
        n, h, w, d = attended.shape
        if d != self.in_depth:
            raise InvalidArgumentError(
                f"encoder expects depth {self.in_depth}, got {d}")
        x = attended
        if self.positional:
            basis = positional_basis(w, h, FEATURE_DEPTH, self.dtype)
            tile = Tensor(np.broadcast_to(basis, (n, h, w, FEATURE_DEPTH)).copy())
            x = ad.concat([x, tile], axis=3)
        flat = ad.reshape(x, (n * h * w, x.shape[-1]))
        enc = ad.reshape(self.g(flat), (n, h, w, self.g.widths[-1]))
        return ad.spatial_pool(enc, mode=self.pool)

    def named_parameters(self, prefix: str = ""):
        yield from self.g.named_parameters(f"{prefix}.g")


class AgentRNN:
    """Iterative waypoint decoder over the rollout grid.

    The static feature map passes through conv_a once; per-iteration planes
    (memory, previous box, step index) go through conv_b and the two sums are
    equivalent to one convolution over the concatenated stack.
    """

    def __init__(self, rng, static_depth: int, depth: int = RNN_DEPTH,
                 k_steps: int = K_STEPS, dtype=np.float32):
        self.k_steps = k_steps
        self.dtype = dtype
        self.conv_a = Conv2d(rng, 3, 3, static_depth, depth, dtype=dtype)
        self.conv_b = Conv2d(rng, 3, 3, 3, depth, bias=False, dtype=dtype)
        self.conv_mid = Conv2d(rng, 3, 3, depth, depth, dtype=dtype)
        self.head = Conv2d(rng, 1, 1, depth, 1, dtype=dtype)
        self.heading_mlp = MLP(rng, (depth, MLP_HIDDEN, 2), dtype=dtype)

    def precompute(self, static_features: Tensor) -> Tensor:
        return self.conv_a(static_features)

    def step(self, k: int, pre: Tensor, memory: Tensor, prev_box: Tensor):
        if not 1 <= k <= self.k_steps:
            raise InvalidArgumentError(f"step index {k} outside 1..{self.k_steps}")
        n, h, w, _ = pre.shape
        plane = np.full((n, h, w, 1), k / self.k_steps, dtype=self.dtype)
        dyn = ad.concat([ad.reshape(memory, (n, h, w, 1)),
                         ad.reshape(prev_box, (n, h, w, 1)),
                         Tensor(plane)], axis=3)
        hidden = ad.relu(ad.add(pre, self.conv_b(dyn)))
        hidden = ad.relu(self.conv_mid(hidden))
        logits = ad.reshape(self.head(hidden), (n, h, w))
        box = ad.sigmoid(logits)
        point = ad.soft_argmax(ad.spatial_softmax(logits))
        heading = self.heading_mlp(ad.spatial_pool(hidden))
        return logits, box, point, heading

    def named_parameters(self, prefix: str = ""):
        yield from self.conv_a.named_parameters(f"{prefix}.conv_a")
        yield from self.conv_b.named_parameters(f"{prefix}.conv_b")
        yield from self.conv_mid.named_parameters(f"{prefix}.conv_mid")
        yield from self.head.named_parameters(f"{prefix}.head")
        yield from self.heading_mlp.named_parameters(f"{prefix}.heading")


@dataclass
class Rollout:
    """Batched prediction with every intermediate needed for training/eval."""

    waypoints_cells: Tensor       # (N, K, 2) rollout-grid row/col
    waypoints_m: Tensor           # (N, K, 2) agent-frame meters
    headings: Tensor              # (N, K, 2) unit (cos, sin) of relative heading
    box_logits: Tensor            # (N, K, h, w)
    alpha: Tensor = None          # (N, h, w) when attention is enabled
    z: Tensor = None              # (N, d_z) bottleneck vector
    object_alpha: Tensor = None
    object_occupancy_logits: Tensor = None   # (N, h, w, K)

    def waypoints_meters(self) -> np.ndarray:
        return self.waypoints_m.numpy()

    def alpha_numpy(self):
        return None if self.alpha is None else self.alpha.numpy()


class DrivingModel:
    """One trainable network instance for a fixed VariantConfig."""

    def __init__(self, variant: VariantConfig, seed: int = 0,
                 grid: GridConfig = GridConfig(), dtype=np.float32):
        self.variant = variant
        self.seed = int(seed)
        self.grid = grid
        self.dtype = dtype
        self.k_steps = K_STEPS
        rng = np.random.default_rng([self.seed, 0])
        n_ch = len(CHANNEL_NAMES)
        d = FEATURE_DEPTH

        self.feature_net = FeatureNet(rng, n_ch, d, dtype=dtype)
        self.dense_net = None
        self.attention = None
        self.encoder = None
        self.object_net = None
        self.object_attention = None
        self.occupancy_head = None

        attn_depth = d
        if variant.attention_mode == "bottleneck":
            self.dense_net = FeatureNet(rng, _DENSE_COUNT, d, dtype=dtype)
            if variant.object_branch:
                n_obj = OBJECT_CHANNEL_SLICE.stop - OBJECT_CHANNEL_SLICE.start
                self.object_net = FeatureNet(rng, n_obj, d, dtype=dtype)
                self.object_attention = AtrousAttention(rng, d, dtype=dtype)
                self.occupancy_head = Conv2d(rng, 1, 1, d, self.k_steps, dtype=dtype)
                attn_depth = 2 * d
            cls = AtrousAttention if variant.atrous else VanillaAttention
            self.attention = cls(rng, attn_depth, dtype=dtype)
            self.encoder = BottleneckEncoder(
                rng, attn_depth, variant.positional_encoding, dtype=dtype)
            static_depth = d + BOTTLENECK_DIM
        elif variant.attention_mode == "vanilla":
            self.attention = VanillaAttention(rng, d, dtype=dtype)
            static_depth = d
        else:
            static_depth = d
        self.rnn = AgentRNN(rng, static_depth, dtype=dtype)

        res = grid.resolution // ROLLOUT_FACTOR
        self._cell_origin = grid.cell_origin(ROLLOUT_FACTOR)
        self._cell_size = grid.cell_size(ROLLOUT_FACTOR)
        self._rollout_res = res

    def named_parameters(self) -> dict:
        out = {}
        groups = [("features", self.feature_net)]
        if self.dense_net is not None:
            groups.append(("dense", self.dense_net))
        if self.object_net is not None:
            groups.append(("object_features", self.object_net))
            groups.append(("object_attention", self.object_attention))
            groups.append(("occupancy", self.occupancy_head))
        if self.attention is not None:
            groups.append(("attention", self.attention))
        if self.encoder is not None:
            groups.append(("encoder", self.encoder))
        groups.append(("rnn", self.rnn))
        for name, module in groups:
            for pname, p in module.named_parameters(name):
                out[pname] = p
        return out

    def _prepare_input(self, channels) -> np.ndarray:
        arr = np.asarray(channels, dtype=self.dtype)
        if arr.ndim == 3:
            arr = arr[None, ...]
        if arr.ndim != 4 or arr.shape[1:] != (self.grid.resolution,
                                              self.grid.resolution,
                                              len(CHANNEL_NAMES)):
            raise InvalidArgumentError(
                f"raster stack must be (N, {self.grid.resolution}, "
                f"{self.grid.resolution}, {len(CHANNEL_NAMES)}), got {arr.shape}")
        return arr

    def rollout(self, channels, zero_bottleneck: bool = False) -> Rollout:
        """Run the full network; accepts (res,res,17) or batched input."""
        arr = self._prepare_input(channels)
        n = arr.shape[0]
        x = Tensor(arr)
        alpha = z = obj_alpha = occ_logits = None

        if self.variant.attention_mode == "bottleneck":
            dense = self.dense_net(Tensor(arr[..., :_DENSE_COUNT].copy()))
            feats = self.feature_net(x)
            if self.variant.object_branch:
                obj = self.object_net(Tensor(arr[..., OBJECT_CHANNEL_SLICE].copy()))
                obj_alpha, obj_attended = self.object_attention(obj)
                occ_logits = self.occupancy_head(obj_attended)
                feats = ad.concat([feats, obj_attended], axis=3)
            alpha, attended = self.attention(feats)
            z = self.encoder(attended)
            if zero_bottleneck:
                z = Tensor(np.zeros(z.shape, dtype=self.dtype))
            h, w = dense.shape[1], dense.shape[2]
            static = ad.concat([dense, ad.spatial_broadcast(z, h, w)], axis=3)
        else:
            feats = self.feature_net(x)
            if self.variant.attention_mode == "vanilla":
                alpha, attended = self.attention(feats)
                static = attended
            else:
                static = feats
        return self._generate(arr, static, alpha, z, obj_alpha, occ_logits, n)

    def _generate(self, arr, static, alpha, z, obj_alpha, occ_logits, n) -> Rollout:
        res = self._rollout_res
        f = ROLLOUT_FACTOR
        box0 = arr[..., CHANNEL_NAMES.index("current_agent_box")]
        box0 = box0.reshape(n, res, f, res, f).max(axis=(2, 4))
        memory = Tensor(np.zeros((n, res, res), dtype=self.dtype))
        prev_box = Tensor(np.ascontiguousarray(box0, dtype=self.dtype))
        pre = self.rnn.precompute(static)

        points, headings, logit_maps = [], [], []
        for k in range(1, self.k_steps + 1):
            logits, box, point, heading = self.rnn.step(k, pre, memory, prev_box)
            memory = ad.maximum(memory, ad.bilinear_splat(point, res, res))
            prev_box = box
            points.append(ad.reshape(point, (n, 1, 2)))
            headings.append(ad.reshape(heading, (n, 1, 2)))
            logit_maps.append(ad.reshape(logits, (n, 1, res, res)))

        cells = ad.concat(points, axis=1)
        origin = np.asarray(self._cell_origin, dtype=self.dtype)
        meters = ad.mul(ad.sub(origin, cells), self._cell_size)
        raw = ad.concat(headings, axis=1)
        norm2 = ad.mul(ad.mean_axes(ad.mul(raw, raw), (2,)), 2.0)
        inv = ad.pow_const(ad.add(norm2, 1e-12), -0.5)
        unit = ad.mul(raw, ad.reshape(inv, (n, self.k_steps, 1)))
        return Rollout(
            waypoints_cells=cells, waypoints_m=meters, headings=unit,
            box_logits=ad.concat(logit_maps, axis=1), alpha=alpha, z=z,
            object_alpha=obj_alpha, object_occupancy_logits=occ_logits)
