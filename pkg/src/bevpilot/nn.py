"""Trainable building blocks on top of the autodiff engine.

Layers own their parameter tensors and expose ``named_parameters(prefix)``
so a model can assemble one flat, deterministically ordered name->Tensor
map for the optimizer and for checkpointing.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DivergenceError, InvalidArgumentError


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                   dtype=np.float64) -> np.ndarray:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    def named_parameters(self, prefix: str = ""):
        raise NotImplementedError


class Dense(Layer):
    """Affine map ``x @ w + b`` on row-batched inputs ``(n, din)``."""

    def __init__(self, rng, din: int, dout: int, dtype=np.float64):
        self.din, self.dout = din, dout
        self.w = Tensor(glorot_uniform(rng, (din, dout), din, dout, dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(dout, dtype=dtype), requires_grad=True)

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.din:
            raise InvalidArgumentError(
                f"Dense({self.din}->{self.dout}) got input shape {x.shape}")
        return ad.add(ad.matmul(x, self.w), self.b)

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


class MLP(Layer):
    """Chain of Dense layers with ReLU between them, linear at the end.

    ``widths`` lists every layer width including input and output, e.g.
    ``(32, 64, 1)`` is one hidden layer of 64 units.
    """

    def __init__(self, rng, widths, dtype=np.float64):
        if len(widths) < 2:
            raise InvalidArgumentError("MLP needs at least input and output widths")
        self.widths = tuple(widths)
        self.layers = [Dense(rng, widths[i], widths[i + 1], dtype)
                       for i in range(len(widths) - 1)]

    def __call__(self, x) -> Tensor:
        h = ad.as_tensor(x)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ad.relu(h)
        return h

    def named_parameters(self, prefix: str = ""):
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.l{i}")


class Conv2d(Layer):
    """Same-padded conv layer; kernel ``(kh, kw, cin, cout)``."""

    def __init__(self, rng, kh: int, kw: int, cin: int, cout: int,
                 stride: int = 1, dilation: int = 1, bias: bool = True,
                 dtype=np.float64):
        fan_in = kh * kw * cin
        fan_out = kh * kw * cout
        self.stride, self.dilation = stride, dilation
        self.w = Tensor(glorot_uniform(rng, (kh, kw, cin, cout), fan_in, fan_out,
                                       dtype), requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x) -> Tensor:
        return ad.conv2d(x, self.w, self.b, stride=self.stride,
                         dilation=self.dilation)

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}.w", self.w
        if self.b is not None:
            yield f"{prefix}.b", self.b


class SpatialNorm(Layer):
    """Per-channel normalization over the spatial cells of one map.

    Each channel is standardized over its h*w cells and rescaled by a
    learned gain/shift. Stands in for batch normalization at batch sizes
    where batch statistics are too noisy to be usable.
    """

    def __init__(self, channels: int, eps: float = 1e-5, dtype=np.float64):
        self.eps = eps
        self.gain = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        axes = (1, 2) if x.ndim == 4 else (0, 1)
        mu = ad.mean_axes(x, axes)
        if x.ndim == 4:
            mu = ad.reshape(mu, (x.shape[0], 1, 1, x.shape[3]))
        centered = ad.sub(x, mu)
        var = ad.mean_axes(ad.mul(centered, centered), axes)
        if x.ndim == 4:
            var = ad.reshape(var, (x.shape[0], 1, 1, x.shape[3]))
        inv = ad.pow_const(ad.add(var, self.eps), -0.5)
        return ad.add(ad.mul(ad.mul(centered, inv), self.gain), self.shift)

    def named_parameters(self, prefix: str = ""):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.shift", self.shift


class Adam:
    """Adam with bias correction and an exponentially decaying learning rate.

    Step ``t`` (1-based) uses ``lr * decay**(t - 1)``, so the configured
    base rate applies on the first step and the rate never increases.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 decay: float = 0.9999):
        if lr <= 0 or not (0 < decay <= 1):
            raise InvalidArgumentError("lr must be positive and decay in (0, 1]")
        self.params = dict(params)
        self.lr, self.beta1, self.beta2, self.eps, self.decay = lr, beta1, beta2, eps, decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    @property
    def current_lr(self) -> float:
        """Rate the *next* step will use."""
        return self.lr * self.decay ** self.t

    def step(self):
        """Apply one update from the gradients currently on the parameters."""
        self.t += 1
        lr_t = self.lr * self.decay ** (self.t - 1)
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise DivergenceError(f"non-finite gradient for parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr_t * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - update.astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
