"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float64 for verification, float32 for training)
and record the operations that produced them. Calling :func:`backward` on a
scalar walks the recorded graph once in reverse topological order and
accumulates gradients into every leaf that was created with
``requires_grad=True``.

The op set is exactly what the driving model needs: elementwise arithmetic
with numpy broadcasting, matmul, a dilated/strided same-padded conv2d,
spatial softmax, pooling, soft-argmax, a bilinear point splat, and a fused
binary cross-entropy. Spatial tensors are laid out ``(N, H, W, C)``; most
ops also accept the unbatched ``(H, W, C)`` form used at the API surface.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError


class Tensor:
    """A node in the computation graph.

    ``data`` is always a numpy array; ``grad`` stays ``None`` until a
    backward pass deposits something. Tensors are treated as immutable once
    created (optimizers build replacement arrays rather than writing through
    views held by the graph).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- introspection --------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """Detached copy of the payload."""
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self):
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Wrap ``x`` as a constant tensor, matching ``like``'s dtype if given."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), requires_grad=False, dtype=dtype)


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Convert a binary op's operands, casting plain numbers to the tensor's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, like=a)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, like=b), b
    return as_tensor(a), as_tensor(b)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# backward engine
# ---------------------------------------------------------------------------

def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    ``loss`` must be scalar. Each graph node's backward rule runs exactly
    once; repeated calls after clearing grads reproduce identical values.
    """
    if loss.size != 1:
        raise InvalidArgumentError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise InvalidArgumentError("loss does not depend on any requires_grad tensor")

    topo: list[Tensor] = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    # anything left in `grads` is a requires_grad interior node that is also
    # a leaf of interest (no backward fn) -- already handled above.


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    data = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), bwd)


def pow_const(a, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a constant exponent."""
    a = as_tensor(a)
    data = a.data ** p

    def bwd(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(data, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bwd(g):
        return (g * data,)

    return _make(data, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def bwd(g):
        return (g / a.data,)

    return _make(data, (a,), bwd)


def cos(a) -> Tensor:
    a = as_tensor(a)
    data = np.cos(a.data)

    def bwd(g):
        return (-g * np.sin(a.data),)

    return _make(data, (a,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0)

    def bwd(g):
        return (g * mask,)

    return _make(data, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    data = np.where(a.data >= 0, data, 1.0 - data)

    def bwd(g):
        return (g * data * (1.0 - data),)

    return _make(data, (a,), bwd)


def maximum(a, b) -> Tensor:
    """Elementwise max; at exact ties the gradient routes to ``a``."""
    a, b = _pair(a, b)
    take_a = a.data >= b.data
    data = np.where(take_a, a.data, b.data)

    def bwd(g):
        return (_unbroadcast(g * take_a, a.shape),
                _unbroadcast(g * ~take_a, b.shape))

    return _make(data, (a, b), bwd)


# ---------------------------------------------------------------------------
# reductions / shape
# ---------------------------------------------------------------------------

def tsum(a) -> Tensor:
    a = as_tensor(a)
    data = np.asarray(a.data.sum(), dtype=a.dtype)

    def bwd(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(data, (a,), bwd)


def tmean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    data = np.asarray(a.data.mean(), dtype=a.dtype)

    def bwd(g):
        return ((np.broadcast_to(g, a.shape) / n).astype(a.dtype),)

    return _make(data, (a,), bwd)


def mean_axes(a, axes: tuple[int, ...]) -> Tensor:
    """Mean over ``axes`` (dropped from the result)."""
    a = as_tensor(a)
    axes = tuple(ax % a.ndim for ax in axes)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    data = a.data.mean(axis=axes)

    def bwd(g):
        ge = np.expand_dims(g, axes)
        return ((np.broadcast_to(ge, a.shape) / n).astype(a.dtype),)

    return _make(data, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _make(data, (a,), bwd)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), bwd)


def matmul(a, b) -> Tensor:
    """2-D matrix product ``(n, k) @ (k, m)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidArgumentError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise InvalidArgumentError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def bwd(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), bwd)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------

def _with_batch(x: Tensor, spatial_ndim: int):
    """Return (array, had_batch) viewing x as batched with given spatial rank."""
    if x.ndim == spatial_ndim:
        return x.data[None, ...], False
    if x.ndim == spatial_ndim + 1:
        return x.data, True
    raise InvalidArgumentError(
        f"expected rank {spatial_ndim} or {spatial_ndim + 1}, got shape {x.shape}")


def same_padding(extent: int, kernel: int, dilation: int, stride: int):
    """TF-style SAME padding: output ceil(extent/stride), asymmetric pad."""
    eff = (kernel - 1) * dilation + 1
    out = -(-extent // stride)
    total = max((out - 1) * stride + eff - extent, 0)
    return out, total // 2, total - total // 2


def conv2d(x, kernel, bias=None, stride: int = 1, dilation: int = 1) -> Tensor:
    """Same-padded 2-D convolution.

    ``x``: ``(N, H, W, Cin)`` or ``(H, W, Cin)``; ``kernel``:
    ``(kh, kw, Cin, Cout)``; optional ``bias``: ``(Cout,)``. Kernel spatial
    extents must be odd and ``stride``/``dilation`` >= 1. With stride 1 the
    spatial extents are preserved; the effective receptive field is
    ``(k - 1) * dilation + 1``.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel, like=x)
    xb, had_batch = _with_batch(x, 3)
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidArgumentError(f"kernel spatial extents must be odd, got {kh}x{kw}")
    if stride < 1 or dilation < 1:
        raise InvalidArgumentError("stride and dilation must be >= 1")
    if xb.shape[3] != cin:
        raise InvalidArgumentError(
            f"input has {xb.shape[3]} channels but kernel expects {cin}")

    n, h, w, _ = xb.shape
    ho, pt, pb = same_padding(h, kh, dilation, stride)
    wo, pl, pr = same_padding(w, kw, dilation, stride)
    xp = np.pad(xb, ((0, 0), (pt, pb), (pl, pr), (0, 0)))

    # tap-loop im2col: one strided slice per kernel tap
    cols = np.empty((n, ho, wo, kh, kw, cin), dtype=xb.dtype)
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            cols[:, :, :, i, j, :] = xp[:, r0:r0 + ho * stride:stride,
                                        c0:c0 + wo * stride:stride, :]
    cols2 = cols.reshape(n * ho * wo, kh * kw * cin)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = cols2 @ kmat
    if bias is not None:
        bias = as_tensor(bias, like=x)
        out += bias.data
    out = out.reshape(n, ho, wo, cout)
    if not had_batch:
        out = out[0]

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def bwd(g):
        gb_ = g if had_batch else g[None, ...]
        gm = gb_.reshape(n * ho * wo, cout)
        grad_k = grad_x = grad_b = None
        if kernel.requires_grad:
            grad_k = (cols2.T @ gm).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            grad_b = gm.sum(axis=0)
        if x.requires_grad:
            dcols = (gm @ kmat.T).reshape(n, ho, wo, kh, kw, cin)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    r0, c0 = i * dilation, j * dilation
                    dxp[:, r0:r0 + ho * stride:stride,
                        c0:c0 + wo * stride:stride, :] += dcols[:, :, :, i, j, :]
            grad_x = dxp[:, pt:pt + h, pl:pl + w, :]
            if not had_batch:
                grad_x = grad_x[0]
        if bias is None:
            return grad_x, grad_k
        return grad_x, grad_k, grad_b

    return _make(out, parents, bwd)


def spatial_softmax(logits) -> Tensor:
    """Softmax over all cells of a ``(h, w)`` map (batched: ``(N, h, w)``).

    Outputs are positive, sum to 1 per map, and are invariant to adding a
    constant to every logit. Non-finite logits are rejected.
    """
    logits = as_tensor(logits)
    lb, had_batch = _with_batch(logits, 2)
    if not np.isfinite(lb).all():
        raise InvalidArgumentError("spatial_softmax requires finite logits")
    n, h, w = lb.shape
    flat = lb.reshape(n, h * w)
    shifted = flat - flat.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    alpha = (e / e.sum(axis=1, keepdims=True)).reshape(n, h, w)
    out = alpha if had_batch else alpha[0]

    def bwd(g):
        gb_ = g if had_batch else g[None, ...]
        dot = (gb_ * alpha).sum(axis=(1, 2), keepdims=True)
        gl = alpha * (gb_ - dot)
        return (gl if had_batch else gl[0],)

    return _make(out, (logits,), bwd)


def spatial_pool(features, mode: str = "mean") -> Tensor:
    """Pool a ``(h, w, d)`` map (batched: ``(N, h, w, d)``) over its cells.

    ``mode`` is ``"mean"`` (default) or ``"sum"``.
    """
    features = as_tensor(features)
    fb, had_batch = _with_batch(features, 3)
    n, h, w, d = fb.shape
    if h * w < 1:
        raise InvalidArgumentError("spatial_pool needs at least one cell")
    if mode not in ("mean", "sum"):
        raise InvalidArgumentError(f"unknown pool mode {mode!r}")
    scale = 1.0 / (h * w) if mode == "mean" else 1.0
    pooled = fb.sum(axis=(1, 2)) * scale
    out = pooled if had_batch else pooled[0]

    def bwd(g):
        gb_ = g if had_batch else g[None, ...]
        gx = np.broadcast_to(gb_[:, None, None, :] * scale, fb.shape).astype(fb.dtype)
        return (gx if had_batch else gx[0],)

    return _make(out, (features,), bwd)


def spatial_broadcast(vec, h: int, w: int) -> Tensor:
    """Tile a ``(d,)`` vector (batched: ``(N, d)``) to ``(h, w, d)`` planes."""
    vec = as_tensor(vec)
    vb, had_batch = _with_batch(vec, 1)
    n, d = vb.shape
    out = np.broadcast_to(vb[:, None, None, :], (n, h, w, d)).copy()
    if not had_batch:
        out = out[0]

    def bwd(g):
        gb_ = g if had_batch else g[None, ...]
        gv = gb_.sum(axis=(1, 2))
        return (gv if had_batch else gv[0],)

    return _make(out, (vec,), bwd)


def soft_argmax(probs) -> Tensor:
    """Probability-weighted mean (row, col) of a normalized ``(h, w)`` map.

    Batched input ``(N, h, w)`` yields ``(N, 2)``.
    """
    probs = as_tensor(probs)
    pb, had_batch = _with_batch(probs, 2)
    n, h, w = pb.shape
    rows = np.arange(h, dtype=pb.dtype)[:, None]
    cols = np.arange(w, dtype=pb.dtype)[None, :]
    r = (pb * rows).sum(axis=(1, 2))
    c = (pb * cols).sum(axis=(1, 2))
    out = np.stack([r, c], axis=1)
    if not had_batch:
        out = out[0]

    def bwd(g):
        gb_ = g if had_batch else g[None, ...]
        gp = gb_[:, 0, None, None] * rows + gb_[:, 1, None, None] * cols
        gp = np.broadcast_to(gp, pb.shape).astype(pb.dtype)
        return (gp if had_batch else gp[0],)

    return _make(out, (probs,), bwd)


def bilinear_splat(point, h: int, w: int) -> Tensor:
    """Render a unit mass at continuous (row, col) into an ``(h, w)`` grid.

    The mass is split bilinearly over the four neighbouring cells, so the
    output is differentiable w.r.t. the point. Points are clamped to the
    valid cell range; the clamp zeroes the positional gradient at the rim.
    Batched input ``(N, 2)`` yields ``(N, h, w)``.
    """
    point = as_tensor(point)
    if h < 2 or w < 2:
        raise InvalidArgumentError("bilinear_splat needs a grid of at least 2x2")
    pb, had_batch = _with_batch(point, 1)
    n = pb.shape[0]
    eps = 1e-6
    r = np.clip(pb[:, 0], 0.0, h - 1 - eps)
    c = np.clip(pb[:, 1], 0.0, w - 1 - eps)
    inside = (pb[:, 0] == r) & (pb[:, 1] == c)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    fr = r - r0
    fc = c - c0
    out = np.zeros((n, h, w), dtype=pb.dtype)
    idx = np.arange(n)
    out[idx, r0, c0] = (1 - fr) * (1 - fc)
    out[idx, r0, c0 + 1] = (1 - fr) * fc
    out[idx, r0 + 1, c0] = fr * (1 - fc)
    out[idx, r0 + 1, c0 + 1] = fr * fc
    res = out if had_batch else out[0]

    def bwd(g):
        gb_ = g if had_batch else g[None, ...]
        g00 = gb_[idx, r0, c0]
        g01 = gb_[idx, r0, c0 + 1]
        g10 = gb_[idx, r0 + 1, c0]
        g11 = gb_[idx, r0 + 1, c0 + 1]
        dr = (-(1 - fc) * g00 - fc * g01 + (1 - fc) * g10 + fc * g11) * inside
        dc = (-(1 - fr) * g00 + (1 - fr) * g01 - fr * g10 + fr * g11) * inside
        gp = np.stack([dr, dc], axis=1).astype(pb.dtype)
        return (gp if had_batch else gp[0],)

    return _make(res, (point,), bwd)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy between ``sigmoid(logits)`` and targets.

    Numerically stable fused form; targets are constants in [0, 1].
    """
    logits = as_tensor(logits)
    t = np.asarray(as_tensor(targets, like=logits).data)
    x = logits.data
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    data = np.asarray(loss.mean(), dtype=x.dtype)
    n = x.size

    def bwd(g):
        s = 1.0 / (1.0 + np.exp(-np.abs(x)))
        s = np.where(x >= 0, s, 1.0 - s)
        return (g * (s - t) / n,)

    return _make(data, (logits,), bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def finite_difference_check(fn, tensors, h: float = 1e-5, rel_tol: float = 1e-4,
                            abs_floor: float = 1e-7, max_coords: int = 16,
                            rng: np.random.Generator | None = None):
    """Compare analytic gradients of ``fn(*tensors)`` against central differences.

    ``fn`` must return a scalar Tensor. For each input tensor a random
    subset of at most ``max_coords`` coordinates is perturbed. Raises
    ``AssertionError`` on disagreement; returns the worst relative error.
    All checks are meant to run on float64 tensors.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.zero_grad()
    loss = fn(*tensors)
    backward(loss)
    worst = 0.0
    for t in tensors:
        if not t.requires_grad:
            continue
        assert t.grad is not None, "no gradient reached a requires_grad input"
        flat = t.data.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(max_coords, n), replace=False)
        for ci in coords:
            orig = flat[ci]
            flat[ci] = orig + h
            hi = fn(*tensors).item()
            flat[ci] = orig - h
            lo = fn(*tensors).item()
            flat[ci] = orig
            num = (hi - lo) / (2 * h)
            ana = float(t.grad.reshape(-1)[ci])
            err = abs(num - ana)
            scale = max(abs(num), abs(ana))
            rel = err / scale if scale > 0 else 0.0
            if err > abs_floor and rel > rel_tol:
                raise AssertionError(
                    f"gradient mismatch at coord {ci}: analytic {ana:.8g} vs "
                    f"numeric {num:.8g} (rel {rel:.3g})")
            worst = max(worst, rel if scale > 0 else 0.0)
    return worst
