"""Dense tensors with reverse-mode automatic differentiation.

Only the operations needed by the spatial U-Net and the temporal CAE are
provided. Tensors carry an unbatched leading channel axis: ``(C, D, H, W)``
for volumes and ``(C, L)`` for sequences.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PEARSON_EPS = 1e-8

_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Evaluate operations without recording a compute graph."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A dense n-dimensional array that may record how it was computed."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else np.float64)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], rule, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
        out.op = op
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # iterative post-order DFS, each node emitted once
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        for axis, (m, n) in enumerate(zip(a.shape, b.shape)):
            if m != n:
                raise DimensionError(f"{what}: axis {axis} has extent {m} vs {n}")
        raise DimensionError(f"{what}: rank {a.ndim} vs {b.ndim}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,),
                 lambda g: (g * mask,), "relu")


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    x = as_tensor(x)
    return _make(np.asarray(x.data.sum()), (x,),
                 lambda g: (np.full_like(x.data, g),), "sum")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape[1:]
    for t in tensors[1:]:
        if t.shape[1:] != ref:
            raise DimensionError(f"concat_channels: trailing shape {t.shape[1:]} vs {ref}")
    sizes = [t.shape[0] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def rule(g):
        return np.split(g, cuts, axis=0)

    return _make(np.concatenate([t.data for t in tensors], axis=0), tensors, rule, "concat")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias ``b`` of shape ``(C,)`` along axis 0."""
    x = as_tensor(x)
    b = as_tensor(b)
    if b.shape != (x.shape[0],):
        raise DimensionError(f"add_bias: bias shape {b.shape} for {x.shape[0]} channels")
    expand = (slice(None),) + (None,) * (x.ndim - 1)
    spatial = tuple(range(1, x.ndim))
    return _make(x.data + b.data[expand], (x, b),
                 lambda g: (g, g.sum(axis=spatial)), "add_bias")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def crop(x: Tensor, spatial_shape: Sequence[int]) -> Tensor:
    """Keep the leading ``spatial_shape`` cells of every non-channel axis."""
    x = as_tensor(x)
    index = (slice(None),) + tuple(slice(0, n) for n in spatial_shape)

    def rule(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make(x.data[index], (x,), rule, "crop")


def pad_replicate(x: Tensor, trailing: Sequence[int]) -> Tensor:
    """Replicate the trailing face of each non-channel axis ``trailing[i]`` times."""
    x = as_tensor(x)
    widths = [(0, 0)] + [(0, int(n)) for n in trailing]
    out = np.pad(x.data, widths, mode="edge")

    def rule(g):
        g = g.copy()
        for axis, n in enumerate(trailing, start=1):
            if n == 0:
                continue
            keep = x.shape[axis]
            tail = np.take(g, range(keep, keep + n), axis=axis).sum(axis=axis, keepdims=True)
            edge = [slice(None)] * g.ndim
            edge[axis] = slice(keep - 1, keep)
            g[tuple(edge)] += tail
            g = np.take(g, range(keep), axis=axis)
        return (g,)

    return _make(out, (x,), rule, "pad")


def standardize(x: Tensor, eps: float = 1e-8) -> Tensor:
    """Zero-mean, unit-variance rescaling of a tensor (population variance)."""
    x = as_tensor(x)
    centered = x.data - x.data.mean()
    sd = np.sqrt((centered ** 2).mean() + eps)
    y = centered / sd

    def rule(g):
        return ((g - g.mean() - y * (g * y).mean()) / sd,)

    return _make(y, (x,), rule, "standardize")


# ---------------------------------------------------------------- convolution


def _same_pads(kernel: Sequence[int]) -> list[tuple[int, int]]:
    # even kernels put the extra cell on the trailing side
    return [((k - 1) // 2, k // 2) for k in kernel]


def _conv_nd(x: Tensor, w: Tensor, padding: str, nd: int, name: str) -> Tensor:
    if x.ndim != nd + 1 or w.ndim != nd + 2:
        raise DimensionError(f"{name}: expected input rank {nd + 1} and kernel rank {nd + 2}, "
                             f"got {x.ndim} and {w.ndim}")
    if w.shape[1] != x.shape[0]:
        raise DimensionError(f"{name}: axis 0 (channels) has {x.shape[0]} input channels "
                             f"but kernel expects {w.shape[1]}")
    ksize = w.shape[2:]
    if padding == "same":
        pads = _same_pads(ksize)
    elif padding == "valid":
        pads = [(0, 0)] * nd
    else:
        raise ValueError(f"unknown padding {padding!r}")
    for axis, (n, k, (lo, hi)) in enumerate(zip(x.shape[1:], ksize, pads), start=1):
        if k > n + lo + hi:
            raise DimensionError(f"{name}: axis {axis} kernel extent {k} exceeds padded "
                                 f"input extent {n + lo + hi}")

    xp = np.pad(x.data, [(0, 0)] + pads) if padding == "same" else x.data
    spatial_axes = tuple(range(1, nd + 1))
    win = sliding_window_view(xp, ksize, axis=spatial_axes)  # (C, *S', *K)
    k_axes = tuple(range(nd + 1, 2 * nd + 1))
    out = np.tensordot(w.data, win, axes=((1,) + tuple(range(2, nd + 2)), (0,) + k_axes))

    def rule(g):
        gw = gx = None
        if w.requires_grad:
            gw = np.tensordot(g, win, axes=(spatial_axes, spatial_axes))  # (O, C, *K)
        if x.requires_grad:
            gp = np.pad(g, [(0, 0)] + [(k - 1, k - 1) for k in ksize])
            gwin = sliding_window_view(gp, ksize, axis=spatial_axes)  # (O, *Sp, *K)
            wf = np.flip(w.data, axis=tuple(range(2, nd + 2)))
            gxp = np.tensordot(wf, gwin, axes=((0,) + tuple(range(2, nd + 2)), (0,) + k_axes))
            index = (slice(None),) + tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, x.shape[1:]))
            gx = gxp[index]
        return gx, gw

    return _make(np.ascontiguousarray(out), (x, w), rule, name)


def conv3d(x: Tensor, kernel: Tensor, padding: str = "same") -> Tensor:
    """Cross-correlate ``x (C_in, D, H, W)`` with ``kernel (C_out, C_in, kd, kh, kw)``."""
    return _conv_nd(as_tensor(x), as_tensor(kernel), padding, 3, "conv3d")


def conv1d(x: Tensor, kernel: Tensor, padding: str = "same") -> Tensor:
    """Cross-correlate ``x (C_in, L)`` with ``kernel (C_out, C_in, k)``."""
    return _conv_nd(as_tensor(x), as_tensor(kernel), padding, 1, "conv1d")


# ---------------------------------------------------------------- resampling


def maxpool(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling over every non-channel axis.

    Odd extents are first padded by replicating the trailing face. The
    gradient goes to the first maximal cell of each window.
    """
    x = as_tensor(x)
    spatial = x.shape[1:]
    for axis, n in enumerate(spatial, start=1):
        if window > n:
            raise DimensionError(f"maxpool: window {window} larger than axis {axis} extent {n}")
    extra = [(-n) % window for n in spatial]
    if any(extra):
        x = pad_replicate(x, extra)
        spatial = x.shape[1:]
    nd = len(spatial)
    c = x.shape[0]
    split = [c]
    for n in spatial:
        split += [n // window, window]
    blocks = x.data.reshape(split)
    # window axes to the end: (C, n1, n2, ..., w1, w2, ...)
    perm = [0] + [1 + 2 * i for i in range(nd)] + [2 + 2 * i for i in range(nd)]
    blocks = blocks.transpose(perm)
    pooled_shape = blocks.shape[: nd + 1]
    flat = blocks.reshape(pooled_shape + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gb = gflat.reshape(blocks.shape).transpose(np.argsort(perm))
        return (gb.reshape(x.shape),)

    return _make(out, (x,), rule, "maxpool")


def upsample(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of every non-channel axis."""
    x = as_tensor(x)
    out = x.data
    for axis in range(1, x.ndim):
        out = np.repeat(out, factor, axis=axis)

    def rule(g):
        split = [x.shape[0]]
        for n in x.shape[1:]:
            split += [n, factor]
        summed = g.reshape(split).sum(axis=tuple(range(2, 2 * x.ndim, 2)))
        return (summed,)

    return _make(out, (x,), rule, "upsample")


# ---------------------------------------------------------------- losses


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    _check_same(pred, target, "mse_loss")
    diff = pred.data - target.data
    n = diff.size
    return _make(np.asarray((diff ** 2).mean()), (pred, target),
                 lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n), "mse")


def neg_pearson_loss(x, y, eps: float = PEARSON_EPS) -> Tensor:
    """Negative Pearson correlation between two equal-length series.

    Evaluated with the raw-sum form
    ``(N*Sxy - Sx*Sy) / sqrt(max((N*Sxx - Sx^2) * (N*Syy - Sy^2), eps))``.
    The epsilon only acts as a floor, so well-conditioned inputs are exact.
    The result has a ``constant_input`` attribute set when either series is
    constant, in which case the value is 0.
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim != 1:
        x = reshape(x, (-1,))
    if y.ndim != 1:
        y = reshape(y, (-1,))
    _check_same(x, y, "neg_pearson_loss")
    n = x.shape[0]
    if n < 2:
        raise DimensionError("neg_pearson_loss: series length must be at least 2")
    xd, yd = x.data, y.data
    sx, sy = xd.sum(), yd.sum()
    num = n * (xd * yd).sum() - sx * sy
    a = n * (xd * xd).sum() - sx * sx
    b = n * (yd * yd).sum() - sy * sy
    floored = a * b < eps
    den = np.sqrt(eps if floored else a * b)
    r = num / den
    # at the floor the denominator is constant
    ka, kb = (0.0, 0.0) if floored else (r * b / den ** 2, r * a / den ** 2)

    def rule(g):
        gx = gy = None
        if x.requires_grad:
            gx = -g * ((n * yd - sy) / den - ka * (n * xd - sx))
        if y.requires_grad:
            gy = -g * ((n * xd - sx) / den - kb * (n * yd - sy))
        return gx, gy

    out = _make(np.asarray(-r), (x, y), rule, "neg_pearson")
    # float roundoff can leave a tiny positive variance for constant input
    out.constant_input = bool(a <= 1e-12 * max(1.0, n * (xd * xd).sum())
                              or b <= 1e-12 * max(1.0, n * (yd * yd).sum()))
    return out


def pearson(x: np.ndarray, y: np.ndarray, eps: float = PEARSON_EPS) -> float:
    """Plain (non-negated) Pearson correlation of two arrays."""
    with no_grad():
        return -neg_pearson_loss(np.ravel(x), np.ravel(y), eps).item()


def inner_per_frame(frames: np.ndarray, kernel: Tensor) -> Tensor:
    """Full-extent valid cross-correlation of each frame with ``kernel``.

    ``frames`` has shape ``(T, *S)`` and ``kernel`` shape ``S``; the result
    has one value per frame.
    """
    kernel = as_tensor(kernel)
    if frames.shape[1:] != kernel.shape:
        for axis, (m, n) in enumerate(zip(frames.shape[1:], kernel.shape), start=1):
            if m != n:
                raise DimensionError(f"joint operator: axis {axis} frame extent {m} "
                                     f"vs map extent {n}")
        raise DimensionError(f"joint operator: frame shape {frames.shape[1:]} vs map {kernel.shape}")
    nd = kernel.ndim
    axes = tuple(range(1, nd + 1))
    out = np.tensordot(frames, kernel.data, axes=(axes, tuple(range(nd))))
    return _make(out, (kernel,), lambda g: (np.tensordot(g, frames, axes=(0, 0)),), "joint")
