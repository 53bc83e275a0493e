"""Reverse-mode automatic differentiation over numpy arrays.

Only the layer primitives needed by the segmentation networks are provided:
N-d convolution, max-pooling, linear upsampling, channel concatenation,
batch normalization, channel softmax and ReLU, plus a few scalar helpers
used to assemble losses.

Layout is always ``[batch, channel, *spatial]`` with 2 or 3 spatial axes.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPE = np.float32


def default_dtype() -> type:
    return _DTYPE


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the working precision (64-bit is used for gradient checks)."""
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """An array plus the bookkeeping needed to backpropagate through it.

    ``op`` names the operation that produced the tensor, ``parents`` the input
    tensors and ``_backward`` maps the output gradient to parent gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: Sequence["Tensor"] = (), backward: Callable | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DTYPE)
        _check_finite(arr, f"output of {op}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = tuple(parents)
        self._backward = backward

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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return scale(self, other)

    __rmul__ = __mul__

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf with ``requires_grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if g.shape != node.data.shape:
                raise AssertionError(f"gradient shape {g.shape} != output shape {node.shape} ({node.op})")
            _check_finite(g, f"gradient of {node.op}")
            if not node.parents:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(data, dtype=_DTYPE), requires_grad=requires_grad)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, op=op, parents=parents if req else (),
                  backward=backward if req else None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else tensor(x)


def _tuple(v, nd: int, name: str) -> tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        v = (int(v),) * nd
    v = tuple(int(i) for i in v)
    if len(v) != nd or any(i < 1 for i in v):
        raise ValueError(f"{name} must be {nd} positive integers, got {v}")
    return v


def _spatial_nd(x: Tensor, op: str) -> int:
    nd = x.ndim - 2
    if nd not in (2, 3):
        raise ValueError(f"{op} expects [batch, channel, *spatial] with 2 or 3 spatial axes, got shape {x.shape}")
    return nd


# ---------------------------------------------------------------------------
# elementwise / scalar helpers


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum(), dtype=a.data.dtype), "sum", (a,),
                 lambda g: (np.broadcast_to(g, a.shape).copy(),))


def weighted_sum(a: Tensor, w: np.ndarray) -> Tensor:
    """sum(a * w) with a constant weight array."""
    w = np.asarray(w, dtype=a.data.dtype)
    return _make(np.asarray((a.data * w).sum(), dtype=a.data.dtype), "weighted_sum", (a,),
                 lambda g: (g * w,))


def linear_combination(terms: Sequence[Tensor], coeffs: Sequence[float]) -> Tensor:
    """Sum of ``c_i * t_i`` over scalar tensors."""
    if len(terms) != len(coeffs):
        raise ValueError("terms and coefficients differ in length")
    coeffs = [float(c) for c in coeffs]
    data = sum(c * t.data for c, t in zip(coeffs, terms))
    dtype = terms[0].data.dtype
    return _make(np.asarray(data, dtype=dtype), "lincomb", tuple(terms),
                 lambda g: tuple(g * c for c in coeffs))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, "relu", (x,), lambda g: (g * mask,))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        out = np.zeros_like(x.data)
        out[:, start:stop] = g
        return (out,)
    return _make(x.data[:, start:stop].copy(), "slice_channels", (x,), backward)


def crop_spatial(x: Tensor, extents: Sequence[int]) -> Tensor:
    """Keep the leading ``extents`` along each spatial axis."""
    idx = (slice(None), slice(None)) + tuple(slice(0, e) for e in extents)
    if x.data[idx].shape == x.shape:
        return x

    def backward(g):
        out = np.zeros_like(x.data)
        out[idx] = g
        return (out,)
    return _make(x.data[idx].copy(), "crop", (x,), backward)


# ---------------------------------------------------------------------------
# convolution


def _same_pads(n: int, k: int, s: int) -> tuple[int, int]:
    out = -(-n // s)
    total = max((out - 1) * s + k - n, 0)
    return total // 2, total - total // 2


def conv_output_extent(n: int, k: int, s: int, padding: str) -> int:
    if padding == "same":
        return -(-n // s)
    return (n - k) // s + 1


def conv_nd(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1,
            padding: str = "same") -> Tensor:
    """Cross-correlation of ``x`` [B, Cin, *S] with ``kernel`` [Cout, Cin, *K]."""
    nd = _spatial_nd(x, "conv_nd")
    if kernel.ndim != nd + 2 or kernel.shape[1] != x.shape[1]:
        raise ValueError(f"conv_nd: input shape {x.shape} incompatible with kernel shape {kernel.shape}")
    if bias is not None and bias.shape != (kernel.shape[0],):
        raise ValueError(f"conv_nd: bias shape {bias.shape} does not match kernel shape {kernel.shape}")
    if padding not in ("same", "valid"):
        raise ValueError(f"conv_nd: unknown padding mode {padding!r}")
    cout, cin = kernel.shape[:2]
    ks = kernel.shape[2:]
    st = _tuple(stride, nd, "stride")
    batch, spatial = x.shape[0], x.shape[2:]
    if padding == "same":
        pads = [_same_pads(n, k, s) for n, k, s in zip(spatial, ks, st)]
    else:
        if any(n < k for n, k in zip(spatial, ks)):
            raise ValueError(f"conv_nd: kernel shape {kernel.shape} larger than input shape {x.shape}")
        pads = [(0, 0)] * nd
    xp = np.pad(x.data, [(0, 0), (0, 0)] + pads) if any(p != (0, 0) for p in pads) else x.data
    out_sp = tuple(conv_output_extent(n, k, s, padding) for n, k, s in zip(spatial, ks, st))
    offsets = list(itertools.product(*(range(k) for k in ks)))

    def window(off):
        return (slice(None), slice(None)) + tuple(
            slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(off, st, out_sp))

    # im2col in [K, Cin, B, *O] layout so each kernel offset is one contiguous block
    cols = np.empty((len(offsets), cin, batch) + out_sp, dtype=x.data.dtype)
    for i, off in enumerate(offsets):
        cols[i] = xp[window(off)].swapaxes(0, 1)
    cols = cols.reshape(len(offsets) * cin, -1)
    wmat = np.moveaxis(kernel.data, 1, -1).reshape(cout, -1)
    out = (wmat @ cols).reshape((cout, batch) + out_sp).swapaxes(0, 1)
    if bias is not None:
        out = out + bias.data.reshape((1, -1) + (1,) * nd)
    out = np.ascontiguousarray(out)

    def backward(g):
        gx = gk = gb = None
        gm = g.swapaxes(0, 1).reshape(cout, -1)
        if kernel.requires_grad:
            gk = np.moveaxis((gm @ cols.T).reshape((cout,) + ks + (cin,)), -1, 1)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0,) + tuple(range(2, 2 + nd)))
        if x.requires_grad:
            gcols = (wmat.T @ gm).reshape((len(offsets), cin, batch) + out_sp)
            gxp = np.zeros((cin, batch) + xp.shape[2:], dtype=g.dtype)
            for i, off in enumerate(offsets):
                gxp[window(off)] += gcols[i]
            crop = (slice(None), slice(None)) + tuple(slice(p[0], p[0] + n) for p, n in zip(pads, spatial))
            gx = np.ascontiguousarray(gxp[crop].swapaxes(0, 1))
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, f"conv{nd}d", parents, backward)


# ---------------------------------------------------------------------------
# pooling


def pool_output_extent(n: int, w: int, s: int, padding: str = "valid") -> int:
    if padding == "same":
        return -(-n // s)
    return (n - w) // s + 1


def maxpool_nd(x: Tensor, window, stride=None, padding: str = "valid") -> Tensor:
    """Max over windows; the gradient goes to the first maximum in scan order."""
    nd = _spatial_nd(x, "maxpool_nd")
    w = _tuple(window, nd, "window")
    st = _tuple(w if stride is None else stride, nd, "stride")
    spatial = x.shape[2:]
    if padding == "valid" and any(k > n for k, n in zip(w, spatial)):
        raise ValueError(f"maxpool_nd: window {w} larger than spatial extent {spatial}")
    if padding == "same":
        pads = [_same_pads(n, k, s) for n, k, s in zip(spatial, w, st)]
        xp = np.pad(x.data, [(0, 0), (0, 0)] + pads, constant_values=-np.inf)
    elif padding == "valid":
        pads = [(0, 0)] * nd
        xp = x.data
    else:
        raise ValueError(f"maxpool_nd: unknown padding mode {padding!r}")
    out_sp = tuple(pool_output_extent(n, k, s, padding) for n, k, s in zip(spatial, w, st))
    win = sliding_window_view(xp, w, axis=tuple(range(2, 2 + nd)))
    win = win[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in st)]
    win = win[(slice(None), slice(None)) + tuple(slice(0, o) for o in out_sp)]
    flat = win.reshape(win.shape[: 2 + nd] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i, off in enumerate(itertools.product(*(range(k) for k in w))):
            hit = arg == i
            if not hit.any():
                continue
            idx = (slice(None), slice(None)) + tuple(
                slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(off, st, out_sp))
            gxp[idx] += g * hit
        crop = (slice(None), slice(None)) + tuple(slice(p[0], p[0] + n) for p, n in zip(pads, spatial))
        return (gxp[crop],)

    return _make(np.ascontiguousarray(out), f"maxpool{nd}d", (x,), backward)


# ---------------------------------------------------------------------------
# upsampling


def linear_interp_matrix(n: int, factor: int) -> np.ndarray:
    """[n*factor, n] matrix of 1-D linear interpolation weights (half-pixel centres)."""
    m = np.zeros((n * factor, n))
    src = (np.arange(n * factor) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    rows = np.arange(n * factor)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample_linear_nd(x: Tensor, factor: int) -> Tensor:
    """Bilinear (2-D) or trilinear (3-D) upsampling by an integer factor."""
    nd = _spatial_nd(x, "upsample_linear_nd")
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return x
    mats = [linear_interp_matrix(n, factor).astype(x.data.dtype) for n in x.shape[2:]]

    def apply(arr, transpose):
        for ax, m in enumerate(mats):
            m = m.T if transpose else m
            arr = np.moveaxis(np.tensordot(arr, m, axes=((2 + ax,), (1,))), -1, 2 + ax)
        return np.ascontiguousarray(arr)

    return _make(apply(x.data, False), f"upsample{nd}d", (x,), lambda g: (apply(g, True),))


# ---------------------------------------------------------------------------
# channel ops


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    if len(inputs) == 1:
        return inputs[0]
    ref = inputs[0].shape
    for t in inputs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return _make(np.concatenate([t.data for t in inputs], axis=1), "concat", tuple(inputs), backward)


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              mode: str = "train") -> Tensor:
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm: gamma/beta shapes {gamma.shape}/{beta.shape} vs channels {c}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = state.momentum
        state.running_mean = m * state.running_mean + (1 - m) * mean
        state.running_var = m * state.running_var + (1 - m) * var
    elif mode == "infer":
        mean = state.running_mean.astype(x.data.dtype)
        var = state.running_var.astype(x.data.dtype)
    else:
        raise ValueError(f"batchnorm: unknown mode {mode!r}")
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    count = x.data.size // c

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if mode == "train":
            gx = (inv.reshape(bshape) / count) * (
                count * gxhat - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, gg, gb

    return _make(out.astype(x.data.dtype), "batchnorm", (x, gamma, beta), backward)


def softmax_channels(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _make(s, "softmax", (x,), backward)


def log_softmax_channels(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return _make(out, "log_softmax", (x,), backward)


def pick_log(probs: Tensor, labels: np.ndarray, weights: np.ndarray, floor: float = 1e-12) -> Tensor:
    """sum over voxels of ``weights * log(max(p_label, floor))``."""
    lab = np.asarray(labels)[:, None]
    p = np.take_along_axis(probs.data, lab, axis=1)[:, 0]
    clamped = np.maximum(p, floor)
    w = np.asarray(weights, dtype=probs.data.dtype)
    val = (w * np.log(clamped)).sum()

    def backward(g):
        out = np.zeros_like(probs.data)
        local = np.where(p >= floor, w / clamped, 0.0).astype(probs.data.dtype)
        np.put_along_axis(out, lab, (g * local)[:, None], axis=1)
        return (out,)

    return _make(np.asarray(val, dtype=probs.data.dtype), "pick_log", (probs,), backward)


def pick(x: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """sum over voxels of ``weights * x[label]`` (x typically a log-softmax)."""
    lab = np.asarray(labels)[:, None]
    w = np.asarray(weights, dtype=x.data.dtype)
    val = (w * np.take_along_axis(x.data, lab, axis=1)[:, 0]).sum()

    def backward(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, lab, (g * w)[:, None], axis=1)
        return (out,)

    return _make(np.asarray(val, dtype=x.data.dtype), "pick", (x,), backward)
