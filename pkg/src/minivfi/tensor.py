"""Minimal reverse-mode autodiff over NumPy arrays.

Every differentiable primitive builds its output with :func:`_record`, which
attaches a node holding the parents and a closure mapping the output gradient
to per-parent gradients. :func:`backward` walks the recorded graph in reverse
topological order exactly once and populates ``.grad`` on leaves.

Conventions:

- Calling ``backward`` when any reachable leaf already holds a gradient raises
  :class:`GraphError`; call :meth:`Tensor.zero_grad` (or
  :func:`zero_grads`) between steps.
- A graph is consumed by its backward pass; re-running backward on the same
  loss raises.
- Tensors taking part in a recorded graph must not be mutated in place.
"""

from __future__ import annotations

import contextlib
import math
import threading
from itertools import product
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "GraphError",
    "ShapeError",
    "NumericError",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "zero_grads",
    "topo_order",
    "grad_check",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sqrt",
    "absolute",
    "tsum",
    "mean",
    "reshape",
    "concat",
    "prelu",
    "softmax",
    "pad",
    "bilinear_resize",
    "avg_pool2",
    "subsample2",
    "zero_insert2",
    "conv2d",
    "conv3d",
    "local_filter",
]

PAD_MODES = ("zero", "reflect")


class GraphError(RuntimeError):
    """Misuse of the recorded graph (non-scalar loss, double backward, ...)."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class NumericError(ArithmeticError):
    """Non-finite values reached a primitive that refuses them."""


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Node:
    __slots__ = ("op", "parents", "fn")

    def __init__(self, op: str, parents: tuple["Tensor", ...], fn):
        self.op = op
        self.parents = parents
        self.fn = fn


class Tensor:
    """Dense array with optional gradient tracking.

    ``data`` is always a C-ordered ``np.ndarray`` of float dtype. ``grad`` is
    ``None`` until a backward pass reaches this tensor as a leaf.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.isfinite(self.data).all():
            raise NumericError(f"{what} contains NaN or Inf (shape {self.shape})")
        return self

    def backward(self) -> int:
        return backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(data: np.ndarray, parents: Sequence[Tensor], fn, op: str) -> Tensor:
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._node = _Node(op, tuple(parents), fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------

def topo_order(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root``, each input before its consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t._node is not None:
            for p in t._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> int:
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Returns the number of graph nodes visited.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached from any tensor that requires grad")
    if loss._node is not None and loss._node.fn is None:
        raise GraphError("graph was already consumed by a previous backward pass")

    order = topo_order(loss)
    leaves = [t for t in order if t._node is None]
    for leaf in leaves:
        if leaf.grad is not None:
            raise GraphError(
                "leaf already holds a gradient; zero grads before calling backward again"
            )

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    visited = 0
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if t._node is None:
            if g is not None:
                t.grad = g
            continue
        node = t._node
        visited += 1
        if g is None:
            node.fn = None
            continue
        pgrads = node.fn(g)
        node.fn = None
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    return visited


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), fn, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def fn(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), fn, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), fn, "div")


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def sqrt(a: Tensor) -> Tensor:
    if (a.data < 0).any():
        raise NumericError("sqrt of negative values")
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    s = np.sign(a.data)
    return _record(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def tsum(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis))

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _record(out, (a,), fn, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = math.prod(a.shape[i] for i in axes)
    out = np.asarray(a.data.mean(axis=axis))

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=True),)

    return _record(out, (a,), fn, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat needs at least one tensor")
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if x.ndim != len(ref) or any(
            i != ax and x.shape[i] != ref[i] for i in range(len(ref))
        ):
            raise ShapeError(f"concat axis {axis}: shapes {ref} and {x.shape} disagree")
    if len(xs) == 1:
        return xs[0]
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _record(np.concatenate([x.data for x in xs], axis=ax), xs, fn, "concat")


def prelu(x: Tensor, slope) -> Tensor:
    """``x`` where positive, ``slope * x`` elsewhere. ``slope`` may be a tensor."""
    if not isinstance(slope, Tensor):
        a = float(slope)
        pos = x.data > 0
        out = np.where(pos, x.data, a * x.data)
        return _record(out, (x,), lambda g: (np.where(pos, g, a * g),), "prelu")
    s = slope
    _broadcast_shape(x, s)
    pos = x.data > 0
    out = np.where(pos, x.data, s.data * x.data)

    def fn(g):
        gx = np.where(pos, g, s.data * g) if x.requires_grad else None
        gs = _unbroadcast(np.where(pos, 0.0, x.data) * g, s.shape) if s.requires_grad else None
        return gx, gs

    return _record(out, (x, s), fn, "prelu")


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), fn, "softmax")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


# ---------------------------------------------------------------------------
# padding and resampling
# ---------------------------------------------------------------------------

def _check_mode(mode: str) -> None:
    if mode not in PAD_MODES:
        raise ValueError(f"pad mode must be one of {PAD_MODES}, got {mode!r}")


def _pad_data(data: np.ndarray, widths: Sequence[tuple[int, int]], mode: str) -> np.ndarray:
    """Pad the trailing ``len(widths)`` axes."""
    full = [(0, 0)] * (data.ndim - len(widths)) + [tuple(w) for w in widths]
    if mode == "zero":
        return np.pad(data, full, mode="constant")
    return np.pad(data, full, mode="reflect")


def _pad_grad(g: np.ndarray, src_shape, widths, mode: str) -> np.ndarray:
    lead = g.ndim - len(widths)
    for k, (p0, p1) in enumerate(widths):
        ax = lead + k
        if p0 == 0 and p1 == 0:
            continue
        n = src_shape[ax]
        gm = np.moveaxis(g, ax, 0)
        out = gm[p0 : p0 + n].copy()
        if mode == "reflect":
            idx = np.pad(np.arange(n), (p0, p1), mode="reflect")
            for j in list(range(p0)) + list(range(p0 + n, p0 + n + p1)):
                out[idx[j]] += gm[j]
        g = np.moveaxis(out, 0, ax)
    return np.ascontiguousarray(g)


def pad(x: Tensor, widths: Sequence[tuple[int, int]], mode: str = "reflect") -> Tensor:
    """Pad the trailing axes of ``x``; ``widths`` is one ``(before, after)`` per axis."""
    _check_mode(mode)
    widths = [tuple(int(v) for v in w) for w in widths]
    out = _pad_data(x.data, widths, mode)
    return _record(out, (x,), lambda g: (_pad_grad(g, x.shape, widths, mode),), "pad")


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centres, edge-clamped
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        w1 = src - i0
        m[i, i0] += 1.0 - w1
        m[i, i1] += w1
    return m


def bilinear_resize(x: Tensor, factor: float) -> Tensor:
    """Bilinear resampling of the last two axes of a 4-D tensor."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects [N,C,H,W], got {x.shape}")
    H, W = x.shape[2:]
    Ho, Wo = H * factor, W * factor
    if abs(Ho - round(Ho)) > 1e-9 or abs(Wo - round(Wo)) > 1e-9 or round(Ho) < 1 or round(Wo) < 1:
        raise ShapeError(f"factor {factor} does not map {H}x{W} to an integer size")
    Ho, Wo = int(round(Ho)), int(round(Wo))
    mh = _interp_matrix(H, Ho, x.dtype)
    mw = _interp_matrix(W, Wo, x.dtype)
    out = np.matmul(mh, x.data @ mw.T)

    def fn(g):
        return (np.matmul(mh.T, g @ mw),)

    return _record(out, (x,), fn, "bilinear_resize")


def avg_pool2(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"avg_pool2 expects [N,C,H,W] with even H, W; got {x.shape}")
    N, C, H, W = x.shape
    out = x.data.reshape(N, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def fn(g):
        return (np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3),)

    return _record(out, (x,), fn, "avg_pool2")


def subsample2(x: Tensor) -> Tensor:
    """Keep every second sample along the last two axes."""
    out = np.ascontiguousarray(x.data[..., ::2, ::2])

    def fn(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[..., ::2, ::2] = g
        return (gx,)

    return _record(out, (x,), fn, "subsample2")


def zero_insert2(x: Tensor) -> Tensor:
    """Double the last two axes, placing ``x`` at even positions and 0 elsewhere."""
    shape = x.shape[:-2] + (2 * x.shape[-2], 2 * x.shape[-1])
    out = np.zeros(shape, dtype=x.dtype)
    out[..., ::2, ::2] = x.data
    return _record(out, (x,), lambda g: (np.ascontiguousarray(g[..., ::2, ::2]),), "zero_insert2")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

# Two lowerings of the same cross-correlation. "shift" runs one GEMM of the
# padded channel-last input against all kernel taps at once and shift-adds
# the per-tap outputs; "im2col" gathers patches first. Which is cheaper
# depends on C_in vs C_out * taps, so _conv_nd picks by memory traffic.
CONV_PATH: str | None = None  # force "shift" or "im2col" (tests)


def _conv_nd(x: Tensor, w: Tensor, b: Tensor | None, stride: int, padding: str, pad_, d: int) -> Tensor:
    _check_mode(padding)
    if x.ndim != d + 2:
        raise ShapeError(f"conv{d}d input must be {d + 2}-D, got shape {x.shape}")
    if w.ndim != d + 2:
        raise ShapeError(f"conv{d}d weight must be {d + 2}-D, got shape {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv{d}d channel mismatch: input {x.shape} has {x.shape[1]} channels, "
            f"weight {w.shape} expects {w.shape[1]}"
        )
    ks = tuple(w.shape[2:])
    if any(k % 2 == 0 for k in ks):
        raise ShapeError(f"kernel extents must be odd, got weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match weight {w.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if pad_ is None:
        pads = tuple(k // 2 for k in ks)
    elif isinstance(pad_, int):
        pads = (pad_,) * d
    else:
        pads = tuple(int(p) for p in pad_)
    if not np.isfinite(x.data).all():
        raise NumericError(f"conv{d}d input contains NaN or Inf")

    widths = [(p, p) for p in pads]
    xp = _pad_data(x.data, widths, padding) if any(pads) else x.data
    psp = xp.shape[2:]
    if any(n < k for n, k in zip(psp, ks)):
        raise ShapeError(f"input {x.shape} too small for kernel {ks} with padding {pads}")
    N, C = x.shape[:2]
    O = w.shape[0]
    taps = math.prod(ks)
    full_sp = tuple(n - k + 1 for n, k in zip(psp, ks))
    out_sp = tuple((n - 1) // stride + 1 for n in full_sp)
    Lp = N * math.prod(psp)
    L = N * math.prod(out_sp)
    path = CONV_PATH
    if path is None:
        shift_cost = Lp * (C + 2 * taps * O)
        col_cost = L * (2 * taps * C + O)
        path = "shift" if (stride == 1 and shift_cost < col_cost) else "im2col"
    if stride != 1:
        path = "im2col"

    # channel-last views: xh (N, *psp, C)
    xh = np.ascontiguousarray(np.moveaxis(xp, 1, -1))
    # wc (taps*C ... ) laid out as (C, *ks, O) -> (C, taps*O) or (taps*C, O)
    if path == "shift":
        wc = np.ascontiguousarray(np.moveaxis(w.data, 0, -1)).reshape(C, taps * O)
        Y = (xh.reshape(Lp, C) @ wc).reshape((N,) + psp + ks + (O,))
        out = None
        for off in product(*(range(k) for k in ks)):
            sl = (slice(None),) + tuple(slice(o, o + n) for o, n in zip(off, out_sp)) + off
            out = Y[sl].copy() if out is None else out.__iadd__(Y[sl])
        del Y
        cols = None
    else:
        win = sliding_window_view(xh, ks, axis=tuple(range(1, 1 + d)))
        if stride > 1:
            win = win[(slice(None),) + (slice(None, None, stride),) * d]
        # win: (N, *out_sp, C, *ks)
        cols = np.ascontiguousarray(win).reshape(L, C * taps)
        wc = w.data.reshape(O, C * taps)
        out = (cols @ wc.T).reshape((N,) + out_sp + (O,))
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))
    if not w.requires_grad:
        cols = None
        if path == "shift":
            xh = None
    if not x.requires_grad:
        wc = wc if w.requires_grad else None

    def fn(g):
        gh = np.moveaxis(g, 1, -1)  # (N, *out_sp, O)
        gw = gx = None
        gb = g.sum(axis=(0,) + tuple(range(2, 2 + d))) if (b is not None and b.requires_grad) else None
        if path == "shift":
            dY = np.zeros((N,) + psp + ks + (O,), dtype=g.dtype)
            for off in product(*(range(k) for k in ks)):
                sl = (slice(None),) + tuple(slice(o, o + n) for o, n in zip(off, out_sp)) + off
                dY[sl] = gh
            dYf = dY.reshape(Lp, taps * O)
            if w.requires_grad:
                gwc = xh.reshape(Lp, C).T @ dYf
                gw = np.ascontiguousarray(np.moveaxis(gwc.reshape((C,) + ks + (O,)), -1, 0))
            if x.requires_grad:
                dxh = (dYf @ wc.T).reshape((N,) + psp + (C,))
        else:
            gmat = np.ascontiguousarray(gh).reshape(L, O)
            if w.requires_grad:
                gw = (gmat.T @ cols).reshape(w.shape)
            if x.requires_grad:
                dcols = (gmat @ wc).reshape((N,) + out_sp + (C,) + ks)
                dxh = np.zeros((N,) + psp + (C,), dtype=g.dtype)
                for off in product(*(range(k) for k in ks)):
                    sl = (slice(None),) + tuple(
                        slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(off, out_sp)
                    )
                    dxh[sl] += dcols[(Ellipsis,) + off]
        if x.requires_grad:
            dxp = np.moveaxis(dxh, -1, 1)
            gx = _pad_grad(dxp, x.shape, widths, padding) if any(pads) else np.ascontiguousarray(dxp)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, fn, f"conv{d}d")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "reflect", pad=None) -> Tensor:
    """2-D cross-correlation. ``pad`` defaults to ``k // 2`` per axis (same size)."""
    return _conv_nd(x, weight, bias, stride, padding, pad, 2)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "reflect", pad=None) -> Tensor:
    """3-D cross-correlation over ``[N, C, T, H, W]``."""
    return _conv_nd(x, weight, bias, stride, padding, pad, 3)


def local_filter(frames: Tensor, weights: Tensor, k: int, padding: str = "reflect") -> Tensor:
    """Apply per-pixel ``k x k`` kernels to a stack of frames and sum.

    ``frames`` is ``[N, F, C, H, W]`` and ``weights`` is ``[N, F*k*k, H, W]``
    with tap ``(f, i, j)`` at channel ``f*k*k + i*k + j``. The same kernel is
    shared across the ``C`` colour channels.
    """
    _check_mode(padding)
    if frames.ndim != 5 or weights.ndim != 4:
        raise ShapeError(f"local_filter expects frames [N,F,C,H,W] and weights [N,F*k*k,H,W]; "
                         f"got {frames.shape} and {weights.shape}")
    N, F, C, H, W = frames.shape
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if weights.shape != (N, F * k * k, H, W):
        raise ShapeError(f"weights shape {weights.shape} incompatible with frames {frames.shape}, k={k}")
    r = k // 2
    widths = [(r, r), (r, r)]
    fp = _pad_data(frames.data, widths, padding)
    wd = weights.data.reshape(N, F, k, k, H, W)
    out = np.zeros((N, C, H, W), dtype=np.result_type(fp, wd))
    for f in range(F):
        for i in range(k):
            for j in range(k):
                out += wd[:, f, i, j][:, None] * fp[:, f, :, i : i + H, j : j + W]

    def fn(g):
        gw = None
        gf = None
        if weights.requires_grad:
            gw = np.empty((N, F, k, k, H, W), dtype=g.dtype)
            for f in range(F):
                for i in range(k):
                    for j in range(k):
                        gw[:, f, i, j] = (g * fp[:, f, :, i : i + H, j : j + W]).sum(axis=1)
            gw = gw.reshape(weights.shape)
        if frames.requires_grad:
            gfp = np.zeros(fp.shape, dtype=g.dtype)
            for f in range(F):
                for i in range(k):
                    for j in range(k):
                        gfp[:, f, :, i : i + H, j : j + W] += wd[:, f, i, j][:, None] * g
            gf = _pad_grad(gfp, frames.shape, widths, padding)
        return gf, gw

    return _record(out, (frames, weights), fn, "local_filter")


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], theta, h: float = 1e-4) -> float:
    """Max over coordinates of ``|analytic - central difference| / max(1, |analytic|)``.

    ``f`` maps a tensor to a scalar tensor and must be deterministic. The check
    runs in double precision; any NaN yields ``inf``.
    """
    base = np.array(theta.data if isinstance(theta, Tensor) else theta, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    loss = f(x)
    backward(loss)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(base)).data)
            flat[i] = orig - h
            fm = float(f(Tensor(base)).data)
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2.0 * h)
    if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
        return float("inf")
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
