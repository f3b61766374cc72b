"""Dense float64 tensors with reverse-mode automatic differentiation.

Forward values are plain NumPy arrays. When an operand is attached to a
ComputeGraph, each op appends a node holding vector-Jacobian closures, so a
later backward() pass accumulates exact gradients in reverse creation order
(which is a reverse topological order, since the tape is append-only).

Deliberate restrictions, chosen to keep shape bugs loud:
  * float64 only;
  * no broadcasting between tensors -- Python scalars are the only exception;
  * any op that would produce NaN or +-Inf from finite inputs raises.
"""

from __future__ import annotations

import math
import numbers
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ComputeGraph",
    "ShapeError",
    "GraphError",
    "NonFiniteError",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_trailing",
    "add_channels",
    "mul_channels",
    "matmul",
    "relu",
    "gelu",
    "exp",
    "log",
    "sqrt",
    "tsum",
    "tmean",
    "tstd",
    "reshape",
    "transpose",
    "concat",
    "softmax",
    "layernorm",
    "bilinear_resize",
    "cosine_similarity_lastaxis",
    "backward",
    "central_difference_gradient",
    "max_relative_error",
    "finite_difference_check",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class GraphError(RuntimeError):
    """Misuse of the compute graph (detached loss, mixed graphs, ...)."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or +-Inf."""


class _Node:
    __slots__ = ("op", "parents", "vjps")

    def __init__(self, op: str, parents: tuple[int, ...], vjps: tuple):
        self.op = op
        self.parents = parents
        self.vjps = vjps


class ComputeGraph:
    """Append-only tape of operation records plus gradients after backward().

    A graph and the tensors attached to it form a single-threaded unit;
    independent graphs may live on independent threads.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: dict[int, np.ndarray] = {}

    def leaf(self, data) -> "Tensor":
        """Attach `data` as a differentiable leaf of this graph."""
        arr = _as_array(data)
        nid = self._record("leaf", (), ())
        return Tensor(arr, self, nid)

    def _record(self, op: str, parents: tuple[int, ...], vjps: tuple) -> int:
        self.nodes.append(_Node(op, parents, vjps))
        return len(self.nodes) - 1

    def backward(self, loss: "Tensor") -> dict[int, np.ndarray]:
        return backward(loss)

    def gradient(self, t: "Tensor") -> np.ndarray:
        """Gradient of the last backward()'s loss w.r.t. `t` (zeros if t was
        not on any path to the loss)."""
        if t.graph is not self:
            raise GraphError("tensor does not belong to this graph")
        g = self.gradients.get(t.node)
        if g is None:
            return np.zeros_like(t.data)
        return g


_F64 = np.dtype(np.float64)


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    # a sum is non-finite iff some element is (overflow of huge finite values
    # also trips this, which we treat as an error all the same)
    if not math.isfinite(arr.sum()):
        raise NonFiniteError(f"{op} produced a non-finite value")


class Tensor:
    """N-dimensional float64 array, optionally attached to a ComputeGraph."""

    __slots__ = ("data", "graph", "node")

    def __init__(self, data, graph: ComputeGraph | None = None, node: int | None = None):
        if type(data) is np.ndarray and data.dtype == _F64:
            self.data = data
        else:
            self.data = _as_array(data)
        self.graph = graph
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = "" if self.graph is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}{tag})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    # shape ----------------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        return transpose(self, axes)

    def flatten(self) -> "Tensor":
        return reshape(self, (-1,))

    # reductions -----------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)

    def std(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tstd(self, axis, keepdims)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _emit(out: np.ndarray, op: str, operands: Iterable[tuple], check: bool = True) -> Tensor:
    """Build the result tensor, recording a graph node if any operand is
    attached. `operands` is a sequence of (tensor, vjp) pairs."""
    if check:
        _ensure_finite(out, op)
    graph = None
    parents: list[int] = []
    vjps: list = []
    for t, vjp in operands:
        if isinstance(t, Tensor) and t.graph is not None:
            if graph is None:
                graph = t.graph
            elif graph is not t.graph:
                raise GraphError(f"{op}: operands belong to different compute graphs")
            parents.append(t.node)
            vjps.append(vjp)
    if graph is None:
        return Tensor(out)
    nid = graph._record(op, tuple(parents), tuple(vjps))
    return Tensor(out, graph, nid)


def _emit1(out: np.ndarray, op: str, a: Tensor, vjp) -> Tensor:
    _ensure_finite(out, op)
    graph = a.graph
    if graph is None:
        return Tensor(out)
    nid = graph._record(op, (a.node,), (vjp,))
    return Tensor(out, graph, nid)


def _emit1_move(out: np.ndarray, op: str, a: Tensor, vjp) -> Tensor:
    # pure data movement cannot create non-finite values; skip the check
    graph = a.graph
    if graph is None:
        return Tensor(out)
    nid = graph._record(op, (a.node,), (vjp,))
    return Tensor(out, graph, nid)


def _emit2(out: np.ndarray, op: str, a: Tensor, vjp_a, b: Tensor, vjp_b) -> Tensor:
    _ensure_finite(out, op)
    ga, gb = a.graph, b.graph
    if ga is None:
        if gb is None:
            return Tensor(out)
        nid = gb._record(op, (b.node,), (vjp_b,))
        return Tensor(out, gb, nid)
    if gb is None:
        nid = ga._record(op, (a.node,), (vjp_a,))
        return Tensor(out, ga, nid)
    if ga is not gb:
        raise GraphError(f"{op}: operands belong to different compute graphs")
    nid = ga._record(op, (a.node, b.node), (vjp_a, vjp_b))
    return Tensor(out, ga, nid)


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --------------------------------------------------------------------------
# elementwise and linear ops
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _lift(a)
    if isinstance(b, numbers.Real) and not isinstance(b, Tensor):
        out = a.data + float(b)
        return _emit1(out, "add", a, lambda g: g)
    b = _lift(b)
    _check_same_shape("add", a, b)
    out = a.data + b.data
    return _emit2(out, "add", a, lambda g: g, b, lambda g: g)


def sub(a, b) -> Tensor:
    a = _lift(a)
    if isinstance(b, numbers.Real) and not isinstance(b, Tensor):
        out = a.data - float(b)
        return _emit1(out, "sub", a, lambda g: g)
    b = _lift(b)
    _check_same_shape("sub", a, b)
    out = a.data - b.data
    return _emit2(out, "sub", a, lambda g: g, b, lambda g: -g)


def mul(a, b) -> Tensor:
    a = _lift(a)
    if isinstance(b, numbers.Real) and not isinstance(b, Tensor):
        return scale(a, float(b))
    b = _lift(b)
    _check_same_shape("mul", a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data
    return _emit2(out, "mul", a, lambda g: g * bd, b, lambda g: g * ad)


def div(a, b) -> Tensor:
    a = _lift(a)
    if isinstance(b, numbers.Real) and not isinstance(b, Tensor):
        return scale(a, 1.0 / float(b))
    b = _lift(b)
    _check_same_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    ad, bd = a.data, b.data
    return _emit2(out, "div", a, lambda g: g / bd, b, lambda g: -g * ad / (bd * bd))


def scale(a, c: float) -> Tensor:
    a = _lift(a)
    c = float(c)
    out = a.data * c
    return _emit1(out, "scale", a, lambda g: g * c)


def add_trailing(a, b) -> Tensor:
    """Add `b` across the leading axes of `a`; b.shape must equal the
    trailing axes of a.shape exactly (explicit, validated broadcast)."""
    a, b = _lift(a), _lift(b)
    k = b.ndim
    if k == 0 or a.ndim < k or a.shape[a.ndim - k :] != b.shape:
        raise ShapeError(f"add_trailing: shape {b.shape} is not a suffix of {a.shape}")
    out = a.data + b.data
    lead = tuple(range(a.ndim - k))
    if not lead:
        return _emit2(out, "add_trailing", a, lambda g: g, b, lambda g: g)
    return _emit2(out, "add_trailing", a, lambda g: g, b, lambda g: np.sum(g, axis=lead))


def _channels_view(b: Tensor, a: Tensor) -> np.ndarray:
    if b.ndim != 1 or a.ndim < 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"channel op: vector {b.shape} does not match axis 1 of {a.shape}")
    return b.data.reshape((1, b.shape[0]) + (1,) * (a.ndim - 2))


def add_channels(a, b) -> Tensor:
    """Add a length-C vector along axis 1 of a (B, C, ...) tensor."""
    a, b = _lift(a), _lift(b)
    bv = _channels_view(b, a)
    out = a.data + bv
    axes = (0,) + tuple(range(2, a.ndim))
    return _emit2(out, "add_channels", a, lambda g: g, b, lambda g: np.sum(g, axis=axes))


def mul_channels(a, b) -> Tensor:
    """Multiply a (B, C, ...) tensor by a length-C vector along axis 1."""
    a, b = _lift(a), _lift(b)
    bv = _channels_view(b, a)
    out = a.data * bv
    ad = a.data
    axes = (0,) + tuple(range(2, a.ndim))
    return _emit2(out, "mul_channels", a, lambda g: g * bv, b, lambda g: np.sum(g * ad, axis=axes))


def matmul(a, b) -> Tensor:
    """Matrix product for 2-D operands or batched 3-D operands with equal
    leading dimension."""
    a = _lift(a)
    b = _lift(b)
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    else:
        raise ShapeError(f"matmul: unsupported ranks for shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data
    return _emit2(
        out,
        "matmul",
        a,
        lambda g: g @ bd.swapaxes(-1, -2),
        b,
        lambda g: ad.swapaxes(-1, -2) @ g,
    )


def relu(x) -> Tensor:
    x = _lift(x)
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0.0
    return _emit1(out, "relu", x, lambda g: g * mask)


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _lift(x)
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * phi
    local = phi + xd * np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
    return _emit1(out, "gelu", x, lambda g: g * local)


def exp(x) -> Tensor:
    x = _lift(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _emit1(out, "exp", x, lambda g: g * out)


def log(x) -> Tensor:
    x = _lift(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    xd = x.data
    return _emit1(out, "log", x, lambda g: g / xd)


def sqrt(x) -> Tensor:
    x = _lift(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return _emit1(out, "sqrt", x, lambda g: g / (2.0 * out))


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------

def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    axis = tuple(int(a) for a in axis)
    norm = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for {ndim}-d tensor")
        norm.append(a % ndim)
    if len(set(norm)) != len(norm):
        raise ShapeError(f"duplicate reduction axes {axis}")
    return tuple(sorted(norm))


def _unreduce(g: np.ndarray, in_shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.full(in_shape, g, dtype=np.float64)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, in_shape).copy()


def _reduced_count(shape: tuple[int, ...], axis) -> int:
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    n = 1
    for a in axis:
        n *= shape[a]
    return n


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    if x.size == 0:
        raise ShapeError("sum: reduction over empty tensor")
    axis = _norm_axis(axis, x.ndim)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    shape = x.shape
    return _emit1(np.asarray(out), "sum", x, lambda g: _unreduce(g, shape, axis, keepdims))


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    if x.size == 0:
        raise ShapeError("mean: reduction over empty tensor")
    axis = _norm_axis(axis, x.ndim)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    shape = x.shape
    n = _reduced_count(shape, axis)
    return _emit1(np.asarray(out), "mean", x, lambda g: _unreduce(g, shape, axis, keepdims) / n)


def tstd(x, axis=None, keepdims: bool = False) -> Tensor:
    """Population standard deviation (divide by n, not n-1)."""
    x = _lift(x)
    if x.size == 0:
        raise ShapeError("std: reduction over empty tensor")
    axis = _norm_axis(axis, x.ndim)
    mu = np.mean(x.data, axis=axis, keepdims=True)
    centered = x.data - mu
    sigma_kept = np.sqrt(np.mean(centered * centered, axis=axis, keepdims=True))
    out = sigma_kept if keepdims else np.squeeze(sigma_kept, axis=axis) if axis is not None else sigma_kept.reshape(())
    shape = x.shape
    n = _reduced_count(shape, axis)

    def vjp(g):
        gk = _unreduce(g, shape, axis, keepdims)
        # d sigma / dx = (x - mu) / (n * sigma); subgradient 0 where sigma == 0
        with np.errstate(divide="ignore", invalid="ignore"):
            local = np.where(sigma_kept > 0.0, centered / (n * sigma_kept), 0.0)
        return gk * local

    return _emit1(np.asarray(out), "std", x, vjp)


# --------------------------------------------------------------------------
# shape ops
# --------------------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = _lift(x)
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view shape {x.shape} as {tuple(shape)}") from e
    old = x.shape
    return _emit1_move(out, "reshape", x, lambda g: g.reshape(old))


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = _lift(x)
    if axes is None:
        axes = tuple(range(x.ndim - 1, -1, -1))
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of axes of shape {x.shape}")
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return _emit1_move(out, "transpose", x, lambda g: g.transpose(inv))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no tensors given")
    ndim = ts[0].ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"concat: axis {axis} out of range for {ndim}-d tensors")
    axis = axis % ndim
    ref = list(ts[0].shape)
    for t in ts[1:]:
        other = list(t.shape)
        if len(other) != ndim or any(r != o for i, (r, o) in enumerate(zip(ref, other)) if i != axis):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in ts])

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]
        sl = tuple(slice(None) if d != axis else slice(lo, hi) for d in range(ndim))
        return lambda g: g[sl]

    return _emit(out, "concat", [(t, make_vjp(i)) for i, t in enumerate(ts)], check=False)


def _getitem(x: Tensor, key) -> Tensor:
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (int, np.integer, slice)):
            raise ShapeError(f"slice: unsupported index {k!r}")
    out = x.data[key]
    shape = x.shape

    def vjp(g):
        z = np.zeros(shape, dtype=np.float64)
        z[key] = g
        return z

    return _emit1_move(out, "slice", x, vjp)


# --------------------------------------------------------------------------
# normalisation and similarity
# --------------------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    """Softmax along `axis`, computed with the max subtracted first."""
    x = _lift(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        inner = np.sum(g * out, axis=axis, keepdims=True)
        return out * (g - inner)

    return _emit1(out, "softmax", x, vjp)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit population variance,
    then apply the affine (gamma, beta)."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    if eps <= 0.0:
        raise ValueError(f"layernorm: eps must be positive, got {eps}")
    if x.ndim < 1 or x.shape[-1] == 0:
        raise ShapeError(f"layernorm: last axis of shape {x.shape} is empty")
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(
            f"layernorm: gamma {gamma.shape} / beta {beta.shape} do not match feature size {n}"
        )
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * gamma.data + beta.data
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def vjp_x(g):
        gy = g * gd
        m1 = np.mean(gy, axis=-1, keepdims=True)
        m2 = np.mean(gy * y, axis=-1, keepdims=True)
        return inv * (gy - m1 - y * m2)

    return _emit(
        out,
        "layernorm",
        [
            (x, vjp_x),
            (gamma, lambda g: np.sum(g * y, axis=lead)),
            (beta, lambda g: np.sum(g, axis=lead)),
        ],
    )


def _resize_axis(n_in: int, n_out: int):
    """Align-corners source coordinates: output i maps to i*(n_in-1)/(n_out-1)."""
    if n_out == 1:
        src = np.zeros(1)
    else:
        src = np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))
    i0 = np.clip(np.floor(src).astype(np.intp), 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    return i0, i1, w


def bilinear_resize(img, out_h: int, out_w: int) -> Tensor:
    """Resize a C x H x W image with the align-corners bilinear convention
    (corner pixels map exactly; same-size resize is bit-identical)."""
    img = _lift(img)
    if img.ndim != 3:
        raise ShapeError(f"bilinear_resize: expected C x H x W, got shape {img.shape}")
    c, h, w = img.shape
    if min(h, w) < 1 or min(out_h, out_w) < 1:
        raise ShapeError(f"bilinear_resize: degenerate size {img.shape} -> ({out_h}, {out_w})")
    i0, i1, wi = _resize_axis(h, out_h)
    j0, j1, wj = _resize_axis(w, out_w)
    w00 = ((1.0 - wi)[:, None] * (1.0 - wj)[None, :])[None, :, :]
    w01 = ((1.0 - wi)[:, None] * wj[None, :])[None, :, :]
    w10 = (wi[:, None] * (1.0 - wj)[None, :])[None, :, :]
    w11 = (wi[:, None] * wj[None, :])[None, :, :]
    d = img.data
    out = (
        d[:, i0[:, None], j0[None, :]] * w00
        + d[:, i0[:, None], j1[None, :]] * w01
        + d[:, i1[:, None], j0[None, :]] * w10
        + d[:, i1[:, None], j1[None, :]] * w11
    )
    ci = np.arange(c)[:, None, None]

    def vjp(g):
        gi = np.zeros((c, h, w), dtype=np.float64)
        np.add.at(gi, (ci, i0[None, :, None], j0[None, None, :]), g * w00)
        np.add.at(gi, (ci, i0[None, :, None], j1[None, None, :]), g * w01)
        np.add.at(gi, (ci, i1[None, :, None], j0[None, None, :]), g * w10)
        np.add.at(gi, (ci, i1[None, :, None], j1[None, None, :]), g * w11)
        return gi

    return _emit1(out, "bilinear_resize", img, vjp)


def cosine_similarity_lastaxis(a, b, eps: float = 1e-12) -> Tensor:
    """Cosine similarity along the last axis; `eps` is added to each norm so
    zero vectors yield 0 instead of dividing by zero."""
    a, b = _lift(a), _lift(b)
    if eps <= 0.0:
        raise ValueError(f"cosine similarity: eps must be positive, got {eps}")
    _check_same_shape("cosine_similarity", a, b)
    if a.ndim < 1:
        raise ShapeError("cosine_similarity: operands must have at least one axis")
    ad, bd = a.data, b.data
    dot = np.sum(ad * bd, axis=-1)
    na = np.sqrt(np.sum(ad * ad, axis=-1))
    nb = np.sqrt(np.sum(bd * bd, axis=-1))
    den = (na + eps) * (nb + eps)
    out = dot / den

    def unit(v, n):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(n[..., None] > 0.0, v / np.where(n == 0.0, 1.0, n)[..., None], 0.0)

    def vjp_a(g):
        term = bd / den[..., None] - (dot / (den * (na + eps)))[..., None] * unit(ad, na)
        return g[..., None] * term

    def vjp_b(g):
        term = ad / den[..., None] - (dot / (den * (nb + eps)))[..., None] * unit(bd, nb)
        return g[..., None] * term

    return _emit2(np.asarray(out), "cosine_similarity", a, vjp_a, b, vjp_b)


# --------------------------------------------------------------------------
# backward pass and gradient checking
# --------------------------------------------------------------------------

def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-accumulate gradients of a scalar loss over its graph.

    Returns (and stores on the graph) a map from node id to gradient for
    every node on a path from a leaf to the loss. Use graph.gradient() to
    read a zero for leaves the loss does not depend on.
    """
    if not isinstance(loss, Tensor) or loss.graph is None:
        raise GraphError("backward: loss is not attached to a compute graph")
    if loss.data.shape != ():
        raise GraphError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    graph = loss.graph
    grads: dict[int, np.ndarray] = {loss.node: np.ones((), dtype=np.float64)}
    for nid in range(loss.node, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        node = graph.nodes[nid]
        for pid, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            prev = grads.get(pid)
            grads[pid] = contrib if prev is None else prev + contrib
    graph.gradients = grads
    return grads


def central_difference_gradient(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar f at x via central differences."""
    if h <= 0.0:
        raise ValueError(f"central differences: h must be positive, got {h}")
    x = _as_array(x)
    num = np.zeros_like(x)
    flat = x.reshape(-1)
    out = num.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += h
        fp = float(f(Tensor(xp.reshape(x.shape))).data)
        xm = flat.copy()
        xm[i] -= h
        fm = float(f(Tensor(xm.reshape(x.shape))).data)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError("central differences: f returned a non-finite value")
        out[i] = (fp - fm) / (2.0 * h)
    return num


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max over components of |analytic - numeric| / max(1, |numeric|)."""
    analytic = _as_array(analytic)
    numeric = _as_array(numeric)
    if analytic.shape != numeric.shape:
        raise ShapeError(f"gradient shapes {analytic.shape} and {numeric.shape} differ")
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_difference_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Compare f's reverse-mode gradient at x against central differences;
    returns the max relative error."""
    x = _as_array(x)
    graph = ComputeGraph()
    leaf = graph.leaf(x)
    loss = f(leaf)
    if not isinstance(loss, Tensor) or loss.data.shape != ():
        raise GraphError("finite_difference_check: f must return a scalar tensor")
    backward(loss)
    analytic = graph.gradient(leaf)
    numeric = central_difference_gradient(f, x, h)
    return max_relative_error(analytic, numeric)
