"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Graph` is an append-only tape. Every op appends one node holding its
value, its parent nodes and a closure mapping the output gradient to parent
gradients. :meth:`Graph.backward` walks the tape in reverse once and returns a
fresh set of gradients, so calling it twice on the same target yields
identical results.
"""
from __future__ import annotations

import math
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAKY_SLOPE = 0.2
_LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""


class Tensor:
    """A node on a :class:`Graph`."""

    __slots__ = ("data", "graph", "index", "parents", "backward_fn", "name", "op", "requires_grad")

    def __init__(self, data, graph, index, parents, backward_fn, name=None, op="leaf",
                 requires_grad=True):
        self.requires_grad = requires_grad
        self.data = data
        self.graph = graph
        self.index = index
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor({self.op}{label}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


class Graph:
    """Append-only record of operations."""

    def __init__(self):
        self.nodes = []

    def _record(self, data, parents, backward_fn, op, name=None, requires_grad=None) -> Tensor:
        data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise FloatingPointError(f"{op}: non-finite value in forward output")
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        if not requires_grad:
            # nothing can flow back through this node, so it is not kept on the tape
            return Tensor(data, self, -1, (), None, name, op, False)
        node = Tensor(data, self, len(self.nodes), tuple(parents), backward_fn, name, op, requires_grad)
        self.nodes.append(node)
        return node

    def constant(self, array, name=None) -> Tensor:
        return self._record(np.array(array, dtype=np.float64), (), None, "constant", name, False)

    def parameter(self, name: str, array) -> Tensor:
        """Leaf whose gradient is reported under ``name`` by :meth:`backward`."""
        return self._record(np.asarray(array, dtype=np.float64), (), None, "parameter", name, True)

    def backward(self, target: Tensor) -> "Gradients":
        if target.graph is not self:
            raise ValueError("backward: target belongs to a different graph")
        if target.data.size != 1:
            raise ShapeError(f"backward: target must be scalar, got shape {target.shape}")
        if not target.requires_grad:
            return Gradients(self, {})
        grads: Dict[int, np.ndarray] = {target.index: np.ones_like(target.data)}
        for node in reversed(self.nodes[: target.index + 1]):
            g = grads.pop(node.index, None)
            if g is None or not node.requires_grad:
                continue
            if node.backward_fn is None:
                grads[node.index] = g  # keep leaf gradient
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + pg
                else:
                    grads[parent.index] = pg
        return Gradients(self, grads)


class Gradients:
    """Result of one backward pass: gradients keyed by node and by parameter name."""

    def __init__(self, graph: Graph, by_index: Dict[int, np.ndarray]):
        self._graph = graph
        self._by_index = by_index

    def wrt(self, node: Tensor) -> np.ndarray:
        g = self._by_index.get(node.index)
        return np.zeros_like(node.data) if g is None else g

    def parameters(self) -> Dict[str, np.ndarray]:
        out = {}
        for node in self._graph.nodes:
            if node.op == "parameter":
                g = self.wrt(node)
                out[node.name] = out[node.name] + g if node.name in out else g
        return out


# ---------------------------------------------------------------------------
# helpers


def _graph_of(*operands) -> Graph:
    for x in operands:
        if isinstance(x, Tensor):
            return x.graph
    raise TypeError("at least one operand must be a Tensor")


def _lift(graph: Graph, x) -> Tensor:
    if isinstance(x, Tensor):
        if x.graph is not graph:
            raise ValueError("operands belong to different graphs")
        return x
    return graph.constant(x)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return g._record(a.data + b.data, (a, b),
                     lambda gr: (_unbroadcast(gr, sa), _unbroadcast(gr, sb)), "add")


def sub(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return g._record(a.data - b.data, (a, b),
                     lambda gr: (_unbroadcast(gr, sa), -_unbroadcast(gr, sb)), "sub")


def neg(a: Tensor) -> Tensor:
    return a.graph._record(-a.data, (a,), lambda gr: (-gr,), "neg")


def mul(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def backward(gr):
        return _unbroadcast(gr * bd, ad.shape), _unbroadcast(gr * ad, bd.shape)

    return g._record(ad * bd, (a, b), backward, "mul")


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return x.graph._record(out, (x,), lambda gr: (np.where(pos, gr, slope * gr),), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    out = _np_sigmoid(x.data)
    return x.graph._record(out, (x,), lambda gr: (gr * out * (1.0 - out),), "sigmoid")


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) without the underflow of composing the two."""
    out = -np.logaddexp(0.0, -x.data)
    s = _np_sigmoid(-x.data)
    return x.graph._record(out, (x,), lambda gr: (gr * s,), "log_sigmoid")


def log(x: Tensor) -> Tensor:
    d = x.data
    if np.any(d <= 0):
        raise FloatingPointError("log: non-positive input")
    return x.graph._record(np.log(d), (x,), lambda gr: (gr / d,), "log")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return x.graph._record(out, (x,), lambda gr: (gr * out,), "exp")


def _np_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# reductions and reshaping


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(gr):
        if axis is not None and not keepdims:
            gr = np.expand_dims(gr, axis)
        return (np.broadcast_to(gr, shape).copy(),)

    return x.graph._record(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """log sum exp along ``axis`` with keepdims."""
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s
    return x.graph._record(out, (x,), lambda gr: (gr * soft,), "logsumexp")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(shape)
    return x.graph._record(out, (x,), lambda gr: (gr.reshape(old),), "reshape")


def getitem(x: Tensor, key) -> Tensor:
    shape = x.shape
    parts = key if isinstance(key, tuple) else (key,)
    basic = all(isinstance(k, (slice, int)) for k in parts)

    def backward(gr):
        full = np.zeros(shape)
        if basic:
            full[key] = gr
        else:
            np.add.at(full, key, gr)
        return (full,)

    return x.graph._record(x.data[key], (x,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    g = _graph_of(*tensors)
    tensors = [_lift(g, t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return g._record(out, tensors, lambda gr: tuple(np.split(gr, splits, axis=axis)), "concat")


# ---------------------------------------------------------------------------
# linear algebra and image ops


def matmul(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    return g._record(ad @ bd, (a, b), lambda gr: (gr @ bd.T, ad.T @ gr), "matmul")


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N,C,H,W) -> (C*9, N*H*W) patches of the zero-padded input."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))  # n,c,h,w,3,3
    return cols.transpose(1, 4, 5, 0, 2, 3).reshape(c * 9, n * h * w)


def _conv_forward(x: np.ndarray, wmat: np.ndarray):
    n, _, h, w = x.shape
    cols = _im2col(x)
    out = (wmat @ cols).reshape(-1, n, h, w).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def conv2d(x: Tensor, weight: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1. x: (N,C,H,W), weight: (O,C,3,3)."""
    g = _graph_of(x, weight)
    x, weight = _lift(g, x), _lift(g, weight)
    if x.data.ndim != 4 or weight.data.ndim != 4 or weight.shape[2:] != (3, 3) \
            or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} and kernel {weight.shape} do not conform")
    n, c, h, w = x.shape
    o = weight.shape[0]
    wd = weight.data
    out, cols = _conv_forward(x.data, wd.reshape(o, c * 9))

    def backward(gr):
        dx = dw = None
        if weight.requires_grad:
            gmat = gr.transpose(1, 0, 2, 3).reshape(o, n * h * w)
            dw = (gmat @ cols.T).reshape(wd.shape)
        if x.requires_grad:
            # input gradient: correlation of gr with the flipped, transposed kernel
            flipped = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, o * 9)
            dx, _ = _conv_forward(gr, flipped)
        return dx, dw

    return g._record(out, (x, weight), backward, "conv2d")


def downsample2x(x: Tensor) -> Tensor:
    """2x2 average pooling."""
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"downsample2x: need (N,C,even,even), got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(gr):
        return (np.repeat(np.repeat(gr, 2, axis=2), 2, axis=3) * 0.25,)

    return x.graph._record(out, (x,), backward, "downsample2x")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2x: need (N,C,H,W), got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(gr):
        return (gr.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return x.graph._record(out, (x,), backward, "upsample2x")


def channel_affine(x: Tensor, scale, bias) -> Tensor:
    """Per-channel ``x * scale + bias``; scale, bias are (C,) or (N,C)."""
    g = _graph_of(x, scale, bias)
    x, scale, bias = _lift(g, x), _lift(g, scale), _lift(g, bias)
    c = x.shape[1]
    for t in (scale, bias):
        if t.shape[-1] != c or t.data.ndim not in (1, 2) or (t.data.ndim == 2 and t.shape[0] != x.shape[0]):
            raise ShapeError(f"channel_affine: input {x.shape} with scale {scale.shape}, bias {bias.shape}")
    extra = (None,) * (x.data.ndim - 2)

    def expand(t):
        return t.data[(None, slice(None)) + extra] if t.data.ndim == 1 else t.data[(slice(None), slice(None)) + extra]

    s, b = expand(scale), expand(bias)
    xd = x.data
    red = tuple(range(2, xd.ndim))

    def backward(gr):
        ds = (gr * xd).sum(axis=red)
        db = gr.sum(axis=red)
        if scale.data.ndim == 1:
            ds = ds.sum(axis=0)
        if bias.data.ndim == 1:
            db = db.sum(axis=0)
        return gr * s, ds, db

    return g._record(xd * s + b, (x, scale, bias), backward, "channel_affine")


def gaussian_log_density(c, mu, logvar) -> Tensor:
    """Elementwise log N(c; mu, exp(logvar))."""
    g = _graph_of(c, mu, logvar)
    c, mu, logvar = _lift(g, c), _lift(g, mu), _lift(g, logvar)
    if not (c.shape == mu.shape == logvar.shape):
        raise ShapeError(f"gaussian_log_density: shapes {c.shape}, {mu.shape}, {logvar.shape}")
    inv_var = np.exp(-logvar.data)
    diff = c.data - mu.data
    out = -0.5 * (_LOG_2PI + logvar.data + diff * diff * inv_var)

    def backward(gr):
        dmu = gr * diff * inv_var
        dlv = gr * 0.5 * (diff * diff * inv_var - 1.0)
        return -dmu, dmu, dlv

    return g._record(out, (c, mu, logvar), backward, "gaussian_log_density")


# ---------------------------------------------------------------------------
# parameters and optimization


class ParameterStore:
    """Named trainable arrays plus Adam moment accumulators."""

    def __init__(self):
        self.params: Dict[str, np.ndarray] = {}
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, array) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        array = np.array(array, dtype=np.float64)
        self.params[name] = array
        self.m[name] = np.zeros_like(array)
        self.v[name] = np.zeros_like(array)
        return array

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def assign(self, name: str, array) -> None:
        array = np.asarray(array, dtype=np.float64)
        if array.shape != self.params[name].shape:
            raise ShapeError(f"parameter {name!r}: shape {array.shape} != {self.params[name].shape}")
        self.params[name] = array.copy()

    def names(self, prefix: str = "") -> list:
        return [k for k in self.params if k.startswith(prefix)]

    def bind(self, graph: Graph, names: Optional[Iterable[str]] = None,
             trainable: bool = True) -> Dict[str, Tensor]:
        """Place parameters on ``graph`` as named leaves (or as constants when frozen)."""
        names = self.params if names is None else names
        if trainable:
            return {k: graph.parameter(k, self.params[k]) for k in names}
        return {k: graph.constant(self.params[k], name=k) for k in names}

    def copy(self) -> "ParameterStore":
        new = ParameterStore()
        for k in self.params:
            new.params[k] = self.params[k].copy()
            new.m[k] = self.m[k].copy()
            new.v[k] = self.v[k].copy()
        new.step = self.step
        return new


ADAM_DEFAULTS = dict(lr=1e-3, beta1=0.0, beta2=0.99, eps=1e-8)


def adam_step(store: ParameterStore, gradients: Dict[str, np.ndarray], lr: float = 1e-3,
              beta1: float = 0.0, beta2: float = 0.99, eps: float = 1e-8) -> ParameterStore:
    """One bias-corrected Adam update of the parameters named in ``gradients``.

    Parameters without a gradient entry are left untouched, moments included.
    """
    for name, g in gradients.items():
        p = store.params[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient for parameter {name!r}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in gradients.items():
        m = beta1 * store.m[name] + (1.0 - beta1) * g
        v = beta2 * store.v[name] + (1.0 - beta2) * g * g
        store.m[name], store.v[name] = m, v
        store.params[name] = store.params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad
