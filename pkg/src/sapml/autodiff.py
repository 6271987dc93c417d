"""Tape-based reverse-mode automatic differentiation on float64 numpy arrays.

Every primitive records a node on the active :class:`Graph`.  Backward rules
are themselves written with primitives, so calling :func:`gradient` with
``create_graph=True`` records the backward pass on the same tape and the
returned gradients can be differentiated again.

    with Graph():
        w = Tensor(0.0, requires_grad=True)
        loss = (w - 3.0) ** 2
        (g,) = gradient(loss, [w], create_graph=True)
        (h,) = gradient(g, [w])      # d2/dw2 = 2
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "InvalidShapeError",
    "create",
    "gradient",
    "finite_diff_oracle",
    "no_record",
    "add",
    "sub",
    "neg",
    "mul",
    "scale",
    "matmul",
    "permute",
    "broadcast_to",
    "sum_to",
    "tsum",
    "mean",
    "reshape",
    "flatten",
    "relu",
    "exp",
    "log",
    "power",
    "getitem",
    "scatter",
    "stack",
    "conv2d",
    "conv2d_wgrad",
    "flip",
    "maxpool2d",
    "batch_norm",
    "softmax",
    "mse_loss",
    "softmax_cross_entropy",
]


class ShapeError(ValueError):
    """Operands do not conform to a primitive's shape contract."""


class InvalidShapeError(ValueError):
    """A requested tensor shape has a zero or negative dimension."""


_graphs: list["Graph"] = []
_recording = True


class Graph:
    """Append-only tape of primitive applications.

    Nodes are stored in insertion order, which is a valid topological order
    because a node can only consume tensors that already exist.  Graphs nest;
    the innermost active one receives new nodes.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.generation = 0

    def __enter__(self) -> "Graph":
        _graphs.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _graphs.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


class _Node:
    __slots__ = ("kind", "inputs", "out", "backward", "ctx", "graph", "index")

    def __init__(self, kind, inputs, out, backward, ctx, graph, index):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.backward = backward
        self.ctx = ctx
        self.graph = graph
        self.index = index


class no_record:
    """Context manager suspending graph recording (values only)."""

    def __enter__(self):
        global _recording
        self._prev = _recording
        _recording = False

    def __exit__(self, *exc):
        global _recording
        _recording = self._prev


class Tensor:
    """A float64 array that may participate in the active computation graph."""

    __slots__ = ("data", "requires_grad", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return permute(self, tuple(reversed(range(self.ndim))))

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(other, power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, c):
        return power(self, c)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_new = object.__new__


def _wrap(data: np.ndarray) -> Tensor:
    out = _new(Tensor)
    out.data = data
    out.requires_grad = False
    out._node = None
    return out


def _record(kind: str, out_data, inputs: tuple, backward, ctx=None) -> Tensor:
    out = _new(Tensor)
    out.data = out_data if type(out_data) is np.ndarray else np.asarray(out_data, dtype=np.float64)
    out.requires_grad = False
    out._node = None
    if _recording and _graphs:
        for inp in inputs:
            if inp.requires_grad:
                break
        else:
            return out
        graph = _graphs[-1]
        out.requires_grad = True
        out._node = _Node(kind, inputs, out, backward, ctx, graph, len(graph.nodes))
        graph.nodes.append(out._node)
    return out


# ---------------------------------------------------------------------------
# construction


def create(shape, init="zeros", rng: np.random.Generator | None = None, *, value=None,
           low=0.0, high=1.0, loc=0.0, std=1.0, requires_grad=False) -> Tensor:
    """Allocate a tensor filled by ``init``.

    ``init`` is one of ``zeros``, ``ones``, ``constant`` (uses ``value``),
    ``uniform`` (``low``, ``high``) or ``normal`` (``loc``, ``std``).
    Stochastic fills draw from ``rng``.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise InvalidShapeError(f"invalid shape {shape}: dimensions must be >= 1")
    if init == "zeros":
        data = np.zeros(shape)
    elif init == "ones":
        data = np.ones(shape)
    elif init == "constant":
        if value is None:
            raise ValueError("constant init needs a value")
        data = np.full(shape, float(value))
    elif init in ("uniform", "normal"):
        if rng is None:
            raise ValueError(f"{init} init needs a seeded generator")
        if init == "uniform":
            data = rng.uniform(low, high, size=shape)
        else:
            data = rng.normal(loc, std, size=shape)
    else:
        raise ValueError(f"unknown init policy {init!r}")
    return Tensor(data, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    out = g.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


def _add_bw(g, node, needs):
    a, b = node.inputs
    return (sum_to(g, a.data.shape) if needs[0] else None,
            sum_to(g, b.data.shape) if needs[1] else None)


def add(a, b) -> Tensor:
    if type(a) is not Tensor:
        a = _t(a)
    if type(b) is not Tensor:
        b = _t(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    return _record("add", data, (a, b), _add_bw)


def _sub_bw(g, node, needs):
    a, b = node.inputs
    return (sum_to(g, a.shape) if needs[0] else None,
            sum_to(neg(g), b.shape) if needs[1] else None)


def sub(a, b) -> Tensor:
    if type(a) is not Tensor:
        a = _t(a)
    if type(b) is not Tensor:
        b = _t(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None
    return _record("sub", data, (a, b), _sub_bw)


def _neg_bw(g, node, needs):
    return (neg(g),)


def neg(a) -> Tensor:
    a = _t(a)
    return _record("neg", -a.data, (a,), _neg_bw)


def _mul_bw(g, node, needs):
    a, b = node.inputs
    return (sum_to(mul(g, b), a.data.shape) if needs[0] else None,
            sum_to(mul(g, a), b.data.shape) if needs[1] else None)


def mul(a, b) -> Tensor:
    if type(a) is not Tensor:
        a = _t(a)
    if type(b) is not Tensor:
        b = _t(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    return _record("mul", data, (a, b), _mul_bw)


def _scale_bw(g, node, needs):
    return (scale(g, node.ctx),)


def scale(a, c: float) -> Tensor:
    """Multiply by a constant python scalar."""
    a = _t(a)
    c = float(c)
    return _record("scale", a.data * c, (a,), _scale_bw, c)


def _power_bw(g, node, needs):
    (a,) = node.inputs
    c = node.ctx
    return (mul(g, scale(power(a, c - 1.0), c)),)


def power(a, c: float) -> Tensor:
    """Elementwise ``a ** c`` for a constant exponent."""
    a = _t(a)
    c = float(c)
    if c == 1.0:
        return a
    return _record("power", a.data ** c, (a,), _power_bw, c)


def _exp_bw(g, node, needs):
    return (mul(g, node.out),)


def exp(a) -> Tensor:
    a = _t(a)
    return _record("exp", np.exp(a.data), (a,), _exp_bw)


def _log_bw(g, node, needs):
    return (mul(g, power(node.inputs[0], -1.0)),)


def log(a) -> Tensor:
    a = _t(a)
    return _record("log", np.log(a.data), (a,), _log_bw)


def _relu_bw(g, node, needs):
    return (mul(g, node.ctx),)


def relu(a) -> Tensor:
    """Rectifier; the derivative at exactly 0 is taken as 0."""
    a = _t(a)
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), _relu_bw, Tensor(mask))


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def _broadcast_bw(g, node, needs):
    return (sum_to(g, node.inputs[0].shape),)


def broadcast_to(a, shape) -> Tensor:
    a = _t(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _record("broadcast_to", data, (a,), _broadcast_bw)


def _sum_to_bw(g, node, needs):
    return (broadcast_to(g, node.inputs[0].shape),)


def sum_to(a, shape) -> Tensor:
    """Sum out broadcast dimensions so the result has ``shape``."""
    a = _t(a)
    if a.data.shape == shape:
        return a
    shape = tuple(shape)
    return _record("sum_to", _sum_to_shape(a.data, shape), (a,), _sum_to_bw)


def _sum_bw(g, node, needs):
    (a,) = node.inputs
    axis, keepdims = node.ctx
    if axis is not None and not keepdims:
        g = reshape(g, np.expand_dims(g.data, axis).shape)
    elif axis is None and not keepdims:
        g = reshape(g, (1,) * a.ndim)
    return (broadcast_to(g, a.shape),)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    if isinstance(axis, list):
        axis = tuple(axis)
    return _record("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), _sum_bw, (axis, keepdims))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def _reshape_bw(g, node, needs):
    return (reshape(g, node.inputs[0].shape),)


def reshape(a, shape) -> Tensor:
    a = _t(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _record("reshape", data, (a,), _reshape_bw)


def flatten(a) -> Tensor:
    """Collapse every axis after the first."""
    a = _t(a)
    return reshape(a, (a.shape[0], -1) if a.ndim > 1 else a.shape)


def _permute_bw(g, node, needs):
    return (permute(g, tuple(np.argsort(node.ctx))),)


def permute(a, axes) -> Tensor:
    a = _t(a)
    axes = tuple(axes)
    if axes == tuple(range(a.data.ndim)):
        return a
    return _record("permute", a.data.transpose(axes), (a,), _permute_bw, axes)


def _getitem_bw(g, node, needs):
    return (scatter(g, node.ctx, node.inputs[0].shape),)


def getitem(a, idx) -> Tensor:
    """Basic (int/slice) indexing."""
    a = _t(a)
    return _record("getitem", a.data[idx], (a,), _getitem_bw, idx)


def _scatter_bw(g, node, needs):
    return (getitem(g, node.ctx[0]),)


def scatter(a, idx, shape) -> Tensor:
    """Place ``a`` at ``idx`` inside a zero tensor of ``shape`` (adjoint of getitem)."""
    a = _t(a)
    out = np.zeros(shape)
    out[idx] = a.data
    return _record("scatter", out, (a,), _scatter_bw, (idx, tuple(shape)))


def _stack_bw(g, node, needs):
    return tuple(getitem(g, i) if needs[i] else None for i in range(len(node.inputs)))


def stack(tensors: Sequence) -> Tensor:
    """Stack equally shaped tensors along a new leading axis."""
    ts = tuple(_t(x) for x in tensors)
    if not ts:
        raise ShapeError("stack: empty input list")
    shape = ts[0].shape
    for x in ts:
        if x.shape != shape:
            raise ShapeError(f"stack: mismatched shapes {shape} and {x.shape}")
    return _record("stack", np.stack([x.data for x in ts]), ts, _stack_bw)


# ---------------------------------------------------------------------------
# linear algebra


def _matmul_bw(g, node, needs):
    a, b = node.inputs
    ta, tb = node.ctx
    ga = gb = None
    if not ta and not tb:
        if needs[0]:
            ga = matmul(g, b, tb=True)
        if needs[1]:
            gb = matmul(a, g, ta=True)
    elif tb and not ta:
        if needs[0]:
            ga = matmul(g, b)
        if needs[1]:
            gb = matmul(g, a, ta=True)
    elif ta and not tb:
        if needs[0]:
            ga = matmul(b, g, tb=True)
        if needs[1]:
            gb = matmul(a, g)
    else:
        if needs[0]:
            ga = matmul(b, g, ta=True, tb=True)
        if needs[1]:
            gb = matmul(g, a, ta=True, tb=True)
    return ga, gb


def matmul(a, b, ta: bool = False, tb: bool = False) -> Tensor:
    """Two-dimensional matrix product ``op(a) @ op(b)``; ``ta``/``tb`` transpose an operand."""
    a, b = _t(a), _t(b)
    ad_, bd = a.data, b.data
    if ad_.ndim != 2 or bd.ndim != 2:
        raise ShapeError(f"matmul: operands must be 2-D, got {ad_.shape} and {bd.shape}")
    if ta:
        ad_ = ad_.T
    if tb:
        bd = bd.T
    if ad_.shape[1] != bd.shape[0]:
        raise ShapeError(f"matmul: incompatible operands {ad_.shape} @ {bd.shape}")
    return _record("matmul", ad_ @ bd, (a, b), _matmul_bw, (ta, tb))


# ---------------------------------------------------------------------------
# convolution and pooling (NCHW, stride 1, "same" zero padding, odd kernels)


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    return sliding_window_view(xp, (k, k), axis=(2, 3))  # N,C,H,W,k,k


def _conv2d_bw(g, node, needs):
    x, w = node.inputs
    gx = conv2d(g, flip(permute(w, (1, 0, 2, 3)))) if needs[0] else None
    gw = conv2d_wgrad(x, g, w.shape[2]) if needs[1] else None
    return gx, gw


def conv2d(x, w) -> Tensor:
    """Cross-correlate ``x`` (N,C,H,W) with ``w`` (O,C,k,k); output (N,O,H,W)."""
    x, w = _t(x), _t(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3] \
            or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: incompatible input {x.shape} and kernel {w.shape}")
    win = _windows(x.data, w.shape[2])
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # N,H,W,O
    return _record("conv2d", np.ascontiguousarray(out.transpose(0, 3, 1, 2)), (x, w), _conv2d_bw)


def _wgrad_bw(g, node, needs):
    x, gy = node.inputs
    gx = conv2d(gy, flip(permute(g, (1, 0, 2, 3)))) if needs[0] else None
    gg = conv2d(x, g) if needs[1] else None
    return gx, gg


def conv2d_wgrad(x, gy, k: int) -> Tensor:
    """Kernel gradient of :func:`conv2d`: correlation of input and output signal."""
    x, gy = _t(x), _t(gy)
    if x.ndim != 4 or gy.ndim != 4 or x.shape[0] != gy.shape[0] or x.shape[2:] != gy.shape[2:]:
        raise ShapeError(f"conv2d_wgrad: incompatible input {x.shape} and signal {gy.shape}")
    win = _windows(x.data, k)
    out = np.tensordot(gy.data, win, axes=([0, 2, 3], [0, 2, 3]))  # O,C,k,k
    return _record("conv2d_wgrad", out, (x, gy), _wgrad_bw)


def _flip_bw(g, node, needs):
    return (flip(g),)


def flip(a) -> Tensor:
    """Reverse the last two axes."""
    a = _t(a)
    return _record("flip", np.ascontiguousarray(a.data[..., ::-1, ::-1]), (a,), _flip_bw)


def _gather_bw(g, node, needs):
    mask, in_shape = node.ctx
    return (_pool_scatter(g, mask, in_shape),)


def _pool_gather(x: Tensor, mask: np.ndarray) -> Tensor:
    n, c, h2, w2 = mask.shape
    sel = x.data[:, :, :h2, :w2] * mask
    out = sel.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
    return _record("pool_gather", out, (x,), _gather_bw, (mask, x.shape))


def _scatter_pool_bw(g, node, needs):
    mask, _ = node.ctx
    return (_pool_gather(g, mask),)


def _pool_scatter(g: Tensor, mask: np.ndarray, in_shape) -> Tensor:
    n, c, h2, w2 = mask.shape
    out = np.zeros(in_shape)
    out[:, :, :h2, :w2] = np.repeat(np.repeat(g.data, 2, axis=2), 2, axis=3) * mask
    return _record("pool_scatter", out, (g,), _scatter_pool_bw, (mask, in_shape))


def maxpool2d(x) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    Ties resolve to the first maximum in row-major window order.
    """
    x = _t(x)
    if x.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"maxpool2d: need N,C,H,W with H,W >= 2, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    win = x.data[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    arg = win.reshape(n, c, ho, wo, 4).argmax(axis=-1)
    onehot = np.zeros((n, c, ho, wo, 4))
    np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
    mask = onehot.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    return _pool_gather(x, mask)


# ---------------------------------------------------------------------------
# composites


def batch_norm(x, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization using the statistics of the batch at hand."""
    x = _t(x)
    if x.ndim == 4:
        axes, pshape = (0, 2, 3), (1, x.shape[1], 1, 1)
    elif x.ndim == 2:
        axes, pshape = (0,), (1, x.shape[1])
    else:
        raise ShapeError(f"batch_norm: expected 2-D or 4-D input, got {x.shape}")
    mu = mean(x, axes, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axes, keepdims=True)
    out = mul(xc, power(add(var, eps), -0.5))
    if gamma is not None:
        out = mul(out, reshape(gamma, pshape))
    if beta is not None:
        out = add(out, reshape(beta, pshape))
    return out


def softmax(logits, axis: int = -1) -> Tensor:
    logits = _t(logits)
    shifted = sub(logits, logits.data.max(axis=axis, keepdims=True))
    e = exp(shifted)
    return mul(e, power(tsum(e, axis, keepdims=True), -1.0))


def mse_loss(pred, target) -> Tensor:
    """Mean squared error over all elements."""
    pred, target = _t(pred), _t(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    d = sub(pred, target)
    return mean(mul(d, d))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``.

    ``logits`` is a vector with a scalar label, or a (B, N) batch with B labels.
    """
    logits = _t(logits)
    single = logits.ndim == 1
    if single:
        logits = reshape(logits, (1, logits.shape[0]))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    b, n = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"softmax_cross_entropy: {b} rows but labels shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= n:
        raise ValueError(f"label out of range for {n} classes: {labels.tolist()}")
    m = logits.data.max(axis=1, keepdims=True)
    shifted = sub(logits, m)
    lse = log(tsum(exp(shifted), 1, keepdims=True))
    onehot = np.zeros((b, n))
    onehot[np.arange(b), labels] = 1.0
    picked = tsum(mul(shifted, onehot), 1, keepdims=True)
    return mean(sub(lse, picked))


# ---------------------------------------------------------------------------
# differentiation


def gradient(loss: Tensor, wrt, create_graph: bool = False):
    """Reverse-mode gradient of a scalar ``loss``.

    ``wrt`` is a sequence of tensors (a list is returned) or a mapping of
    identifiers to tensors (a dict with the same keys is returned).  Tensors
    the loss does not depend on receive zeros.  With ``create_graph`` the
    backward computation is recorded so results can be differentiated again.
    """
    if loss.size != 1:
        raise ShapeError(f"gradient: loss must be scalar, got shape {loss.shape}")
    keyed = isinstance(wrt, Mapping)
    targets = list(wrt.values()) if keyed else list(wrt)
    want = {id(t) for t in targets}
    found: dict[int, Tensor] = {}

    node = loss._node
    if node is None:
        if id(loss) not in want:
            raise ValueError("gradient: loss is not recorded on an active graph")
    elif node.graph not in _graphs:
        raise ValueError("gradient: loss belongs to a graph that is no longer active")

    global _recording
    prev = _recording
    _recording = bool(create_graph)
    try:
        seed = _wrap(np.ones(loss.shape))
        grads: dict[int, Tensor] = {id(loss): seed}
        if node is not None:
            graph = node.graph
            graph.generation += 1
            for i in range(node.index, -1, -1):
                n = graph.nodes[i]
                key = id(n.out)
                g = grads.pop(key, None)
                if g is None:
                    continue
                if key in want:
                    found[key] = g
                inputs = n.inputs
                needs = [inp.requires_grad for inp in inputs]
                for inp, ig in zip(inputs, n.backward(g, n, needs)):
                    if ig is None or not inp.requires_grad:
                        continue
                    k = id(inp)
                    prev_g = grads.get(k)
                    grads[k] = ig if prev_g is None else add(prev_g, ig)
        for k, g in grads.items():
            if k in want and k not in found:
                found[k] = g
    finally:
        _recording = prev

    out = []
    for t in targets:
        g = found.get(id(t))
        if g is None:
            g = Tensor(np.zeros(t.shape))
        elif g.shape != t.shape:
            g = sum_to(g, t.shape) if g.ndim >= t.ndim else reshape(g, t.shape)
        out.append(g)
    if keyed:
        return dict(zip(wrt.keys(), out))
    return out


def finite_diff_oracle(f: Callable[[dict], float], params: Mapping[str, np.ndarray],
                       h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``f`` at ``params`` (a dict of arrays)."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out = {}
    for key, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(base))
            flat[i] = orig - h
            fm = float(f(base))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out[key] = g
    return out
