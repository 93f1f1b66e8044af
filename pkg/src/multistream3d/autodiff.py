"""Tape-based reverse-mode differentiation over the pipeline's op set.

Each op evaluates eagerly on float64 numpy arrays and appends one record
(output, inputs, vector-Jacobian product) to the tape. ``Tape.backward``
walks the records in exact reverse order.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import sparse as sp


class ShapeError(ValueError):
    pass


class ParamStore:
    """Named, fixed-shape parameter tensors."""

    def __init__(self):
        self._values: OrderedDict[str, np.ndarray] = OrderedDict()
        self._trainable: dict[str, bool] = {}

    def add(self, name, value, trainable=True):
        if name in self._values:
            raise KeyError(f"duplicate parameter {name!r}")
        self._values[name] = np.array(value, dtype=np.float64)
        self._trainable[name] = trainable
        return self._values[name]

    def __getitem__(self, name):
        return self._values[name]

    def __setitem__(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._values[name].shape:
            raise ShapeError(f"{name}: shape {value.shape} != {self._values[name].shape}")
        self._values[name] = value.copy()

    def __contains__(self, name):
        return name in self._values

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def items(self):
        return self._values.items()

    def trainable(self, name):
        return self._trainable[name]

    def trainable_names(self):
        return [n for n in self._values if self._trainable[n]]

    def copy(self):
        out = ParamStore()
        for n, v in self._values.items():
            out.add(n, v.copy(), self._trainable[n])
        return out

    def num_values(self):
        return int(sum(v.size for v in self._values.values()))


class Node:
    __slots__ = ("value", "tape", "idx", "param")

    def __init__(self, value, tape, idx, param=None):
        self.value = value
        self.tape = tape
        self.idx = idx
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Node(#{self.idx}, shape={self.value.shape})"


@dataclass
class _Record:
    out: int
    inputs: tuple
    vjp: object
    name: str


@dataclass
class Tape:
    params: ParamStore | None = None
    records: list = field(default_factory=list)
    _count: int = 0
    _param_nodes: dict = field(default_factory=dict)

    def _new(self, value, param=None):
        node = Node(value, self, self._count, param)
        self._count += 1
        return node

    def constant(self, value):
        return self._new(np.asarray(value, dtype=np.float64))

    def param(self, name):
        if name not in self._param_nodes:
            self._param_nodes[name] = self._new(self.params[name], param=name)
        return self._param_nodes[name]

    def record(self, name, value, inputs, vjp):
        out = self._new(value)
        self.records.append(_Record(out.idx, tuple(i.idx for i in inputs), vjp, name))
        return out

    def backward(self, loss: Node):
        """Gradients of a scalar loss for every trainable parameter."""
        if not isinstance(loss, Node) or loss.tape is not self:
            raise RuntimeError("loss was not produced on this tape")
        if loss.value.size != 1:
            raise ShapeError("backward needs a scalar loss")
        grads = {loss.idx: np.ones_like(loss.value)}
        for rec in reversed(self.records):
            g = grads.pop(rec.out, None)
            if g is None:
                continue
            for idx, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None:
                    continue
                if idx in grads:
                    grads[idx] = grads[idx] + gi
                else:
                    grads[idx] = gi
        out = OrderedDict()
        store = self.params if self.params is not None else {}
        for name in (store.trainable_names() if self.params is not None else []):
            node = self._param_nodes.get(name)
            g = grads.get(node.idx) if node is not None else None
            out[name] = np.zeros_like(store[name]) if g is None else np.asarray(g, dtype=np.float64).reshape(store[name].shape)
        return out


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise ValueError("at least one operand must be a Node")


def _lift(tape, x):
    return x if isinstance(x, Node) else tape.constant(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ------------------------------------------------------------ elementwise


def add(a, b):
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    sa, sb = a.shape, b.shape
    return t.record("add", a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    sa, sb = a.shape, b.shape
    return t.record("sub", a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    t = _tape_of(a, b)
    a, b = _lift(t, a), _lift(t, b)
    av, bv = a.value, b.value
    return t.record("mul", av * bv, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(x, c):
    return x.tape.record("scale", x.value * c, (x,), lambda g: (g * c,))


def relu(x):
    mask = x.value > 0
    return x.tape.record("relu", np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x):
    s = _sigmoid(x.value)
    return x.tape.record("sigmoid", s, (x,), lambda g: (g * s * (1 - s),))


def exp(x):
    e = np.exp(x.value)
    return x.tape.record("exp", e, (x,), lambda g: (g * e,))


def sin(x):
    v = x.value
    return x.tape.record("sin", np.sin(v), (x,), lambda g: (g * np.cos(v),))


def cos(x):
    v = x.value
    return x.tape.record("cos", np.cos(v), (x,), lambda g: (-g * np.sin(v),))


def _sigmoid(v):
    return np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))


# --------------------------------------------------------------- shaping


def reshape(x, shape):
    old = x.shape
    return x.tape.record("reshape", x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def column(x, start, stop):
    """Slice of columns [start, stop)."""
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return x.tape.record("column", x.value[:, start:stop], (x,), vjp)


def concat(xs, axis=1):
    t = _tape_of(*xs)
    xs = [_lift(t, x) for x in xs]
    sizes = np.cumsum([0] + [x.shape[axis] for x in xs])

    def vjp(g):
        return tuple(np.take(g, np.arange(sizes[i], sizes[i + 1]), axis=axis) for i in range(len(xs)))

    return t.record("concat", np.concatenate([x.value for x in xs], axis=axis), tuple(xs), vjp)


def gather_rows(x, idx):
    """Rows ``x[idx]`` with ``-1`` yielding zero rows."""
    idx = np.asarray(idx, dtype=np.int64)
    n, c = x.shape
    padded = np.concatenate([x.value, np.zeros((1, c))])
    safe = np.where(idx < 0, n, idx)

    def vjp(g):
        gp = np.zeros((n + 1, c))
        np.add.at(gp, safe, g)
        return (gp[:n],)

    return x.tape.record("gather_rows", padded[safe], (x,), vjp)


def spmm(matrix, x):
    """Product with a constant (scipy) sparse matrix."""
    mt = matrix.T.tocsr()
    return x.tape.record("spmm", np.asarray(matrix @ x.value), (x,), lambda g: (np.asarray(mt @ g),))


def total(x):
    return x.tape.record("sum", np.array(x.value.sum()), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean(x):
    n = max(x.value.size, 1)
    return x.tape.record("mean", np.array(x.value.sum() / n), (x,), lambda g: (np.full(x.shape, float(g) / n),))


# ---------------------------------------------------------------- linear


def matmul(x, w):
    t = _tape_of(x, w)
    x, w = _lift(t, x), _lift(t, w)
    xv, wv = x.value, w.value
    if xv.shape[-1] != wv.shape[0]:
        raise ShapeError(f"matmul {xv.shape} @ {wv.shape}")
    return t.record("matmul", xv @ wv, (x, w), lambda g: (g @ wv.T, xv.T @ g))


def linear(x, w, b):
    t = _tape_of(x, w, b)
    x, w, b = _lift(t, x), _lift(t, w), _lift(t, b)
    xv, wv = x.value, w.value
    if xv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ShapeError(f"linear input {xv.shape} vs weight {wv.shape}")
    return t.record("linear", xv @ wv + b.value, (x, w, b), lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))


@dataclass
class MLPSpec:
    widths: tuple

    def __post_init__(self):
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValueError("MLP needs at least one layer of positive width")

    @property
    def layers(self):
        return list(zip(self.widths[:-1], self.widths[1:]))


def init_mlp(params, spec: MLPSpec, prefix, rng):
    for i, (a, b) in enumerate(spec.layers):
        params.add(f"{prefix}.{i}.W", rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)))
        params.add(f"{prefix}.{i}.b", np.zeros(b))


def mlp_forward(points, spec: MLPSpec, params, prefix="mlp", tape=None):
    """Affine + ReLU chain with a linear final layer.

    With ``tape`` the result is a Node recorded on it; without, an ndarray.
    """
    own = tape is None
    if own:
        tape = Tape(params)
    x = points if isinstance(points, Node) else tape.constant(points)
    if x.shape[1] != spec.widths[0]:
        raise ShapeError(f"MLP expects {spec.widths[0]} inputs, got {x.shape[1]}")
    n = len(spec.layers)
    for i in range(n):
        x = linear(x, tape.param(f"{prefix}.{i}.W"), tape.param(f"{prefix}.{i}.b"))
        if i < n - 1:
            x = relu(x)
    return x.value if own else x


# ---------------------------------------------------------------- sparse


def sparse_conv(x: sp.SparseTensor, w: Node, b: Node, stride=1, mode="submanifold", plan=None):
    """Sparse convolution of a tensor whose feats are a Node."""
    feats = x.feats
    if feats.shape[1] != w.shape[1]:
        raise ShapeError(f"conv expects {w.shape[1]} channels, got {feats.shape[1]}")
    if plan is None:
        k = sp.kernel_size(w.shape[0], x.ndim)
        plan = sp.plan_conv(x.coords, x.extents, k, stride, mode)
    table, fv, wv = plan.table, feats.value, w.value
    out = sp.conv_forward(fv, table, wv, b.value)

    def vjp(g):
        return sp.conv_backward(fv, table, wv, g)

    node = feats.tape.record("sparse_conv", out, (feats, w, b), vjp)
    return sp.SparseTensor(plan.out_coords, node, plan.out_extents, None)


def _segment_max_node(x: Node, rows, starts, name):
    mx, arg = sp.segment_max(x.value, rows, starts)
    n, c = x.shape
    cols = np.broadcast_to(np.arange(c), arg.shape)

    def vjp(g):
        gx = np.zeros((n, c))
        # each (row, channel) is the argmax of at most one output cell
        gx[arg, cols] = g
        return (gx,)

    return x.tape.record(name, mx, (x,), vjp), arg


def scatter_max(values: Node, cells, extents, grid=None):
    plan = sp.plan_scatter(cells, extents)
    node, arg = _segment_max_node(values, plan.rows, plan.starts, "scatter_max")
    out = sp.SparseTensor(plan.out_coords, node, tuple(extents), grid)
    out.argmax = arg
    out.dropped = plan.dropped
    return out


def height_compress(x: sp.SparseTensor):
    starts, ij = sp.column_groups(x.coords)
    node, _ = _segment_max_node(x.feats, np.arange(len(x.coords)), starts, "height_compress")
    return sp.SparseTensor(ij.astype(np.int64), node, tuple(x.extents[:2]), None)


# ---------------------------------------------------------------- losses


def _check_same(a, b):
    if a.shape != np.shape(b):
        raise ShapeError(f"shape mismatch {a.shape} vs {np.shape(b)}")


def _log_sigmoid(v):
    return -np.logaddexp(0.0, -v)


def focal_binary(logits: Node, targets, alpha=0.25, gamma=2.0, weights=None):
    """Sigmoid focal loss, mean over elements with non-zero weight."""
    targets = np.asarray(targets, dtype=np.float64)
    _check_same(logits, targets)
    w = np.ones_like(targets) if weights is None else np.asarray(weights, dtype=np.float64)
    count = max(float(np.count_nonzero(w)), 1.0)
    x = logits.value
    s = _sigmoid(x)
    log_s, log_1s = _log_sigmoid(x), _log_sigmoid(-x)
    pos = targets > 0.5
    loss_pos = -alpha * (1 - s) ** gamma * log_s
    loss_neg = -(1 - alpha) * s**gamma * log_1s
    elem = np.where(pos, loss_pos, loss_neg)
    # d/dx of the two branches above
    g_pos = alpha * (1 - s) ** gamma * (gamma * s * log_s - (1 - s))
    g_neg = (1 - alpha) * s**gamma * (s - gamma * (1 - s) * log_1s)
    dx = np.where(pos, g_pos, g_neg) * w / count
    value = np.array((elem * w).sum() / count)
    return logits.tape.record("focal", value, (logits,), lambda g: (float(g) * dx,))


def bce_logits(logits: Node, targets, weights=None):
    targets = np.asarray(targets, dtype=np.float64)
    _check_same(logits, targets)
    w = np.ones_like(targets) if weights is None else np.asarray(weights, dtype=np.float64)
    count = max(float(np.count_nonzero(w)), 1.0)
    x = logits.value
    elem = -(targets * _log_sigmoid(x) + (1 - targets) * _log_sigmoid(-x))
    dx = (_sigmoid(x) - targets) * w / count
    return logits.tape.record("bce", np.array((elem * w).sum() / count), (logits,), lambda g: (float(g) * dx,))


def smooth_l1(pred, target, delta=1.0, weights=None):
    """Huber-style loss, mean over elements of rows with non-zero weight.

    ``weights`` is per row (N,) or per element; ``target`` may be a Node.
    """
    t = _tape_of(pred, target)
    pred, target = _lift(t, pred), _lift(t, target)
    _check_same(pred, target.value)
    d = pred.value - target.value
    w = np.ones_like(d) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.ndim == 1 and d.ndim == 2:
        w = np.repeat(w[:, None], d.shape[1], axis=1)
    count = max(float(np.count_nonzero(w)), 1.0)
    ad = np.abs(d)
    small = ad < delta
    elem = np.where(small, 0.5 * d * d / delta, ad - 0.5 * delta)
    dd = np.where(small, d / delta, np.sign(d)) * w / count
    value = np.array((elem * w).sum() / count)
    return t.record("smooth_l1", value, (pred, target), lambda g: (float(g) * dd, -float(g) * dd))


# ------------------------------------------------------------- optimizers


def _check_layout(params, grads):
    names = params.trainable_names()
    if list(grads) != names and set(grads) != set(names):
        raise KeyError("gradient layout does not match parameter store")
    for n in names:
        if grads[n].shape != params[n].shape:
            raise ShapeError(f"{n}: grad shape {grads[n].shape} != {params[n].shape}")


@dataclass
class SGDState:
    velocity: dict = field(default_factory=dict)


def sgd_step(params: ParamStore, grads, lr, momentum=0.0, state: SGDState | None = None):
    _check_layout(params, grads)
    state = state or SGDState()
    for n in params.trainable_names():
        v = state.velocity.get(n, np.zeros_like(params[n]))
        v = momentum * v + grads[n]
        state.velocity[n] = v
        params[n] = params[n] - lr * v
    return state


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: ParamStore, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8, state: AdamState | None = None):
    _check_layout(params, grads)
    state = state or AdamState()
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for n in params.trainable_names():
        g = grads[n]
        m = beta1 * state.m.get(n, np.zeros_like(g)) + (1 - beta1) * g
        v = beta2 * state.v.get(n, np.zeros_like(g)) + (1 - beta2) * g * g
        state.m[n], state.v[n] = m, v
        params[n] = params[n] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ------------------------------------------------------- gradient checking


def numerical_grad(f, x, h=1e-5, direction=None):
    """Central differences of scalar ``f`` at ``x``; full gradient or one
    directional derivative."""
    x = np.array(x, dtype=np.float64)
    if direction is not None:
        return (f(x + h * direction) - f(x - h * direction)) / (2 * h)
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        e = e.reshape(x.shape)
        flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
