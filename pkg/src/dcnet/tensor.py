"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Tape` records every differentiable operation applied to tensors
that live on it.  :func:`backward` walks the tape once, in reverse append
order, and returns gradients for the leaves.  Tensors that are not on a tape
are constants: operations on them are evaluated eagerly and never receive
gradients.

Shapes never broadcast.  Every binary elementwise op requires equal shapes.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when a documented precondition is violated."""


class DomainError(ValueError):
    """Raised when an input lies outside an operation's domain."""


class Tensor:
    """Immutable n-dimensional value, optionally bound to a node on a tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.node_id = node_id

    @classmethod
    def _wrap(cls, arr, tape=None, node_id=None):
        # internal: takes ownership of a freshly computed array, no copy
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t.data = arr
        t.tape = tape
        t.node_id = node_id
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return np.array(self.data)

    def detach(self):
        return Tensor._wrap(self.data)

    def __repr__(self):
        where = "const" if self.tape is None else f"node={self.node_id}"
        return f"Tensor(shape={self.shape}, {where})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("op", "inputs", "backward", "shape")

    def __init__(self, op, inputs, backward, shape):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.shape = shape


class Tape:
    """Append-only record of operations; inputs always precede consumers."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._watched: dict[int, tuple["Param", int]] = {}

    def __len__(self):
        return len(self.nodes)

    def leaf(self, data) -> Tensor:
        arr = np.array(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
        node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, arr.shape))
        return Tensor._wrap(arr, self, node_id)

    def watch(self, param: "Param") -> Tensor:
        """Bind ``param`` to this tape (once) and return its leaf tensor."""
        hit = self._watched.get(id(param))
        if hit is not None:
            return Tensor._wrap(param.data.copy(), self, hit[1])
        t = self.leaf(param.data)
        self.nodes[t.node_id].op = "param"
        self._watched[id(param)] = (param, t.node_id)
        return t

    @property
    def params(self):
        return [p for p, _ in self._watched.values()]

    def record(self, op, inputs, data, backward) -> Tensor:
        ids = tuple(t.node_id if t.tape is self else None for t in inputs)
        node_id = len(self.nodes)
        self.nodes.append(_Node(op, ids, backward, data.shape))
        return Tensor._wrap(data, self, node_id)


CONSTRAINTS = ("none", "nonnegative", "simplex-rows")


class Param:
    """Trainable array with gradient and Adam moment slots."""

    def __init__(self, data, name="", constraint="none"):
        if constraint not in CONSTRAINTS:
            raise ContractError(f"unknown constraint {constraint!r}")
        self.data = np.array(data, dtype=np.float64)
        self.name = name
        self.constraint = constraint
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)

    @property
    def shape(self):
        return self.data.shape

    @property
    def value(self) -> Tensor:
        return Tensor(self.data)

    def on(self, tape) -> Tensor:
        """Tensor view for a forward pass; a constant when ``tape`` is None."""
        if tape is None:
            return Tensor(self.data)
        return tape.watch(self)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def project(self):
        if self.constraint == "nonnegative":
            np.maximum(self.data, 0.0, out=self.data)
        elif self.constraint == "simplex-rows":
            from .oracle import project_simplex

            rows = self.data.reshape(self.data.shape[0], -1)
            self.data = np.stack([project_simplex(r) for r in rows]).reshape(self.data.shape)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape}, constraint={self.constraint})"


def _tape_of(inputs):
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ContractError("operands belong to different tapes")
    return tape


def _emit(op, inputs, data, backward):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite value in forward result")
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor._wrap(data)
    return tape.record(op, inputs, data, backward)


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    x, y = a.data, b.data
    return _emit("mul", (a, b), x * y, lambda g: (g * y, g * x))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def add_const(a: Tensor, c: float) -> Tensor:
    return _emit("add_const", (a,), a.data + float(c), lambda g: (g,))


def absolute(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _emit("abs", (a,), np.abs(a.data), lambda g: (g * s,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the subgradient is 0 outside the open interval."""
    x = a.data
    inside = (x > lo) & (x < hi)
    return _emit("clip", (a,), np.clip(x, lo, hi), lambda g: (g * inside,))


ACTIVATIONS = ("relu", "clamp01", "sigmoid", "log", "exp")


def activation(t: Tensor, kind: str) -> Tensor:
    x = t.data
    if kind == "relu":
        mask = x > 0
        return _emit("relu", (t,), np.where(mask, x, 0.0), lambda g: (g * mask,))
    if kind == "clamp01":
        return clip(t, 0.0, 1.0)
    if kind == "sigmoid":
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        return _emit("sigmoid", (t,), y, lambda g: (g * y * (1.0 - y),))
    if kind == "log":
        bad = np.argwhere(~(x > 0))
        if bad.size:
            idx = tuple(int(i) for i in bad[0])
            raise DomainError(f"log of nonpositive entry {x[idx]!r} at index {idx}")
        return _emit("log", (t,), np.log(x), lambda g: (g / x,))
    if kind == "exp":
        with np.errstate(over="ignore"):
            y = np.exp(x)
        return _emit("exp", (t,), y, lambda g: (g * y,))
    raise ContractError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def relu(t):
    return activation(t, "relu")


def clamp01(t):
    return activation(t, "clamp01")


def sigmoid(t):
    return activation(t, "sigmoid")


def log(t):
    return activation(t, "log")


def exp(t):
    return activation(t, "exp")


# ------------------------------------------------------------------ structure


def reshape(t: Tensor, shape) -> Tensor:
    old = t.shape
    return _emit("reshape", (t,), t.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(t: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(t.data.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(t.data.transpose(axes))
    return _emit("transpose", (t,), out, lambda g: (g.transpose(inv),))


def concat(ts, axis=0) -> Tensor:
    ts = list(ts)
    ref = ts[0].shape
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise DimensionError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _emit(
        "concat",
        tuple(ts),
        np.concatenate([t.data for t in ts], axis=axis),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def stack(ts) -> Tensor:
    ts = list(ts)
    for t in ts[1:]:
        _same_shape("stack", ts[0], t)
    n = len(ts)
    return _emit(
        "stack",
        tuple(ts),
        np.stack([t.data for t in ts]),
        lambda g: tuple(g[i] for i in range(n)),
    )


def slice_axis0(t: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the leading axis (channel slicing)."""
    if not 0 <= start < stop <= t.shape[0]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for leading extent {t.shape[0]}")
    full = t.shape

    def back(g):
        out = np.zeros(full)
        out[start:stop] = g
        return (out,)

    return _emit("slice", (t,), t.data[start:stop].copy(), back)


def diagonal(t: Tensor) -> Tensor:
    if t.data.ndim != 2 or t.shape[0] != t.shape[1]:
        raise DimensionError(f"diagonal needs a square matrix, got {t.shape}")
    n = t.shape[0]
    return _emit("diagonal", (t,), np.diagonal(t.data).copy(), lambda g: (np.diag(g),))


# ------------------------------------------------------------------ reductions


def sum_axis(t: Tensor, axis) -> Tensor:
    axis = (axis,) if isinstance(axis, int) else tuple(axis)
    shape = t.shape
    axis = tuple(a % len(shape) for a in axis)
    kept = tuple(1 if i in axis else s for i, s in enumerate(shape))
    return _emit(
        "sum_axis",
        (t,),
        t.data.sum(axis=axis),
        lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),),
    )


def reduce(a: Tensor, b: Tensor | None = None, kind: str = "mean") -> Tensor:
    """Scalar reduction: ``mean``, ``sum``, or ``l1_loss`` = mean(|a - b|)."""
    shape = a.shape
    n = a.size
    if kind == "sum":
        return _emit("sum", (a,), np.array(a.data.sum()), lambda g: (np.full(shape, float(g)),))
    if kind == "mean":
        return _emit("mean", (a,), np.array(a.data.mean()), lambda g: (np.full(shape, float(g) / n),))
    if kind == "l1_loss":
        if b is None:
            raise ContractError("l1_loss needs two operands")
        _same_shape("l1_loss", a, b)
        diff = a.data - b.data
        s = np.sign(diff)

        def back(g):
            ga = s * (float(g) / n)
            return (ga, -ga)

        return _emit("l1_loss", (a, b), np.array(np.abs(diff).mean()), back)
    raise ContractError(f"unknown reduction {kind!r}")


def mean(t):
    return reduce(t, kind="mean")


def total(t):
    return reduce(t, kind="sum")


def l1_loss(a, b):
    return reduce(a, b, kind="l1_loss")


def logsumexp(t: Tensor, axis=-1) -> Tensor:
    x = t.data
    mx = x.max(axis=axis, keepdims=True)
    e = np.exp(x - mx)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + mx).squeeze(axis)
    soft = e / s

    def back(g):
        return (np.expand_dims(g, axis) * soft,)

    return _emit("logsumexp", (t,), out, back)


def l2_normalize(t: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale a vector to unit Euclidean norm."""
    x = t.data
    nrm = np.sqrt(np.sum(x * x) + eps)
    y = x / nrm

    def back(g):
        return ((g - y * np.sum(g * y)) / nrm,)

    return _emit("l2_normalize", (t,), y, back)


def abs_normalize(t: Tensor, axis=-1, eps: float = 1e-8) -> Tensor:
    """|t| divided by its sum along ``axis`` (plus ``eps``): convex weights."""
    x = t.data
    a = np.abs(x)
    s = a.sum(axis=axis, keepdims=True) + eps
    w = a / s

    def back(g):
        inner = (g - np.sum(g * w, axis=axis, keepdims=True)) / s
        return (np.sign(x) * inner,)

    return _emit("abs_normalize", (t,), w, back)


# -------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    x, y = a.data, b.data
    return _emit("matmul", (a, b), x @ y, lambda g: (g @ y.T, x.T @ g))


def fully_connected(t: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``w @ t + b`` for a 1-D input."""
    if t.data.ndim != 1 or w.data.ndim != 2 or w.shape[1] != t.shape[0] or b.shape != (w.shape[0],):
        raise DimensionError(f"fully_connected: input {t.shape}, weight {w.shape}, bias {b.shape}")
    x, W = t.data, w.data
    return _emit(
        "fully_connected",
        (t, w, b),
        W @ x + b.data,
        lambda g: (W.T @ g, np.outer(g, x), g),
    )


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a ``C_in x H x W`` input with ``C_out x C_in x kh x kw``.

    Zero padding on both spatial sides; output extent is
    ``floor((H + 2p - kh) / stride) + 1``.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise DimensionError(f"conv2d: input {x.shape} / kernel {kernel.shape} have wrong rank")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise DimensionError(f"conv2d: kernel {kernel.shape} expects {kc} channels, input has {c_in}")
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride {stride} / padding {padding} invalid")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match {c_out} output channels")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    K = kernel.data
    if kh == 1 and kw == 1 and stride == 1:
        # per-pixel matmul path
        flat = xp.reshape(c_in, -1)
        out = (K.reshape(c_out, c_in) @ flat).reshape(c_out, h, w)
        ho, wo = h, w
        win = None
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
        ho, wo = win.shape[1], win.shape[2]
        out = np.tensordot(K, win, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out = out + bias.data[:, None, None]
    need_x = x.tape is not None

    def back(g):
        if win is None:
            g2 = g.reshape(c_out, -1)
            gk = (g2 @ flat.T).reshape(K.shape)
            gx = (K.reshape(c_out, c_in).T @ g2).reshape(c_in, h, w) if need_x else None
        elif not need_x:
            gk = np.tensordot(g, win, axes=([1, 2], [1, 2]))
            gx = None
        else:
            gk = np.tensordot(g, win, axes=([1, 2], [1, 2]))
            cols = np.tensordot(K, g, axes=([0], [0]))  # c_in, kh, kw, ho, wo
            gp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j]
            gx = gp[:, padding : padding + h, padding : padding + w] if padding else gp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv2d", inputs, out, back)


def pool_avg(t: Tensor, size: int, stride: int | None = None) -> Tensor:
    """Mean over ``size x size`` windows of a ``C x H x W`` tensor."""
    stride = size if stride is None else stride
    if t.data.ndim != 3:
        raise DimensionError(f"pool_avg: expected C x H x W, got {t.shape}")
    c, h, w = t.shape
    if size < 1 or size > h or size > w or stride < 1:
        raise DimensionError(f"pool_avg: window {size} does not fit spatial extent {h}x{w}")
    if size == 1 and stride == 1:
        return _emit("pool_avg", (t,), t.data.copy(), lambda g: (g,))
    win = sliding_window_view(t.data, (size, size), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    out = win.mean(axis=(3, 4))
    inv = 1.0 / (size * size)

    def back(g):
        gx = np.zeros((c, h, w))
        gs = g * inv
        for i in range(size):
            for j in range(size):
                gx[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += gs
        return (gx,)

    return _emit("pool_avg", (t,), out, back)


# -------------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar ``loss``.

    Returns the gradient of every leaf node keyed by node id and writes
    ``grad`` on every parameter watched by ``tape`` (zeros when unreachable).
    """
    if loss.tape is not tape or loss.node_id is None:
        raise ContractError("loss is not recorded on this tape")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    nodes = tape.nodes
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    leaves: dict[int, np.ndarray] = {}
    for nid in range(loss.node_id, -1, -1):
        g = grads.pop(nid, None)
        if g is None:
            continue
        node = nodes[nid]
        if node.backward is None:
            leaves[nid] = g
            continue
        parts = node.backward(g)
        for src, gp in zip(node.inputs, parts):
            if src is None or gp is None:
                continue
            if src in grads:
                grads[src] = grads[src] + gp
            else:
                grads[src] = np.asarray(gp, dtype=np.float64).reshape(nodes[src].shape)
    for param, nid in tape._watched.values():
        g = leaves.get(nid)
        param.grad = np.zeros_like(param.data) if g is None else np.array(g).reshape(param.shape)
    return leaves


def grad_check(f, x, eps: float = 1e-5) -> float:
    """Max relative error between the tape gradient of scalar ``f`` and central differences.

    Relative error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    A NaN anywhere makes the result NaN.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    tape = Tape()
    xt = tape.leaf(x0)
    out = f(xt)
    if out.tape is not tape:
        # f ignored its input: gradient is identically zero
        analytic = np.zeros_like(x0)
    else:
        analytic = backward(out, tape).get(xt.node_id, np.zeros_like(x0))
    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy()
        xp.reshape(-1)[i] += eps
        xm = x0.copy()
        xm.reshape(-1)[i] -= eps
        try:
            fp = f(Tensor(xp)).item()
            fm = f(Tensor(xm)).item()
        except FloatingPointError:
            return float("nan")
        flat[i] = (fp - fm) / (2.0 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(np.max(err)) if err.size else 0.0
