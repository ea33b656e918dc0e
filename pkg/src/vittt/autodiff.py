"""Eager reverse-mode autodiff over the :mod:`vittt.tensor` kernels.

Every op in this module accepts plain arrays or :class:`Var` handles. With no
``Var`` operand the op simply returns the kernel result, so model code runs
unchanged with or without a tape. With ``Var`` operands the value is computed
eagerly and a node carrying its vector-Jacobian product is appended to the
owning :class:`Tape`.

Binary ops broadcast their operands explicitly through recorded
``broadcast_to`` nodes, so the underlying elementwise kernels only ever see
same-shape or scalar operands.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from vittt import tensor as K


class TapeError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "tape", "index", "grad", "name")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int, name: str | None = None):
        self.value = value
        self.tape = tape
        self.index = index
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Var{label}(shape={self.shape}, node={self.index})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


@dataclass
class _Node:
    fn: Callable[..., np.ndarray] | None
    inputs: tuple[Any, ...]  # node index (int) or constant array
    vjp: Callable[..., tuple] | None
    value: np.ndarray
    op: str


@dataclass
class Tape:
    """Append-only record of eagerly evaluated ops."""

    nodes: list[_Node] = field(default_factory=list)
    leaves: list[Var] = field(default_factory=list)
    _done: bool = False

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> Var:
        value = np.array(value, dtype=K.get_dtype())
        self.nodes.append(_Node(None, (), None, value, "leaf"))
        var = Var(value, self, len(self.nodes) - 1, name)
        self.leaves.append(var)
        return var

    def _append(self, fn, inputs, vjp, value, op) -> Var:
        if self._done:
            raise TapeError("tape already consumed by backward(); record on a fresh tape")
        self.nodes.append(_Node(fn, inputs, vjp, value, op))
        return Var(value, self, len(self.nodes) - 1)

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaf values, in recording order."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.fn is None:
                values.append(node.value)
                continue
            args = [values[i] if isinstance(i, int) else i for i in node.inputs]
            values.append(node.fn(*args))
        return values

    def backward(self, loss: Var) -> dict[Var, np.ndarray]:
        """Propagate d(loss)/d(node) for every node; return the leaf gradients.

        Leaves that do not influence ``loss`` receive exact zeros. A tape can
        be differentiated once.
        """
        if not isinstance(loss, Var) or loss.tape is not self:
            raise TapeError("loss is not a value recorded on this tape")
        if loss.value.size != 1 or loss.value.ndim != 0:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        if self._done:
            raise TapeError("backward() already called on this tape")
        self._done = True

        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.index] = np.ones_like(loss.value)
        for idx in range(loss.index, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or node.vjp is None:
                continue
            args = [self.nodes[i].value if isinstance(i, int) else i for i in node.inputs]
            parts = node.vjp(g, node.value, *args)
            for src, part in zip(node.inputs, parts):
                if not isinstance(src, int) or part is None:
                    continue
                grads[src] = part if grads[src] is None else grads[src] + part
        self._grads = grads
        out = {}
        for leaf in self.leaves:
            g = grads[leaf.index]
            leaf.grad = np.zeros_like(leaf.value) if g is None else g
            out[leaf] = leaf.grad
        return out

    def grad_of(self, var: Var) -> np.ndarray | None:
        """Gradient of an intermediate node after :meth:`backward`."""
        return self._grads[var.index]


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x)


def _record(op: str, fn, vjp, *operands):
    tape = None
    for o in operands:
        if isinstance(o, Var):
            if tape is not None and o.tape is not tape:
                raise TapeError("operands come from different tapes")
            tape = o.tape
    vals = [value(o) for o in operands]
    out = fn(*vals)
    if tape is None:
        return out
    inputs = tuple(o.index if isinstance(o, Var) else v for o, v in zip(operands, vals))
    return tape._append(fn, inputs, vjp, out, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- shape ops ---------------------------------------------------------------


def broadcast_to(x, shape):
    shape = tuple(shape)
    if value(x).shape == shape:
        return x
    return _record(
        "broadcast_to",
        lambda a: np.broadcast_to(a, shape).copy(),
        lambda g, out, a: (_unbroadcast(g, a.shape),),
        x,
    )


def reshape(x, shape):
    shape = tuple(shape)
    return _record(
        "reshape",
        lambda a: a.reshape(shape),
        lambda g, out, a: (g.reshape(a.shape),),
        x,
    )


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(
        "transpose",
        lambda a: np.transpose(a, axes).copy(),
        lambda g, out, a: (np.transpose(g, inv),),
        x,
    )


def mT(x):
    """Swap the last two axes."""
    n = value(x).ndim
    return transpose(x, (*range(n - 2), n - 1, n - 2))


def getitem(x, idx):
    def vjp(g, out, a):
        z = np.zeros_like(a)
        np.add.at(z, idx, g)
        return (z,)

    return _record("getitem", lambda a: np.array(a[idx]), vjp, x)


def concat(xs: Sequence, axis: int):
    sizes = [value(x).shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g, out, *parts):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", lambda *parts: np.concatenate(parts, axis=axis), vjp, *xs)


def sum(x, axis=None, keepdims: bool = False):
    def vjp(g, out, a):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", lambda a: np.asarray(a.sum(axis=axis, keepdims=keepdims)), vjp, x)


def mean(x, axis=None, keepdims: bool = False):
    n = value(x).size if axis is None else np.prod([value(x).shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def cumsum(x, axis: int):
    return _record(
        "cumsum",
        lambda a: np.cumsum(a, axis=axis),
        lambda g, out, a: (np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),),
        x,
    )


def causal_mask(x):
    """Zero entries ``[..., t, s]`` with ``s > t`` (keeps the diagonal)."""

    def fn(a):
        return np.tril(a)

    return _record("causal_mask", fn, lambda g, out, a: (np.tril(g),), x)


def flip_seq(x):
    return _record("flip_seq", K.flip_seq, lambda g, out, a: (K.flip_seq(g),), x)


# -- elementwise -------------------------------------------------------------


def _is_scalar(x) -> bool:
    return not isinstance(x, Var) and np.ndim(x) == 0


def _expand(a, b):
    if _is_scalar(a) or _is_scalar(b):
        return a, b
    sa, sb = value(a).shape, value(b).shape
    if sa == sb:
        return a, b
    shape = np.broadcast_shapes(sa, sb)
    return broadcast_to(a, shape), broadcast_to(b, shape)


def _scalar_grad(g, a):
    return g if np.ndim(a) else np.asarray(g.sum())


def add(a, b):
    a, b = _expand(a, b)
    return _record(
        "add", K.add, lambda g, out, x, y: (_scalar_grad(g, x), _scalar_grad(g, y)), a, b
    )


def sub(a, b):
    a, b = _expand(a, b)
    return _record(
        "sub", K.sub, lambda g, out, x, y: (_scalar_grad(g, x), _scalar_grad(-g, y)), a, b
    )


def mul(a, b):
    a, b = _expand(a, b)
    return _record(
        "mul",
        K.mul,
        lambda g, out, x, y: (_scalar_grad(g * y, x), _scalar_grad(g * x, y)),
        a,
        b,
    )


def div(a, b):
    a, b = _expand(a, b)
    return _record(
        "div",
        lambda x, y: K._checked(x / y, "div"),
        lambda g, out, x, y: (_scalar_grad(g / y, x), _scalar_grad(-g * out / y, y)),
        a,
        b,
    )


def scale(x, factor: float):
    factor = float(factor)
    return _record(
        "scale",
        lambda a: K.scale(a, factor),
        lambda g, out, a: (g * factor,),
        x,
    )


def square(x):
    return _record("square", lambda a: K.mul(a, a), lambda g, out, a: (2.0 * g * a,), x)


def sqrt(x):
    return _record(
        "sqrt",
        lambda a: K._checked(np.sqrt(a), "sqrt"),
        lambda g, out, a: (0.5 * g / out,),
        x,
    )


def exp(x):
    return _record("exp", lambda a: K._checked(np.exp(a), "exp"), lambda g, out, a: (g * out,), x)


def log(x):
    return _record("log", lambda a: K._checked(np.log(a), "log"), lambda g, out, a: (g / a,), x)


def sigmoid(x):
    return _record("sigmoid", K.sigmoid, lambda g, out, a: (g * out * (1.0 - out),), x)


def silu(x):
    def vjp(g, out, a):
        s = K.sigmoid(a)
        return (g * (s + a * s * (1.0 - s)),)

    return _record("silu", K.silu, vjp, x)


_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    def vjp(g, out, a):
        u = _C * (a + 0.044715 * a**3)
        t = np.tanh(u)
        du = _C * (1.0 + 3 * 0.044715 * a**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t**2) * du),)

    return _record("gelu", K.gelu, vjp, x)


# -- linear algebra and normalization ---------------------------------------


def matmul(a, b):
    def vjp(g, out, x, y):
        gx = np.matmul(g, np.swapaxes(y, -1, -2))
        gy = np.matmul(np.swapaxes(x, -1, -2), g)
        return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)

    return _record("matmul", K.matmul, vjp, a, b)


def layer_norm(x, gamma, beta, eps: float = 1e-5):
    def vjp(g, out, a, gm, bt):
        mu = a.mean(axis=-1, keepdims=True)
        sigma = np.sqrt(((a - mu) ** 2).mean(axis=-1, keepdims=True) + eps)
        xhat = (a - mu) / sigma
        dxhat = g * gm
        dx = (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) / sigma
        lead = tuple(range(a.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record("layer_norm", lambda a, gm, bt: K.layer_norm(a, gm, bt, eps), vjp, x, gamma, beta)


def dwconv1d_causal(x, kernel):
    def vjp(g, out, a, k):
        taps, t = k.shape[0], a.shape[-2]
        padg = [(0, 0)] * g.ndim
        padg[-2] = (0, taps - 1)
        gp = np.pad(g, padg)
        gx = np.zeros_like(a)
        for j in range(taps):
            s = taps - 1 - j
            gx += gp[..., s : s + t, :] * k[j]
        padx = [(0, 0)] * a.ndim
        padx[-2] = (taps - 1, 0)
        xp = np.pad(a, padx)
        lead = tuple(range(a.ndim - 1))
        gk = np.stack([(g * xp[..., j : j + t, :]).sum(axis=lead) for j in range(taps)])
        return gx, gk

    return _record("dwconv1d_causal", K.dwconv1d_causal, vjp, x, kernel)


def dwconv2d(x, kernel):
    def vjp(g, out, a, k):
        size = k.shape[0]
        r = (size - 1) // 2
        h, w = a.shape[-3], a.shape[-2]
        pad = [(0, 0)] * (a.ndim - 3) + [(r, r), (r, r), (0, 0)]
        xp = np.pad(a, pad)
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(k)
        lead = tuple(range(a.ndim - 1))
        for i in range(size):
            for j in range(size):
                gxp[..., i : i + h, j : j + w, :] += g * k[i, j]
                gk[i, j] = (g * xp[..., i : i + h, j : j + w, :]).sum(axis=lead)
        return gxp[..., r : r + h, r : r + w, :], gk

    return _record("dwconv2d", K.dwconv2d, vjp, x, kernel)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy over the batch; ``labels`` are class ids."""
    labels = np.asarray(labels, dtype=np.int64)

    def softmax(z):
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def fn(z):
        zmax = z.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(z - zmax).sum(axis=-1)) + zmax[..., 0]
        picked = np.take_along_axis(z, labels[:, None], axis=-1)[:, 0]
        return K._checked(np.asarray((lse - picked).mean()), "cross_entropy")

    def vjp(g, out, z):
        p = softmax(z)
        p[np.arange(len(labels)), labels] -= 1.0
        return (g * p / len(labels),)

    return _record("cross_entropy", fn, vjp, logits)
