"""Dense tensor kernels shared by every other module.

Tensors are plain ``numpy.ndarray`` values. Sequence-shaped arrays use the
``[..., T, D]`` layout (sequence axis second to last); grids use
``[..., H, W, D]``. Every public kernel checks shapes, returns a fresh array,
rejects non-finite results and, when counting is enabled, adds its
multiply-accumulate cost to the global :data:`counter`.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Iterator

import numpy as np

_PRECISIONS = {"double": np.float64, "single": np.float32}
_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested kernel."""


class NonFiniteError(FloatingPointError):
    """A public operation produced NaN or Inf."""


def get_dtype() -> np.dtype:
    return np.dtype(getattr(_state, "dtype", np.float64))


def set_precision(name: str) -> None:
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _state.dtype = _PRECISIONS[name]


@contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the default dtype for newly created tensors."""
    previous = get_dtype()
    set_precision(name)
    try:
        yield
    finally:
        _state.dtype = previous.type


def asarray(x, dtype=None) -> np.ndarray:
    return np.asarray(x, dtype=dtype or get_dtype())


class MacCounter:
    """Thread-safe multiply-accumulate tally for matmul and conv kernels."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.enabled = False
        self.total = 0

    def add(self, n: int) -> None:
        if self.enabled:
            with self._lock:
                self.total += int(n)

    def reset(self) -> None:
        with self._lock:
            self.total = 0

    @contextmanager
    def counting(self) -> Iterator["MacCounter"]:
        """Enable counting from zero; restores the previous state on exit."""
        was_enabled, was_total = self.enabled, self.total
        self.reset()
        self.enabled = True
        try:
            yield self
        finally:
            self.enabled = was_enabled
            if not was_enabled:
                self.total = was_total


counter = MacCounter()


def _checked(out: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matrix product ``a @ b`` with numpy batch broadcasting."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from exc
    m, k, n = a.shape[-2], a.shape[-1], b.shape[-1]
    counter.add(math.prod(batch) * m * k * n)
    return _checked(np.matmul(a, b), "matmul")


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_UNARY = {
    "sigmoid": _sigmoid,
    "gelu": _gelu,
    "silu": lambda x: x * _sigmoid(x),
    "flip_seq": lambda x: np.flip(x, axis=-2).copy(),
}
_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(op: str, a, b=None, *, factor: float | None = None) -> np.ndarray:
    """Apply a named elementwise op.

    Binary ops accept same-shape operands or a scalar on either side. ``scale``
    multiplies by ``factor``. ``flip_seq`` reverses the sequence axis (-2).
    """
    a = np.asarray(a)
    if op in _UNARY:
        if op == "flip_seq" and a.ndim < 2:
            raise DimensionError(f"flip_seq needs a [..., T, D] tensor, got {a.shape}")
        return _checked(_UNARY[op](a), op)
    if op == "scale":
        if factor is None:
            raise ValueError("scale requires factor")
        return _checked(a * factor, op)
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} requires two operands")
        b = np.asarray(b)
        if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
            raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not same-shape or scalar")
        return _checked(_BINARY[op](a, b), op)
    raise ValueError(f"unknown elementwise op {op!r}")


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def sigmoid(x):
    return elementwise("sigmoid", x)


def gelu(x):
    return elementwise("gelu", x)


def silu(x):
    return elementwise("silu", x)


def flip_seq(x):
    return elementwise("flip_seq", x)


def scale(x, factor: float):
    return elementwise("scale", x, factor=factor)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Normalize over the last axis, then apply ``gamma`` and ``beta``."""
    x = np.asarray(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError("layer_norm needs a non-empty last axis")
    d = x.shape[-1]
    if np.shape(gamma) != (d,) or np.shape(beta) != (d,):
        raise DimensionError(f"layer_norm affine shape must be ({d},)")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return _checked((x - mu) / np.sqrt(var + eps) * gamma + beta, "layer_norm")


def dwconv1d_causal(x, kernel) -> np.ndarray:
    """Depthwise causal convolution along the sequence axis.

    ``out[t] = sum_j kernel[j] * x[t - (K - 1) + j]`` with zeros before the
    start, so the last tap multiplies the current token.
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    if x.ndim < 2 or kernel.ndim != 2 or kernel.shape[1] != x.shape[-1] or kernel.shape[0] < 1:
        raise DimensionError(f"dwconv1d_causal: x {x.shape} incompatible with kernel {kernel.shape}")
    k, t = kernel.shape[0], x.shape[-2]
    pad = [(0, 0)] * x.ndim
    pad[-2] = (k - 1, 0)
    xp = np.pad(x, pad)
    out = np.zeros(np.broadcast_shapes(x.shape, kernel.shape[1:]), dtype=np.result_type(x, kernel))
    for j in range(k):
        out += xp[..., j : j + t, :] * kernel[j]
    counter.add(k * x.size)
    return _checked(out, "dwconv1d_causal")


def dwconv2d(x, kernel) -> np.ndarray:
    """Depthwise 2-D cross-correlation with same-size zero padding.

    ``x`` is ``[..., H, W, D]`` and ``kernel`` is ``[K, K, D]`` with odd K.
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    if kernel.ndim != 3 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
        raise DimensionError(f"dwconv2d needs an odd square [K, K, D] kernel, got {kernel.shape}")
    if x.ndim < 3 or x.shape[-1] != kernel.shape[2]:
        raise DimensionError(f"dwconv2d: x {x.shape} incompatible with kernel {kernel.shape}")
    k = kernel.shape[0]
    r = (k - 1) // 2
    h, w = x.shape[-3], x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 3) + [(r, r), (r, r), (0, 0)]
    xp = np.pad(x, pad)
    out = np.zeros(x.shape, dtype=np.result_type(x, kernel))
    for a in range(k):
        for b in range(k):
            out += xp[..., a : a + h, b : b + w, :] * kernel[a, b]
    counter.add(k * k * x.size)
    return _checked(out, "dwconv2d")


def to_grid(x, grid: tuple[int, int]) -> np.ndarray:
    """Reshape ``[..., T, D]`` tokens onto a raster ``[..., H', W', D]`` grid."""
    x = np.asarray(x)
    h, w = grid
    if h * w != x.shape[-2]:
        raise DimensionError(f"sequence length {x.shape[-2]} does not factor into grid {h}x{w}")
    return x.reshape(*x.shape[:-2], h, w, x.shape[-1])
