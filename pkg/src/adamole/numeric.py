"""Dense kernels with their analytic backward rules.

Matrices are plain float64 numpy arrays. Every kernel checks shapes up front
instead of relying on broadcasting, and each ``*_backward`` function maps an
upstream gradient to the gradients of the kernel's inputs.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

DTYPE = np.float64


def rng_for(seed: int, tag: str) -> np.random.Generator:
    """Independent generator keyed by ``(seed, tag)``.

    Components draw from their own stream so adding a new consumer never
    shifts the numbers another component sees.
    """
    key = zlib.crc32(tag.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, key]))


def _as_matrix(m, name="operand") -> np.ndarray:
    m = np.asarray(m, dtype=DTYPE)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def check_finite(m: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise NumericError(f"non-finite entries in {what}")
    return m


@dataclass(eq=False)
class Parameter:
    """A named value plus its gradient accumulator.

    Frozen parameters (``trainable=False``) silently ignore accumulation so
    their gradient stays identically zero.
    """

    name: str
    value: np.ndarray
    trainable: bool = True
    decay: bool = False
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.value.shape:
            raise ShapeError(f"{self.name}: grad shape {g.shape} != value shape {self.value.shape}")
        if self.trainable:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


# -- construction ------------------------------------------------------------

def zeros(rows: int, cols: int) -> np.ndarray:
    if rows < 0 or cols < 0:
        raise ShapeError(f"negative dimensions ({rows}, {cols})")
    return np.zeros((rows, cols), dtype=DTYPE)


def gaussian_init(rows: int, cols: int, std: float, seed: int, tag: str = "init") -> np.ndarray:
    """I.i.d. ``N(0, std**2)`` entries, reproducible for a given (seed, tag)."""
    if not std > 0:
        raise ConfigError(f"std must be positive, got {std}")
    return rng_for(seed, tag).normal(0.0, std, size=(rows, cols)).astype(DTYPE)


# -- linear kernels ----------------------------------------------------------

def matmul(a, b) -> np.ndarray:
    a = _as_matrix(a, "left operand")
    b = _as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    return a @ b


def matmul_backward(a, b, upstream):
    """Returns ``(grad_a, grad_b)`` for ``a @ b`` given ``upstream`` of the product's shape."""
    a = _as_matrix(a)
    b = _as_matrix(b)
    g = _as_matrix(upstream, "upstream")
    if g.shape != (a.shape[0], b.shape[1]):
        raise ShapeError(f"matmul_backward: upstream {g.shape} vs product {(a.shape[0], b.shape[1])}")
    return g @ b.T, a.T @ g


def add(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return a + b


def add_backward(upstream):
    return upstream, upstream


def scale(a, c: float) -> np.ndarray:
    return np.asarray(a, dtype=DTYPE) * c


def scale_backward(upstream, c: float):
    return upstream * c


# -- nonlinearities ----------------------------------------------------------

def softmax(z) -> np.ndarray:
    """Softmax over the last axis, max-shifted so large logits do not overflow."""
    z = np.asarray(z, dtype=DTYPE)
    if z.ndim == 0 or z.shape[-1] < 1:
        raise ShapeError("softmax needs at least one entry on the last axis")
    check_finite(z, "softmax input")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p, upstream) -> np.ndarray:
    """Applies ``diag(p) - p p^T`` row-wise to ``upstream``."""
    p = np.asarray(p, dtype=DTYPE)
    g = np.asarray(upstream, dtype=DTYPE)
    if p.shape != g.shape:
        raise ShapeError(f"softmax_backward: {p.shape} vs {g.shape}")
    return p * (g - np.sum(p * g, axis=-1, keepdims=True))


def sigmoid(z):
    z = np.asarray(z, dtype=DTYPE)
    # two branches keep exp() argument non-positive
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def sigmoid_backward(s, upstream):
    """Gradient through sigmoid given its output ``s``."""
    return np.asarray(upstream) * s * (1.0 - s)
