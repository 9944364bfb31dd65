"""Independent checks: central differences, sort-based top-k, replayed averages.

Nothing here imports the code it verifies; the helpers are written from
scratch so a shared bug cannot hide in both routes.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

FD_EPS = 1e-5
TINY = 1e-300
GROUP_FLOOR = 1e-3


def finite_diff(scalar_fn, params, epsilon: float = FD_EPS):
    """Central-difference gradient of ``scalar_fn()`` w.r.t. each array in ``params``.

    Arrays are perturbed in place and restored; ``scalar_fn`` must read them.
    """
    grads = []
    for arr in params:
        g = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + epsilon
            f_plus = float(scalar_fn())
            flat[i] = old - epsilon
            f_minus = float(scalar_fn())
            flat[i] = old
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise ArithmeticError("objective became non-finite during finite differencing")
            gflat[i] = (f_plus - f_minus) / (2.0 * epsilon)
        grads.append(g)
    return grads


def relative_error(analytic, numeric, floor: float = 0.0) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)`` over one parameter tensor.

    Central differences carry absolute rounding noise of order
    ``1e-16 * |f| / epsilon``; normalizing per tensor (and not per element),
    with an optional ``floor``, keeps near-zero gradients from reporting that
    noise as a large relative error. Two all-zero tensors compare as 0.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(n))), floor)
    diff = float(np.max(np.abs(a - n)))
    return 0.0 if diff == 0.0 else diff / max(scale, TINY)


def group_floor(arrays, fraction: float = GROUP_FLOOR) -> float:
    """``fraction`` of the largest gradient entry across a whole check."""
    return fraction * max((float(np.max(np.abs(a))) for a in arrays if np.size(a)), default=0.0)


@dataclass
class GradReport:
    errors: dict = field(default_factory=dict)      # name -> max relative error
    worst_index: dict = field(default_factory=dict)  # name -> element with the largest |a - n|

    def add(self, name, analytic, numeric, floor: float = 0.0):
        a = np.asarray(analytic, dtype=np.float64)
        n = np.asarray(numeric, dtype=np.float64)
        err = relative_error(a, n, floor)
        if a.size:
            idx = np.unravel_index(int(np.argmax(np.abs(a - n))), a.shape)
        else:
            idx = ()
        if err > self.errors.get(name, -1.0):
            self.errors[name] = err
            self.worst_index[name] = tuple(int(i) for i in idx)

    def merge(self, other: "GradReport", prefix: str = ""):
        for name, e in other.errors.items():
            key = prefix + name
            if e > self.errors.get(key, -1.0):
                self.errors[key] = e
                self.worst_index[key] = other.worst_index[name]

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def worst(self):
        if not self.errors:
            return None, 0.0, ()
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name], self.worst_index[name]


def brute_force_topk(p, k: int):
    """Top-``k`` weights by a full stable sort. Returns ``(weights, mask)`` as lists."""
    p = [float(v) for v in p]
    n = len(p)
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}]")
    ranked = sorted(range(n), key=lambda i: (-p[i], i))
    keep = set(ranked[:k])
    # index order, so exact equality with any index-order summation is meaningful
    total = 0.0
    for i in range(n):
        if i in keep:
            total += p[i]
    weights = [p[i] / total if i in keep else 0.0 for i in range(n)]
    mask = [i in keep for i in range(n)]
    return weights, mask


def brute_force_adaptive(p, tau: float):
    """Scalar reference for the shifted-threshold weights, one vector at a time."""
    shifted = [(v - tau) if v >= tau else 0.0 for v in p]
    total = sum(shifted)
    if total <= 1e-12:
        return [0.0] * len(p)
    return [s / total for s in shifted]


def replay_average(records):
    """Per-cell averages recomputed from a raw ``(layer, projection, count)`` stream."""
    sums = defaultdict(int)
    counts = defaultdict(int)
    for layer, projection, count in records:
        sums[(layer, projection)] += int(count)
        counts[(layer, projection)] += 1
    return {cell: sums[cell] / counts[cell] for cell in sums}


def replay_overall(records):
    records = list(records)
    if not records:
        return None
    return sum(int(c) for _, _, c in records) / len(records)
