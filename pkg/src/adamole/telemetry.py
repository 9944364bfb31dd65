"""Activated-expert counts per (layer, projection) cell."""

from __future__ import annotations

import csv
import io

import numpy as np

from .errors import ConfigError, ShapeError


class ActivationStats:
    """Running sums of active-expert counts.

    Every routed token at every adapted projection is one observation.
    """

    def __init__(self, n_layers: int, n_experts: int, projections=("q", "k", "v", "o")):
        self.n_layers = int(n_layers)
        self.n_experts = int(n_experts)
        self.projections = tuple(projections)
        self.sums = np.zeros((self.n_layers, len(self.projections)), dtype=np.int64)
        self.observations = np.zeros_like(self.sums)

    @classmethod
    def for_model(cls, model) -> "ActivationStats":
        return cls(model.n_router_layers, model.n_experts, model.projections)

    def _cell(self, layer: int, projection: str):
        if projection not in self.projections:
            raise ConfigError(f"unknown projection {projection!r}; expected one of {self.projections}")
        if not 0 <= layer < self.n_layers:
            raise ConfigError(f"layer {layer} outside [0, {self.n_layers})")
        return layer, self.projections.index(projection)

    def record(self, layer: int, projection: str, count) -> None:
        """Adds one observation, or one per entry when ``count`` is an array."""
        cell = self._cell(layer, projection)
        counts = np.atleast_1d(np.asarray(count))
        if counts.size == 0:
            return
        if np.any(counts < 0) or np.any(counts > self.n_experts):
            raise ConfigError(f"active counts must lie in [0, {self.n_experts}]")
        self.sums[cell] += int(counts.sum())
        self.observations[cell] += counts.size

    def record_all(self, records) -> None:
        for (layer, projection), rec in records.items():
            self.record(layer, projection, rec.weights.active_count)

    def _same_shape(self, other: "ActivationStats"):
        if (self.n_layers, self.n_experts, self.projections) != (other.n_layers, other.n_experts, other.projections):
            raise ShapeError("cannot merge activation stats of different shapes")

    def merge(self, other: "ActivationStats") -> "ActivationStats":
        self._same_shape(other)
        out = ActivationStats(self.n_layers, self.n_experts, self.projections)
        out.sums = self.sums + other.sums
        out.observations = self.observations + other.observations
        return out

    def average(self, layer: int, projection: str) -> float | None:
        cell = self._cell(layer, projection)
        obs = self.observations[cell]
        return None if obs == 0 else self.sums[cell] / obs

    def averages(self) -> dict[tuple[int, str], float]:
        return {(l, p): self.average(l, p) for l in range(self.n_layers) for p in self.projections
                if self.observations[l, self.projections.index(p)] > 0}

    def overall_average(self) -> float | None:
        total = int(self.observations.sum())
        return None if total == 0 else float(self.sums.sum() / total)

    def layer_averages(self) -> list[float | None]:
        out = []
        for l in range(self.n_layers):
            obs = self.observations[l].sum()
            out.append(None if obs == 0 else float(self.sums[l].sum() / obs))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "projection", "avg_active", "observations"])
        for l in range(self.n_layers):
            for j, p in enumerate(self.projections):
                obs = int(self.observations[l, j])
                avg = "" if obs == 0 else f"{self.sums[l, j] / obs:.4f}"
                w.writerow([l, p, avg, obs])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_experts": self.n_experts,
            "projections": list(self.projections),
            "sums": self.sums.tolist(),
            "observations": self.observations.tolist(),
            "overall_average": self.overall_average(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActivationStats":
        s = cls(d["n_layers"], d["n_experts"], d["projections"])
        s.sums = np.asarray(d["sums"], dtype=np.int64).reshape(s.sums.shape)
        s.observations = np.asarray(d["observations"], dtype=np.int64).reshape(s.sums.shape)
        return s


def preferred_expert_entropy(weights, groups, n_groups: int) -> np.ndarray:
    """Per-group entropy of the most-weighted expert, as a fraction of ``log N``.

    Tokens with no active expert are skipped. A group with no remaining
    tokens reports ``nan``.
    """
    weights = np.asarray(weights)
    groups = np.asarray(groups)
    n = weights.shape[1]
    routed = weights.max(axis=1) > 0
    top = np.argmax(weights, axis=1)
    out = np.full(n_groups, np.nan)
    if n == 1:
        return np.where(np.bincount(groups[routed], minlength=n_groups) > 0, 0.0, np.nan)
    for g in range(n_groups):
        sel = routed & (groups == g)
        if not sel.any():
            continue
        freq = np.bincount(top[sel], minlength=n) / sel.sum()
        freq = freq[freq > 0]
        out[g] = max(0.0, float(-(freq * np.log(freq)).sum() / np.log(n)))
    return out


def record(stats: ActivationStats, layer: int, projection: str, count) -> None:
    stats.record(layer, projection, count)


def merge(a: ActivationStats, b: ActivationStats) -> ActivationStats:
    return a.merge(b)


def export_csv(stats: ActivationStats, path) -> None:
    """Rows ordered by layer, then by projection in the stats' canonical order."""
    with open(path, "w", newline="") as fh:
        fh.write(stats.to_csv())
