"""Per-agent goal grids, the joint goal-pair set and top-M marginal pruning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class GoalGrid:
    edges: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.float64)
        if edges.ndim != 1 or len(edges) < 2:
            raise ConfigError("a goal grid needs at least two edges")
        if not np.all(np.diff(edges) > 0):
            raise ConfigError("grid edges must be strictly increasing")
        object.__setattr__(self, "edges", edges)

    @classmethod
    def uniform(cls, lo: float, hi: float, n_bins: int) -> "GoalGrid":
        if n_bins < 1:
            raise ConfigError(f"n_bins must be >= 1, got {n_bins}")
        return cls(np.linspace(lo, hi, n_bins + 1))

    @classmethod
    def covering(cls, values: np.ndarray, n_bins: int) -> "GoalGrid":
        """Uniform grid spanning the observed range of ``values``."""
        values = np.asarray(values, dtype=np.float64)
        lo, hi = float(values.min()), float(values.max())
        if hi - lo < 1e-9:
            lo, hi = lo - 0.5, hi + 0.5
        return cls.uniform(lo, hi, n_bins)

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    @property
    def width(self) -> float:
        return float(np.mean(np.diff(self.edges)))

    def __len__(self):
        return len(self.edges) - 1

    def discretize(self, endpoint):
        """Index of the nearest bin center; ties go to the lower index."""
        x = np.asarray(endpoint, dtype=np.float64)
        idx = np.abs(x[..., None] - self.centers).argmin(axis=-1)
        return int(idx) if idx.ndim == 0 else idx

    def to_dict(self) -> dict:
        return {"edges": self.edges.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "GoalGrid":
        return cls(np.asarray(d["edges"]))


def discretize(endpoint, grid: GoalGrid):
    return grid.discretize(endpoint)


@dataclass(frozen=True)
class GoalPairSet:
    """Cross product of selected bins of two grids, a-major order."""

    grid_a: GoalGrid
    grid_b: GoalGrid
    bins_a: np.ndarray
    bins_b: np.ndarray

    @classmethod
    def full(cls, grid_a: GoalGrid, grid_b: GoalGrid) -> "GoalPairSet":
        return cls(grid_a, grid_b, np.arange(len(grid_a)), np.arange(len(grid_b)))

    @property
    def pairs(self) -> np.ndarray:
        """(P, 2) array of (index_a, index_b)."""
        ia, ib = np.meshgrid(self.bins_a, self.bins_b, indexing="ij")
        return np.stack([ia.ravel(), ib.ravel()], axis=1)

    @property
    def coordinates(self) -> np.ndarray:
        p = self.pairs
        return np.stack([self.grid_a.centers[p[:, 0]], self.grid_b.centers[p[:, 1]]], axis=1)

    def __len__(self):
        return len(self.bins_a) * len(self.bins_b)

    def index_of(self, index_a: int, index_b: int) -> int | None:
        """Position of the pair in this set, or None if it was pruned."""
        pa = np.flatnonzero(self.bins_a == index_a)
        pb = np.flatnonzero(self.bins_b == index_b)
        if len(pa) == 0 or len(pb) == 0:
            return None
        return int(pa[0] * len(self.bins_b) + pb[0])


def top_m_bins(marginal: np.ndarray, M: int) -> np.ndarray:
    """Indices of the ``M`` most probable bins, ascending; ties favour lower indices.

    Works on a single distribution ``(G,)`` or a batch ``(n, G)``.
    """
    marginal = np.asarray(marginal)
    if M <= 0:
        raise ConfigError(f"M must be positive, got {M}")
    if M > marginal.shape[-1]:
        raise ConfigError(f"M={M} exceeds the grid size {marginal.shape[-1]}")
    order = np.argsort(-marginal, axis=-1, kind="stable")[..., :M]
    return np.sort(order, axis=-1)


def top_m_prune(marginal_a: np.ndarray, marginal_b: np.ndarray, M: int,
                grid_a: GoalGrid, grid_b: GoalGrid) -> GoalPairSet:
    return GoalPairSet(grid_a, grid_b, top_m_bins(marginal_a, M), top_m_bins(marginal_b, M))


def pruning_coverage(marginals_a: np.ndarray, marginals_b: np.ndarray, truth_a: np.ndarray,
                     truth_b: np.ndarray, M: int) -> float:
    """Fraction of scenarios whose ground-truth pair survives top-M pruning."""
    sel_a = top_m_bins(marginals_a, M)
    sel_b = top_m_bins(marginals_b, M)
    hit_a = (sel_a == np.asarray(truth_a)[:, None]).any(axis=1)
    hit_b = (sel_b == np.asarray(truth_b)[:, None]).any(axis=1)
    return float(np.mean(hit_a & hit_b))
