"""Weighted directed delta-ball graph used by ProbCover and its noise-aware variants.

An edge ``x -> x'`` exists iff ``d(x, x') <= delta`` (closed ball, self-loops
included). Every edge carries a weight in [0, 1]; the out-degree rank (ODR)
of a vertex is the sum of its outgoing weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from noisyal.datapool import EmbeddingPool
from noisyal.errors import ValidationError


def _as_index(indices) -> np.ndarray:
    return np.unique(np.asarray(indices, dtype=np.int64).ravel())


def _gather(indptr: np.ndarray, values: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Concatenate ``values[indptr[r]:indptr[r+1]]`` for every r in ``rows``."""
    if rows.size == 0:
        return np.empty(0, dtype=values.dtype)
    starts = indptr[rows]
    lengths = indptr[rows + 1] - starts
    total = int(lengths.sum())
    if total == 0:
        return np.empty(0, dtype=values.dtype)
    offsets = np.repeat(starts - np.cumsum(lengths) + lengths, lengths)
    return values[offsets + np.arange(total)]


class CoverGraph:
    """Adjacency in CSR form (edges sorted by source) with a parallel weight array."""

    def __init__(self, distances: np.ndarray, delta: float):
        self._distances = distances
        self.n = distances.shape[0]
        self.rebuild(delta)

    def rebuild(self, delta: float) -> None:
        """Rebuild the edge set for a new radius; all weights reset to 1."""
        if delta < 0:
            raise ValidationError(f"delta must be non-negative, got {delta}")
        self.delta = float(delta)
        src, dst = np.nonzero(self._distances <= self.delta)
        self.src = src.astype(np.int64)
        self.dst = dst.astype(np.int64)
        self.indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.src, minlength=self.n), out=self.indptr[1:])
        in_order = np.argsort(self.dst, kind="stable")
        self.in_edges = in_order
        self.in_indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.dst, minlength=self.n), out=self.in_indptr[1:])
        self.reset_weights()

    def reset_weights(self) -> None:
        self.weights = np.ones(self.src.size)
        self.odr = np.bincount(self.src, minlength=self.n).astype(np.float64)

    @property
    def n_edges(self) -> int:
        return int(self.src.size)

    def neighbors(self, x: int) -> np.ndarray:
        return self.dst[self.indptr[x]:self.indptr[x + 1]]

    def ball(self, targets) -> np.ndarray:
        """Sorted union of the delta-balls around ``targets``."""
        return np.unique(_gather(self.indptr, self.dst, _as_index(targets)))

    def _set_edges(self, edges: np.ndarray, w: float) -> None:
        if edges.size == 0:
            return
        change = self.weights[edges] - w
        self.weights[edges] = w
        self.odr -= np.bincount(self.src[edges], weights=change, minlength=self.n)

    def _incoming(self, vertices: np.ndarray) -> np.ndarray:
        return _gather(self.in_indptr, self.in_edges, vertices)

    def set_incoming_weight(self, targets, w: float) -> None:
        """Overwrite the weight of every edge pointing into the balls of ``targets``."""
        if not 0.0 <= w <= 1.0:
            raise ValidationError(f"edge weight must lie in [0, 1], got {w}")
        self._set_edges(self._incoming(self.ball(targets)), float(w))

    def zero_incoming(self, targets) -> None:
        self.set_incoming_weight(targets, 0.0)

    def zero_outgoing(self, sources) -> None:
        sources = _as_index(sources)
        self._set_edges(_gather(self.indptr, np.arange(self.n_edges), sources), 0.0)

    def recompute_odr(self) -> np.ndarray:
        return np.bincount(self.src, weights=self.weights, minlength=self.n)

    def argmax_odr(self, candidates) -> int:
        cand = _as_index(candidates)
        if cand.size == 0:
            raise ValidationError("argmax_odr needs at least one candidate")
        return int(cand[np.argmax(self.odr[cand])])

    def max_odr(self, candidates) -> float:
        cand = _as_index(candidates)
        return float(self.odr[cand].max()) if cand.size else 0.0

    def dump(self, path: str | Path) -> None:
        """Write ``src dst weight`` lines (for small debugging graphs)."""
        with open(path, "w", encoding="utf-8") as fh:
            for s, d, w in zip(self.src, self.dst, self.weights):
                fh.write(f"{s} {d} {w:.17g}\n")


def build_graph(pool: EmbeddingPool, delta: float) -> CoverGraph:
    if delta <= 0:
        raise ValidationError(f"delta must be positive, got {delta}")
    return CoverGraph(pool.distances, delta)


@dataclass(frozen=True)
class CoverageReport:
    covered: np.ndarray
    coverage_fraction: float


def coverage(pool: EmbeddingPool, delta: float, labeled_clean) -> CoverageReport:
    centers = _as_index(labeled_clean)
    if centers.size == 0:
        return CoverageReport(np.empty(0, dtype=np.int64), 0.0)
    covered = np.flatnonzero((pool.distances[centers] <= delta).any(axis=0))
    return CoverageReport(covered, covered.size / pool.n)


def delta_grid(delta: float, size: int = 16) -> np.ndarray:
    """``size`` evenly spaced radii in (0.05 * delta, 0.95 * delta]."""
    lo, hi = 0.05 * delta, 0.95 * delta
    return lo + (hi - lo) * np.arange(1, size + 1) / size


@dataclass(frozen=True)
class DeltaUpdate:
    delta: float
    exhausted: bool
    candidates: np.ndarray
    max_degrees: np.ndarray


def max_degree_curve(pool: EmbeddingPool, labeled_clean, candidate_deltas, unlabeled=None) -> np.ndarray:
    """Max ODR over unlabeled vertices of each G_delta' after removing covered balls."""
    dist = pool.distances
    clean = _as_index(labeled_clean)
    if unlabeled is None:
        mask = np.ones(pool.n, dtype=bool)
        mask[clean] = False
        unlabeled = np.flatnonzero(mask)
    else:
        unlabeled = _as_index(unlabeled)
    if unlabeled.size == 0:
        return np.zeros(len(candidate_deltas))
    sub = dist[unlabeled]
    out = np.empty(len(candidate_deltas))
    for k, d in enumerate(candidate_deltas):
        alive = np.ones(pool.n, dtype=bool)
        if clean.size:
            alive &= ~(dist[clean] <= d).any(axis=0)
        out[k] = ((sub <= d) & alive).sum(axis=1).max()
    return out


def update_delta(pool: EmbeddingPool, labeled_clean, candidate_deltas, current_delta: float,
                 unlabeled=None, prefer_larger: bool = True) -> DeltaUpdate:
    """Pick the radius whose residual graph has the largest maximal degree.

    If no candidate offers a vertex with ODR above 1 (only self-loops left) the
    current radius is kept and ``exhausted`` is set.
    """
    cands = np.asarray(candidate_deltas, dtype=float)
    if cands.size == 0:
        raise ValidationError("update_delta needs at least one candidate radius")
    curve = max_degree_curve(pool, labeled_clean, cands, unlabeled)
    if curve.max() <= 1:
        return DeltaUpdate(current_delta, True, cands, curve)
    best = np.flatnonzero(curve == curve.max())
    pick = best[np.argmax(cands[best])] if prefer_larger else best[np.argmin(cands[best])]
    return DeltaUpdate(float(cands[pick]), False, cands, curve)
