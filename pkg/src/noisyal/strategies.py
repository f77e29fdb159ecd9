"""Greedy query-selection strategies sharing one request/selection interface."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from noisyal.covergraph import CoverGraph, build_graph, delta_grid, update_delta
from noisyal.datapool import EmbeddingPool
from noisyal.errors import ValidationError

log = logging.getLogger(__name__)

STRATEGIES = ("random", "probcover", "maxherding", "coreset")


def _index_array(values) -> np.ndarray:
    if values is None:
        return np.empty(0, dtype=np.int64)
    return np.unique(np.asarray(values, dtype=np.int64).ravel())


@dataclass
class StrategyRequest:
    """What the strategy may see: the labeled anchors it trusts and the candidates.

    ``labeled_noisy`` and ``noisy_weight`` only matter to ProbCover, where they
    shape the edge weights of the cover graph.
    """

    labeled_clean: np.ndarray
    unlabeled: np.ndarray
    batch: int
    params: dict = field(default_factory=dict)
    labeled_noisy: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    noisy_weight: float = 1.0

    def __post_init__(self):
        self.labeled_clean = _index_array(self.labeled_clean)
        self.unlabeled = _index_array(self.unlabeled)
        self.labeled_noisy = _index_array(self.labeled_noisy)
        if self.batch < 1:
            raise ValidationError("batch must be >= 1")
        if self.unlabeled.size == 0:
            raise ValidationError("no unlabeled candidates to select from")
        if self.batch > self.unlabeled.size:
            raise ValidationError(f"batch {self.batch} exceeds {self.unlabeled.size} unlabeled candidates")


@dataclass
class Selection:
    chosen: list[int]
    per_pick_scores: list[float]
    events: list[str] = field(default_factory=list)


class _Candidates:
    def __init__(self, unlabeled: np.ndarray, n: int):
        self.mask = np.zeros(n, dtype=bool)
        self.mask[unlabeled] = True

    def take(self, idx: int) -> None:
        self.mask[idx] = False

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)


def prepare_graph(graph: CoverGraph, clean, noisy=(), noisy_weight: float = 1.0) -> CoverGraph:
    """Reset all weights to 1, then apply the clean/noisy view of the labeled set.

    Balls around noisy samples get incoming weight ``noisy_weight``; balls
    around clean samples are zeroed (covered) even where they overlap noisy
    balls; outgoing edges of noisy samples are zeroed so they are never
    re-picked.
    """
    graph.reset_weights()
    noisy = _index_array(noisy)
    if noisy.size and noisy_weight != 1.0:
        graph.set_incoming_weight(noisy, noisy_weight)
    graph.zero_incoming(clean)
    graph.zero_outgoing(noisy)
    return graph


def probcover_select(request: StrategyRequest, graph: CoverGraph, pool: EmbeddingPool,
                     rng: np.random.Generator | None = None) -> Selection:
    """Greedy max-ODR picks; each pick zeroes the incoming edges of its ball.

    ``graph`` must already reflect the request's labeled view (see
    ``prepare_graph``) and is mutated in place. When no candidate has an ODR
    above 1 the radius is re-chosen with ``update_delta``; if that is also
    exhausted the remaining picks are uniform random.
    """
    params = request.params
    use_delta_update = params.get("delta_update", True)
    grid_size = int(params.get("delta_grid_size", 16))
    prefer_larger = params.get("prefer_larger_delta", True)
    rng = rng if rng is not None else np.random.default_rng(0)

    cands = _Candidates(request.unlabeled, pool.n)
    chosen: list[int] = []
    scores: list[float] = []
    events: list[str] = []
    random_fallback = False
    for _ in range(request.batch):
        idx = cands.indices
        if not random_fallback and use_delta_update and graph.max_odr(idx) <= 1:
            anchors = np.concatenate([request.labeled_clean, np.asarray(chosen, dtype=np.int64)])
            upd = update_delta(pool, anchors, delta_grid(graph.delta, grid_size), graph.delta,
                               unlabeled=idx, prefer_larger=prefer_larger)
            if upd.exhausted:
                random_fallback = True
                events.append("exhausted")
                log.info("cover graph exhausted at delta=%.4g; remaining picks are random", graph.delta)
            else:
                events.append(f"delta_update:{graph.delta:.6g}->{upd.delta:.6g}")
                graph.rebuild(upd.delta)
                prepare_graph(graph, anchors, request.labeled_noisy, request.noisy_weight)
        if random_fallback:
            pick = int(rng.choice(idx))
            scores.append(float("nan"))
        else:
            pick = graph.argmax_odr(idx)
            scores.append(float(graph.odr[pick]))
            graph.zero_incoming([pick])
        chosen.append(pick)
        cands.take(pick)
    return Selection(chosen, scores, events)


def gaussian_kernel(pool: EmbeddingPool, sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ValidationError(f"kernel lengthscale must be positive, got {sigma}")
    return np.exp(-(pool.distances ** 2) / (2.0 * sigma * sigma))


def maxherding_select(request: StrategyRequest, pool: EmbeddingPool, kernel: np.ndarray | None = None) -> Selection:
    """Greedy kernel coverage: maximize the total gain in best similarity to the selected set."""
    sigma = float(request.params.get("sigma", 1.0))
    K = gaussian_kernel(pool, sigma) if kernel is None else kernel
    best = K[request.labeled_clean].max(axis=0) if request.labeled_clean.size else np.zeros(pool.n)
    cands = _Candidates(request.unlabeled, pool.n)
    chosen, scores = [], []
    for _ in range(request.batch):
        idx = cands.indices
        gains = np.maximum(K[idx] - best, 0.0).sum(axis=1)
        j = int(np.argmax(gains))
        pick = int(idx[j])
        chosen.append(pick)
        scores.append(float(gains[j]))
        np.maximum(best, K[pick], out=best)
        cands.take(pick)
    return Selection(chosen, scores)


def coreset_select(request: StrategyRequest, pool: EmbeddingPool) -> Selection:
    """Greedy k-center: each pick is the candidate farthest from everything selected."""
    dist = pool.distances
    if request.labeled_clean.size:
        min_dist = dist[request.labeled_clean].min(axis=0)
    else:
        min_dist = np.full(pool.n, np.inf)
    cands = _Candidates(request.unlabeled, pool.n)
    chosen, scores = [], []
    for _ in range(request.batch):
        idx = cands.indices
        j = int(np.argmax(min_dist[idx]))
        pick = int(idx[j])
        chosen.append(pick)
        scores.append(float(min_dist[pick]))
        np.minimum(min_dist, dist[pick], out=min_dist)
        cands.take(pick)
    return Selection(chosen, scores)


def random_select(request: StrategyRequest, seed: int | np.random.Generator = 0) -> Selection:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    picks = rng.choice(request.unlabeled, size=request.batch, replace=False)
    return Selection([int(i) for i in picks], [float("nan")] * request.batch)


class StrategyRunner:
    """Holds the per-run state a strategy keeps across rounds (graph, kernel, rng)."""

    def __init__(self, name: str, pool: EmbeddingPool, params: dict | None = None, seed: int = 0):
        if name not in STRATEGIES:
            raise ValidationError(f"unknown strategy {name!r}; expected one of {STRATEGIES}")
        self.name = name
        self.pool = pool
        self.params = dict(params or {})
        self.rng = np.random.default_rng(seed)
        self.graph: CoverGraph | None = None
        self._kernel = None
        if name == "probcover":
            if "delta" not in self.params:
                raise ValidationError("probcover requires a 'delta' parameter")
            self.graph = build_graph(pool, float(self.params["delta"]))

    @property
    def delta(self) -> float | None:
        return self.graph.delta if self.graph is not None else None

    def select(self, request: StrategyRequest) -> Selection:
        request.params = {**self.params, **request.params}
        if self.name == "random":
            return random_select(request, self.rng)
        if self.name == "coreset":
            return coreset_select(request, self.pool)
        if self.name == "maxherding":
            if self._kernel is None:
                self._kernel = gaussian_kernel(self.pool, float(self.params.get("sigma", 1.0)))
            return maxherding_select(request, self.pool, self._kernel)
        prepare_graph(self.graph, request.labeled_clean, request.labeled_noisy, request.noisy_weight)
        return probcover_select(request, self.graph, self.pool, self.rng)
