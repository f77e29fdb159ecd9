"""Low-budget noise filters: each splits the labeled set into clean and noisy parts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from noisyal.datapool import EmbeddingPool, LabelState, pairwise_distances, round_half_up
from noisyal.errors import ValidationError
from noisyal.noise_model import Annotator
from noisyal.probe import LinearProbeConfig, train_linear_probe

FILTERS = ("ideal", "crossvalidation", "aum", "aum_known_rate", "knn", "centroids", "disagreenet", "fine")

AUM_PROBE = LinearProbeConfig(epochs=40, base_lr=0.025, momentum=0.9, weight_decay=3e-4, batch_size=100)
CV_PROBE = LinearProbeConfig(epochs=100)


@dataclass
class LabeledSet:
    """Labeled samples as a filter sees them.

    ``features`` are the unit-norm rows used for every distance; linear probes
    train on ``probe_features`` (the same rows z-scored with pool statistics).
    """

    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    probe_features: np.ndarray | None = None

    def __post_init__(self):
        if self.probe_features is None:
            self.probe_features = self.features

    @classmethod
    def from_state(cls, pool: EmbeddingPool, state: LabelState, subset=None) -> LabeledSet:
        idx = np.sort(np.asarray(state.labeled if subset is None else subset, dtype=np.int64))
        return cls(idx, pool.features[idx], state.observed_array(idx), pool.class_count, pool.probe_features[idx])

    def __len__(self) -> int:
        return int(self.indices.size)


@dataclass
class FilterVerdict:
    clean: np.ndarray
    noisy: np.ndarray
    predicted_noise_ratio: float
    scores: dict[int, float] | None = None
    events: list[str] = field(default_factory=list)

    @classmethod
    def from_mask(cls, indices: np.ndarray, noisy_mask: np.ndarray, scores=None) -> FilterVerdict:
        noisy_mask = np.asarray(noisy_mask, dtype=bool)
        score_map = None
        if scores is not None:
            score_map = {int(i): float(s) for i, s in zip(indices, scores)}
        n = indices.size
        return cls(indices[~noisy_mask].copy(), indices[noisy_mask].copy(),
                   float(noisy_mask.sum()) / n if n else 0.0, score_map)

    @property
    def labeled(self) -> np.ndarray:
        return np.sort(np.concatenate([self.clean, self.noisy]))

    def save(self, path: str | Path, observed: dict[int, int]) -> None:
        """One line per labeled index: ``index observed_label clean|noisy score``."""
        noisy = set(int(i) for i in self.noisy)
        lines = []
        for i in self.labeled:
            i = int(i)
            score = self.scores.get(i, float("nan")) if self.scores else float("nan")
            lines.append(f"{i} {observed[i]} {'noisy' if i in noisy else 'clean'} {score:.10g}\n")
        Path(path).write_text("".join(lines), encoding="utf-8")


def read_verdict(path: str | Path) -> tuple[FilterVerdict, dict[int, int]]:
    idx, obs, noisy, scores = [], {}, [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        i, y, tag, s = line.split()
        idx.append(int(i))
        obs[int(i)] = int(y)
        noisy.append(tag == "noisy")
        scores.append(float(s))
    return FilterVerdict.from_mask(np.asarray(idx, dtype=np.int64), np.asarray(noisy), scores), obs


def _empty_verdict() -> FilterVerdict:
    return FilterVerdict(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), 0.0)


def filter_ideal(ls: LabeledSet, annotator: Annotator) -> FilterVerdict:
    return FilterVerdict.from_mask(ls.indices, annotator.corruption_mask[ls.indices])


def _stratified_folds(labels: np.ndarray, folds: int, rng: np.random.Generator) -> np.ndarray:
    assignment = np.empty(labels.size, dtype=np.int64)
    position = 0
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        assignment[members] = (position + np.arange(members.size)) % folds
        position += members.size
    return assignment


def filter_crossvalidation(ls: LabeledSet, folds: int = 3, repeats: int = 3,
                           config: LinearProbeConfig = CV_PROBE, seed: int = 0) -> FilterVerdict:
    """Held-out linear-probe votes from repeated stratified k-fold splits.

    A sample is noisy when fewer than half of the models that did not see it
    predict its observed label.
    """
    n = len(ls)
    if n < folds:
        raise ValidationError(f"crossvalidation needs at least {folds} labeled samples, got {n}")
    rng = np.random.default_rng(seed)
    agree = np.zeros(n)
    votes = np.zeros(n)
    for r in range(repeats):
        assignment = _stratified_folds(ls.labels, folds, rng)
        for f in range(folds):
            test = assignment == f
            train = ~test
            if not test.any() or not train.any():
                continue
            probe = train_linear_probe(ls.probe_features[train], ls.labels[train],
                                       config.with_(seed=seed * 1000 + r * folds + f), class_count=ls.class_count)
            pred = probe.predict(ls.probe_features[test])
            seen = np.isin(ls.labels[test], ls.labels[train])
            agree[test] += (pred == ls.labels[test]) & seen
            votes[test] += 1
    frac = np.divide(agree, votes, out=np.zeros(n), where=votes > 0)
    return FilterVerdict.from_mask(ls.indices, agree < votes / 2.0, frac)


def default_fake_count(n_labeled: int, class_count: int) -> int:
    return max(class_count, round_half_up(n_labeled / (class_count + 1)))


def aum_scores(ls: LabeledSet, unlabeled_features: np.ndarray, config: LinearProbeConfig = AUM_PROBE,
               fake_count: int | None = None, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Mean per-epoch margin (assigned logit minus best other logit).

    Fake samples drawn from the unlabeled pool are given the extra label C and
    trained alongside the real ones. Returns (real scores, fake scores).
    """
    C = ls.class_count
    F = default_fake_count(len(ls), C) if fake_count is None else int(fake_count)
    F = min(F, unlabeled_features.shape[0])
    if F < 5:
        raise ValidationError(f"AUM needs at least 5 fake-class samples, got {F}")
    rng = np.random.default_rng(seed)
    fake = unlabeled_features[rng.choice(unlabeled_features.shape[0], size=F, replace=False)]
    x = np.vstack([ls.probe_features, fake])
    y = np.concatenate([ls.labels, np.full(F, C, dtype=np.int64)])
    rows = np.arange(y.size)
    total = np.zeros(y.size)

    def record(epoch, probe):
        z = probe.logits(x)
        assigned = z[rows, y].copy()
        z[rows, y] = -np.inf
        total[:] += assigned - z.max(axis=1)

    train_linear_probe(x, y, config.with_(seed=seed), class_count=C + 1, epoch_callback=record)
    scores = total / config.epochs
    return scores[: len(ls)], scores[len(ls):]


def filter_lowbudget_aum(ls: LabeledSet, unlabeled_features: np.ndarray, config: LinearProbeConfig = AUM_PROBE,
                         percentile: float = 80.0, fake_count: int | None = None, seed: int = 0) -> FilterVerdict:
    if len(ls) == 0:
        return _empty_verdict()
    real, fake = aum_scores(ls, unlabeled_features, config, fake_count, seed)
    threshold = float(np.percentile(fake, percentile))
    verdict = FilterVerdict.from_mask(ls.indices, ~(real > threshold), real)
    verdict.events.append(f"aum_threshold:{threshold:.6g}")
    return verdict


def filter_aum_known_rate(ls: LabeledSet, unlabeled_features: np.ndarray, known_rate: float,
                          config: LinearProbeConfig = AUM_PROBE, fake_count: int | None = None,
                          seed: int = 0) -> FilterVerdict:
    """Mark exactly the ``known_rate`` fraction with the lowest AUM as noisy."""
    if not 0 <= known_rate <= 1:
        raise ValidationError(f"known noise rate must lie in [0, 1], got {known_rate}")
    if len(ls) == 0:
        return _empty_verdict()
    real, _ = aum_scores(ls, unlabeled_features, config, fake_count, seed)
    noisy = np.zeros(len(ls), dtype=bool)
    noisy[np.argsort(real, kind="stable")[: round_half_up(known_rate * len(ls))]] = True
    return FilterVerdict.from_mask(ls.indices, noisy, real)


def knn_k(n_labeled: int, class_count: int) -> int:
    return max(1, n_labeled // class_count)


def filter_knn(ls: LabeledSet, k: int | None = None) -> FilterVerdict:
    """Flag samples whose k nearest labeled neighbours mostly carry another label."""
    n = len(ls)
    if n < 2:
        raise ValidationError("knn filter needs at least two labeled samples")
    k = min(knn_k(n, ls.class_count) if k is None else k, n - 1)
    dist = pairwise_distances(ls.features, ls.features)
    np.fill_diagonal(dist, np.inf)
    neighbors = np.argsort(dist, axis=1, kind="stable")[:, :k]
    noisy = np.zeros(n, dtype=bool)
    own_share = np.zeros(n)
    for i in range(n):
        counts = np.bincount(ls.labels[neighbors[i]], minlength=ls.class_count)
        own = counts[ls.labels[i]]
        noisy[i] = own < counts.max()
        own_share[i] = own / k
    return FilterVerdict.from_mask(ls.indices, noisy, own_share)


def filter_centroids_ransac(ls: LabeledSet, trials: int = 10, subset_fraction: float = 0.7,
                            seed: int = 0) -> FilterVerdict:
    """Nearest robust class centroid; robust centroid = mean of the tightest random subset."""
    n = len(ls)
    if n == 0:
        return _empty_verdict()
    rng = np.random.default_rng(seed)
    classes = np.unique(ls.labels)
    centroids = np.empty((classes.size, ls.features.shape[1]))
    for k, c in enumerate(classes):
        members = ls.features[ls.labels == c]
        if members.shape[0] == 1:
            centroids[k] = members[0]
            continue
        size = max(1, math.ceil(subset_fraction * members.shape[0]))
        best = np.inf
        for _ in range(trials):
            sub = members[rng.choice(members.shape[0], size=size, replace=False)]
            logdet = float(np.sum(np.log(sub.var(axis=0) + 1e-12)))
            if logdet < best:
                best = logdet
                centroids[k] = sub.mean(axis=0)
    dist = pairwise_distances(ls.features, centroids)
    own = dist[np.arange(n), np.searchsorted(classes, ls.labels)]
    noisy = dist.min(axis=1) < own
    return FilterVerdict.from_mask(ls.indices, noisy, dist.min(axis=1) - own)


def filter_disagreenet(ls: LabeledSet, ensemble_size: int = 5, checkpoints=(10, 20, 30, 40),
                       config: LinearProbeConfig = AUM_PROBE, seed: int = 0) -> FilterVerdict:
    """Agreement of an ensemble of probes (over several checkpoints) with the observed label."""
    if ensemble_size < 2:
        raise ValidationError("disagreenet needs an ensemble of at least two probes")
    if len(ls) == 0:
        return _empty_verdict()
    checkpoints = set(int(c) for c in checkpoints)
    agree = np.zeros(len(ls))
    seen = [0]

    def record(epoch, probe):
        if epoch in checkpoints:
            agree[:] += probe.predict(ls.probe_features) == ls.labels
            seen[0] += 1

    for m in range(ensemble_size):
        train_linear_probe(ls.probe_features, ls.labels, config.with_(epochs=max(checkpoints), seed=seed * 1000 + m),
                           class_count=ls.class_count, epoch_callback=record)
    frac = agree / seen[0]
    return FilterVerdict.from_mask(ls.indices, frac < 0.5, frac)


def two_means_split(values: np.ndarray) -> float | None:
    """Optimal 1-D two-cluster threshold (minimum within-cluster SSE), or None if degenerate."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size < 2 or v[-1] - v[0] < 1e-12:
        return None
    csum = np.cumsum(v)
    csq = np.cumsum(v * v)
    total, total_sq, n = csum[-1], csq[-1], v.size
    k = np.arange(1, n)
    left = csq[:-1] - csum[:-1] ** 2 / k
    right = (total_sq - csq[:-1]) - (total - csum[:-1]) ** 2 / (n - k)
    best = int(np.argmin(left + right))
    return 0.5 * (v[best] + v[best + 1])


def filter_fine(ls: LabeledSet) -> FilterVerdict:
    """Alignment with the principal eigenvector of each class's Gram matrix."""
    n = len(ls)
    noisy = np.zeros(n, dtype=bool)
    scores = np.ones(n)
    for c in np.unique(ls.labels):
        members = np.flatnonzero(ls.labels == c)
        x = ls.features[members]
        norms = np.linalg.norm(x, axis=1)
        norms[norms == 0] = 1.0
        _, vecs = np.linalg.eigh(x.T @ x)
        u = vecs[:, -1]
        if np.mean(x @ u) < 0:
            u = -u
        align = (x @ u / norms) ** 2
        scores[members] = align
        if members.size < 3:
            continue
        threshold = two_means_split(align)
        if threshold is not None:
            noisy[members] = align < threshold
    return FilterVerdict.from_mask(ls.indices, noisy, scores)


def run_filter(name: str, pool: EmbeddingPool, state: LabelState, params: dict | None = None,
               annotator: Annotator | None = None, seed: int = 0, subset=None) -> FilterVerdict:
    """Dispatch a filter by name on the labeled set of ``state`` (or ``subset`` of it)."""
    params = dict(params or {})
    ls = LabeledSet.from_state(pool, state, subset)
    if len(ls) == 0:
        return _empty_verdict()
    probe_overrides = params.pop("probe", None)

    def probe_config(default: LinearProbeConfig) -> LinearProbeConfig:
        return default.with_(**probe_overrides) if probe_overrides else default

    if name == "ideal":
        if annotator is None:
            raise ValidationError("the ideal filter needs the annotator's corruption mask")
        return filter_ideal(ls, annotator)
    if name == "crossvalidation":
        return filter_crossvalidation(ls, int(params.get("folds", 3)), int(params.get("repeats", 3)),
                                      probe_config(CV_PROBE), seed)
    if name in ("aum", "aum_known_rate"):
        mask = np.ones(pool.n, dtype=bool)
        mask[state.labeled] = False
        unlabeled = pool.probe_features[mask]
        if name == "aum":
            return filter_lowbudget_aum(ls, unlabeled, probe_config(AUM_PROBE), float(params.get("percentile", 80.0)),
                                        params.get("fake_count"), seed)
        if "known_rate" not in params:
            raise ValidationError("aum_known_rate requires a 'known_rate' parameter")
        return filter_aum_known_rate(ls, unlabeled, float(params["known_rate"]), probe_config(AUM_PROBE),
                                     params.get("fake_count"), seed)
    if name == "knn":
        if len(ls) < 2:
            return FilterVerdict.from_mask(ls.indices, np.zeros(len(ls), dtype=bool))
        return filter_knn(ls, params.get("k"))
    if name == "centroids":
        return filter_centroids_ransac(ls, int(params.get("trials", 10)), float(params.get("subset_fraction", 0.7)), seed)
    if name == "disagreenet":
        return filter_disagreenet(ls, int(params.get("ensemble_size", 5)),
                                  tuple(params.get("checkpoints", (10, 20, 30, 40))), probe_config(AUM_PROBE), seed)
    if name == "fine":
        return filter_fine(ls)
    raise ValidationError(f"unknown filter {name!r}; expected one of {FILTERS}")
