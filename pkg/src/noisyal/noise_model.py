"""Simulated noisy annotator: symmetric, asymmetric and instance-dependent noise."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from noisyal.datapool import EmbeddingPool, round_half_up, write_labels
from noisyal.errors import ValidationError

log = logging.getLogger(__name__)

NOISE_KINDS = ("none", "symmetric", "asymmetric", "instance_dependent")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = "none"
    rate: float = 0.0
    transition: np.ndarray | None = None
    cluster_fraction: float | None = None
    n_anchors: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValidationError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        if not 0 <= self.rate < 1:
            raise ValidationError(f"noise rate must lie in [0, 1), got {self.rate}")
        if self.kind == "asymmetric":
            if self.transition is None:
                raise ValidationError("asymmetric noise requires a transition matrix")
            check_transition(np.asarray(self.transition, dtype=float))
        if self.cluster_fraction is not None and not 0 < self.cluster_fraction <= 1:
            raise ValidationError("cluster_fraction must lie in (0, 1]")


def check_transition(T: np.ndarray, class_count: int | None = None) -> None:
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise ValidationError(f"transition matrix must be square, got {T.shape}")
    if class_count is not None and T.shape[0] != class_count:
        raise ValidationError(f"transition matrix is {T.shape[0]}x{T.shape[0]} but pool has {class_count} classes")
    if np.any(T < 0) or not np.allclose(T.sum(axis=1), 1.0, rtol=0, atol=1e-9):
        raise ValidationError("transition matrix rows must be non-negative and sum to 1")


@dataclass(frozen=True, eq=False)
class Annotator:
    """Fixed noisy labels; asking twice about a sample gives the same answer."""

    noisy_labels: np.ndarray
    corruption_mask: np.ndarray

    @classmethod
    def from_labels(cls, true_labels, noisy_labels) -> Annotator:
        noisy = np.asarray(noisy_labels, dtype=np.int64).copy()
        true = np.asarray(true_labels, dtype=np.int64)
        if noisy.shape != true.shape:
            raise ValidationError(f"{noisy.size} noisy labels for {true.size} samples")
        mask = noisy != true
        noisy.setflags(write=False)
        mask.setflags(write=False)
        return cls(noisy, mask)

    @property
    def noise_rate(self) -> float:
        return float(self.corruption_mask.mean())

    def save(self, path: str | Path) -> None:
        write_labels(path, self.noisy_labels)


def annotate(annotator: Annotator, indices) -> dict[int, int]:
    idx = np.asarray(indices, dtype=np.int64).ravel()
    n = annotator.noisy_labels.size
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValidationError(f"annotation query outside [0, {n})")
    return {int(i): int(annotator.noisy_labels[i]) for i in idx}


def build_annotator(pool: EmbeddingPool, spec: NoiseSpec) -> Annotator:
    y = pool.true_labels
    C = pool.class_count
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "none" or (spec.kind in ("symmetric", "instance_dependent") and spec.rate == 0):
        return Annotator.from_labels(y, y)
    if spec.kind == "symmetric":
        noisy = y.copy()
        count = round_half_up(spec.rate * pool.n)
        chosen = rng.choice(pool.n, size=count, replace=False)
        # offset in [1, C) maps to a uniform draw over the other C-1 classes
        noisy[chosen] = (y[chosen] + rng.integers(1, C, size=count)) % C
        return Annotator.from_labels(y, noisy)
    if spec.kind == "asymmetric":
        T = np.asarray(spec.transition, dtype=float)
        check_transition(T, C)
        cdf = np.cumsum(T[y], axis=1)
        cdf /= cdf[:, -1:]
        u = rng.random(pool.n)[:, None]
        noisy = np.minimum((u >= cdf).sum(axis=1), C - 1)
        return Annotator.from_labels(y, noisy)
    return _instance_dependent(pool, spec, rng)


def _instance_dependent(pool: EmbeddingPool, spec: NoiseSpec, rng: np.random.Generator) -> Annotator:
    """Corrupt samples near a few anchors toward the anchor's most-confused class.

    Noisy samples end up spatially clustered, unlike the symmetric case.
    """
    y = pool.true_labels
    C = pool.class_count
    n_anchors = spec.n_anchors or C
    count = round_half_up(spec.rate * pool.n)
    region = spec.cluster_fraction if spec.cluster_fraction is not None else min(1.0, 1.5 * spec.rate)
    region_size = max(count, round_half_up(region * pool.n))

    anchors = rng.choice(pool.n, size=min(n_anchors, pool.n), replace=False)
    dist = pool.distances[anchors]
    targets = np.empty(anchors.size, dtype=np.int64)
    for a, anchor in enumerate(anchors):
        order = np.argsort(dist[a], kind="stable")
        near = order[1:51]
        foreign = y[near][y[near] != y[anchor]]
        if foreign.size:
            targets[a] = np.bincount(foreign, minlength=C).argmax()
        else:
            others = order[y[order] != y[anchor]]
            targets[a] = y[others[0]] if others.size else (y[anchor] + 1) % C

    nearest = dist.argmin(axis=0)
    target = targets[nearest]
    # a sample whose true class is the anchor's target flips to the anchor's class instead
    target = np.where(target == y, y[anchors][nearest], target)
    eligible = target != y
    by_distance = np.argsort(dist.min(axis=0), kind="stable")
    candidates = by_distance[eligible[by_distance]]
    if candidates.size < count:
        raise ValidationError(f"instance-dependent noise cannot corrupt {count} samples")
    pool_region = candidates[:max(count, min(region_size, candidates.size))]
    chosen = rng.choice(pool_region, size=count, replace=False)
    noisy = y.copy()
    noisy[chosen] = target[chosen]
    return Annotator.from_labels(y, noisy)


def confusion_transition(
    pool: EmbeddingPool,
    probe_epochs: int = 3,
    target_rate: float = 0.2,
    seed: int = 0,
) -> np.ndarray:
    """Class-confusion transition matrix with per-class flip probability ``target_rate``.

    A deliberately weak linear probe is trained on half of the clean pool and
    its confusion matrix on the other half gives the distribution over wrong
    labels. Each row is then ``(1 - q) * e_i + q * offdiag_i``.
    """
    from noisyal.probe import LinearProbeConfig, train_linear_probe

    if not 0 <= target_rate < 1:
        raise ValidationError(f"target rate must lie in [0, 1), got {target_rate}")
    C = pool.class_count
    if target_rate == 0:
        return np.eye(C)
    y = pool.true_labels
    counts = np.bincount(y, minlength=C)
    if counts.min() < 2:
        raise ValidationError("confusion_transition needs at least two samples per class")

    rng = np.random.default_rng(seed)
    train = np.zeros(pool.n, dtype=bool)
    for c in range(C):
        members = rng.permutation(np.flatnonzero(y == c))
        train[members[: members.size // 2]] = True
    config = LinearProbeConfig(epochs=probe_epochs, seed=seed)
    probe = train_linear_probe(pool.probe_features[train], y[train], config, class_count=C)
    pred = probe.predict(pool.probe_features[~train])
    confusion = np.zeros((C, C))
    np.add.at(confusion, (y[~train], pred), 1.0)

    off = confusion.copy()
    np.fill_diagonal(off, 0.0)
    row_mass = off.sum(axis=1)
    T = np.zeros((C, C))
    for c in range(C):
        if row_mass[c] > 0:
            T[c] = target_rate * off[c] / row_mass[c]
        else:
            log.warning("class %d has no off-diagonal confusion; using uniform fallback", c)
            T[c] = target_rate / (C - 1)
        T[c, c] = 1.0 - target_rate
    return T
