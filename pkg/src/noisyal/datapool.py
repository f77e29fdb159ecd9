"""Embedding pools, labeled/unlabeled bookkeeping and the ALNE file format."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from noisyal.errors import AlignmentError, FormatError, ValidationError

ALNE_MAGIC = b"ALNE"
ALNE_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def l2_normalize(features: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return features / norms


@dataclass(frozen=True, eq=False)
class EmbeddingPool:
    """Feature matrix plus hidden ground-truth labels.

    Strategies only ever look at ``features``; ``true_labels`` are reserved
    for the simulated annotator and for evaluation.
    """

    features: np.ndarray
    true_labels: np.ndarray
    class_count: int
    normalized: bool = True

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        labels = np.asarray(self.true_labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] == 0 or feats.shape[1] == 0:
            raise ValidationError(f"features must be a non-empty N x D matrix, got {feats.shape}")
        if labels.shape != (feats.shape[0],):
            raise AlignmentError(f"{feats.shape[0]} feature rows but {labels.size} labels")
        if self.class_count < 2:
            raise ValidationError("class_count must be at least 2")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise ValidationError("true labels must lie in [0, class_count)")
        if self.normalized and not np.allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-6):
            raise ValidationError("pool flagged normalized but rows are not unit length")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "true_labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @cached_property
    def feature_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-dimension mean and standard deviation over the whole pool."""
        mean = self.features.mean(axis=0)
        std = self.features.std(axis=0)
        std[std < 1e-12] = 1.0
        return mean, std

    def standardize(self, x: np.ndarray) -> np.ndarray:
        """Z-score ``x`` with this pool's statistics (linear probes train on this scale)."""
        mean, std = self.feature_stats
        return (np.asarray(x, dtype=np.float64) - mean) / std

    @cached_property
    def probe_features(self) -> np.ndarray:
        z = self.standardize(self.features)
        z.setflags(write=False)
        return z

    @cached_property
    def distances(self) -> np.ndarray:
        """Exact pairwise Euclidean distance matrix (computed once, read-only)."""
        d = pairwise_distances(self.features, self.features)
        d.setflags(write=False)
        return d


def pairwise_distances(a: np.ndarray, b: np.ndarray, block: int = 1024) -> np.ndarray:
    """Euclidean distances between rows of ``a`` and ``b``, computed in row blocks."""
    same = a is b
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((a.shape[0], b.shape[0]))
    b_sq = np.einsum("ij,ij->i", b, b)
    for start in range(0, a.shape[0], block):
        chunk = a[start:start + block]
        sq = np.einsum("ij,ij->i", chunk, chunk)[:, None] + b_sq[None, :] - 2.0 * chunk @ b.T
        np.maximum(sq, 0.0, out=sq)
        out[start:start + block] = np.sqrt(sq)
    if same:
        # the expansion leaves ~1e-8 residue on the diagonal
        np.fill_diagonal(out, 0.0)
    return out


@dataclass(frozen=True)
class SyntheticSpec:
    class_count: int = 10
    points_per_class: int = 200
    dim: int = 16
    cluster_spread: float = 1.0
    center_spread: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2 or self.points_per_class < 1 or self.dim < 1:
            raise ValidationError("synthetic counts must be positive (and class_count >= 2)")
        if self.cluster_spread <= 0 or self.center_spread <= 0:
            raise ValidationError("synthetic spreads must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")


def generate_synthetic(spec: SyntheticSpec, stream: int = 0, points_per_class: int | None = None) -> EmbeddingPool:
    """Sample an isotropic Gaussian mixture and L2-normalize its rows.

    Class centers depend only on ``spec.seed``; ``stream`` selects an
    independent sample stream around the same centers, which is how
    held-out test pools are drawn.
    """
    centers = np.random.default_rng(spec.seed).normal(0.0, spec.center_spread, size=(spec.class_count, spec.dim))
    ppc = spec.points_per_class if points_per_class is None else points_per_class
    rng = np.random.default_rng([spec.seed, stream])
    labels = np.repeat(np.arange(spec.class_count), ppc)
    feats = centers[labels] + rng.normal(0.0, spec.cluster_spread, size=(labels.size, spec.dim))
    return EmbeddingPool(l2_normalize(feats), labels, spec.class_count, normalized=True)


def synthetic_test_pool(spec: SyntheticSpec, fraction: float = 0.2) -> EmbeddingPool:
    ppc = max(1, round_half_up(spec.points_per_class * fraction))
    return generate_synthetic(spec, stream=1, points_per_class=ppc)


def save_embeddings(pool: EmbeddingPool, path: str | Path, labels_path: str | Path) -> None:
    feats = np.ascontiguousarray(pool.features, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(ALNE_MAGIC, ALNE_VERSION, feats.shape[0], feats.shape[1]))
        fh.write(feats.tobytes(order="C"))
    write_labels(labels_path, pool.true_labels)


def write_labels(path: str | Path, labels) -> None:
    Path(path).write_text("".join(f"{int(y)}\n" for y in labels), encoding="utf-8")


def read_labels(path: str | Path) -> np.ndarray:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    try:
        return np.array([int(line) for line in lines if line.strip()], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: labels must be one decimal integer per line ({exc})") from None


def read_alne(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    magic, version, n, d = _HEADER.unpack_from(raw, 0)
    if magic != ALNE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != ALNE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if n == 0 or d == 0:
        raise FormatError(f"{path}: empty matrix N={n} D={d}", offset=8)
    expected = _HEADER.size + 4 * n * d
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for N={n} D={d}, found {len(raw)}", offset=min(len(raw), expected))
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(n, d).astype(np.float64)


def load_embeddings(path: str | Path, labels_path: str | Path, class_count: int | None = None) -> EmbeddingPool:
    """Read an ALNE feature file plus its label file; rows are normalized on load."""
    feats = read_alne(path)
    labels = read_labels(labels_path)
    if labels.size != feats.shape[0]:
        raise AlignmentError(f"{path} has N={feats.shape[0]} rows but {labels_path} has {labels.size} labels")
    if class_count is None:
        class_count = max(2, int(labels.max()) + 1)
    return EmbeddingPool(l2_normalize(feats), labels, class_count, normalized=True)


@dataclass
class LabelState:
    n: int
    budget: int
    labeled: list[int] = field(default_factory=list)
    observed: dict[int, int] = field(default_factory=dict)
    query_log: list[tuple[int, int]] = field(default_factory=list)

    @property
    def unlabeled(self) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[self.labeled] = False
        return np.flatnonzero(mask)

    @property
    def remaining(self) -> int:
        return self.budget - len(self.labeled)

    def add(self, round_index: int, labels: dict[int, int]) -> None:
        if len(self.labeled) + len(labels) > self.budget:
            raise ValidationError(f"adding {len(labels)} labels would exceed the budget of {self.budget}")
        for idx, y in labels.items():
            idx = int(idx)
            if idx in self.observed:
                raise ValidationError(f"index {idx} is already labeled")
            if not 0 <= idx < self.n:
                raise ValidationError(f"index {idx} outside [0, {self.n})")
            self.labeled.append(idx)
            self.observed[idx] = int(y)
            self.query_log.append((round_index, idx))

    def labeled_array(self) -> np.ndarray:
        return np.asarray(self.labeled, dtype=np.int64)

    def observed_array(self, indices=None) -> np.ndarray:
        if indices is None:
            indices = self.labeled
        return np.asarray([self.observed[int(i)] for i in indices], dtype=np.int64)


def init_label_state(pool: EmbeddingPool, budget: int) -> LabelState:
    if not 0 < budget <= pool.n:
        raise ValidationError(f"budget must satisfy 0 < B <= N={pool.n}, got {budget}")
    return LabelState(n=pool.n, budget=int(budget))


def budget_for_spc(expected_spc: int, class_count: int, noise_rate: float) -> int:
    """Annotation budget that yields ``expected_spc`` clean samples per class."""
    if not 0 <= noise_rate < 1:
        raise ValidationError(f"noise rate must lie in [0, 1), got {noise_rate}")
    if expected_spc <= 0:
        raise ValidationError("expected_spc must be positive")
    return round_half_up(expected_spc * class_count / (1.0 - noise_rate))
