"""Linear-probe evaluation of a labeled set and the reported metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from noisyal.datapool import EmbeddingPool, LabelState, round_half_up
from noisyal.errors import ValidationError
from noisyal.filters import AUM_PROBE, FilterVerdict, LabeledSet, aum_scores, run_filter
from noisyal.noise_model import Annotator
from noisyal.probe import LinearProbeConfig, train_linear_probe

log = logging.getLogger(__name__)

POLICIES = ("filter_then_train", "all_samples", "top_p_confident")


@dataclass(frozen=True)
class TrainPolicy:
    mode: str = "filter_then_train"
    p: float | None = None

    def __post_init__(self):
        if self.mode not in POLICIES:
            raise ValidationError(f"unknown train policy {self.mode!r}; expected one of {POLICIES}")
        if self.p is not None and not 0 < self.p <= 1:
            raise ValidationError("p must lie in (0, 1]")


@dataclass
class EvalResult:
    test_accuracy: float
    n_train_used: int
    seed: int
    precision: float | None = None
    recall: float | None = None
    predicted_ratio: float | None = None
    accuracy_delta_vs_random: float | None = None
    flags: list[str] = field(default_factory=list)


def filter_metrics(verdict: FilterVerdict, annotator: Annotator, labeled=None) -> dict[str, float]:
    """Noisy-as-positive precision and recall plus the predicted noise ratio."""
    labeled = verdict.labeled if labeled is None else np.asarray(labeled, dtype=np.int64)
    truly = set(int(i) for i in labeled[annotator.corruption_mask[labeled]])
    predicted = set(int(i) for i in verdict.noisy)
    hit = len(truly & predicted)
    return {
        "precision": hit / len(predicted) if predicted else 1.0,
        "recall": hit / len(truly) if truly else 1.0,
        "predicted_ratio": verdict.predicted_noise_ratio,
    }


def training_indices(pool: EmbeddingPool, state: LabelState, policy: TrainPolicy, filter_name: str | None,
                     filter_params: dict | None, annotator: Annotator | None, seed: int
                     ) -> tuple[np.ndarray, FilterVerdict | None]:
    labeled = np.sort(state.labeled_array())
    if policy.mode == "all_samples":
        return labeled, None
    if policy.mode == "filter_then_train":
        if filter_name is None:
            raise ValidationError("filter_then_train needs a filter")
        verdict = run_filter(filter_name, pool, state, filter_params, annotator, seed)
        return np.sort(verdict.clean), verdict

    p = policy.p
    verdict = None
    if p is None:
        verdict = run_filter("aum", pool, state, filter_params if filter_name == "aum" else None, annotator, seed)
        p = 1.0 - verdict.predicted_noise_ratio
    if p >= 1.0:
        return labeled, verdict
    ls = LabeledSet.from_state(pool, state)
    unl = np.ones(pool.n, dtype=bool)
    unl[labeled] = False
    scores, _ = aum_scores(ls, pool.probe_features[unl], AUM_PROBE, seed=seed)
    keep = round_half_up(p * len(ls))
    top = np.argsort(-scores, kind="stable")[:keep]
    return np.sort(ls.indices[top]), verdict


def evaluate(pool: EmbeddingPool, state: LabelState, test: EmbeddingPool, policy: TrainPolicy,
             probe_config: LinearProbeConfig | None = None, filter_name: str | None = None,
             filter_params: dict | None = None, annotator: Annotator | None = None, seed: int = 0) -> EvalResult:
    """Train a probe on the policy's subset of the labeled set and score it on ``test``.

    Observed labels come from ``state``; true labels of training samples are
    never consulted except through ``annotator`` for filter metrics.
    """
    probe_config = (probe_config or LinearProbeConfig()).with_(seed=seed)
    train, verdict = training_indices(pool, state, policy, filter_name, filter_params, annotator, seed)
    result = EvalResult(test_accuracy=0.0, n_train_used=int(train.size), seed=seed)
    if verdict is not None and annotator is not None:
        m = filter_metrics(verdict, annotator, state.labeled_array())
        result.precision, result.recall, result.predicted_ratio = m["precision"], m["recall"], m["predicted_ratio"]
    if train.size == 0:
        result.test_accuracy = 1.0 / pool.class_count
        result.flags.append("empty_training_set")
        log.warning("empty training set after filtering; reporting the uniform-prior accuracy")
        return result
    probe = train_linear_probe(pool.probe_features[train], state.observed_array(train), probe_config,
                               class_count=pool.class_count)
    result.test_accuracy = probe.accuracy(pool.standardize(test.features), test.true_labels)
    return result


@dataclass(frozen=True)
class DeltaSummary:
    deltas: dict[int, float]
    mean: float
    standard_error: float


def accuracy_delta_vs_random(strategy: dict[int, float], random: dict[int, float]) -> DeltaSummary:
    """Per-seed paired accuracy differences with their mean and standard error."""
    if set(strategy) != set(random):
        raise ValidationError(f"seed sets differ: {sorted(strategy)} vs {sorted(random)}")
    if not strategy:
        raise ValidationError("no seeds to compare")
    deltas = {s: strategy[s] - random[s] for s in sorted(strategy)}
    values = np.array(list(deltas.values()))
    se = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0
    return DeltaSummary(deltas, float(values.mean()), se)
