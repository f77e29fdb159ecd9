import math

import numpy as np
import pytest

from noisyal.datapool import LabelState, SyntheticSpec, generate_synthetic, init_label_state, synthetic_test_pool
from noisyal.errors import ValidationError
from noisyal.evaluation import (
    TrainPolicy,
    accuracy_delta_vs_random,
    evaluate,
    filter_metrics,
    training_indices,
)
from noisyal.filters import FilterVerdict
from noisyal.noise_model import Annotator, NoiseSpec, annotate, build_annotator
from noisyal.probe import LinearProbeConfig

FAST = LinearProbeConfig(epochs=100)


@pytest.fixture(scope="module")
def setup():
    spec = SyntheticSpec(class_count=5, points_per_class=60, dim=8, cluster_spread=0.2, seed=6)
    return generate_synthetic(spec), synthetic_test_pool(spec)


def fill(pool, ann, indices):
    state = init_label_state(pool, len(indices))
    state.add(0, annotate(ann, indices))
    return state


def test_clean_separable_accuracy(setup):
    pool, test = setup
    ann = build_annotator(pool, NoiseSpec("none"))
    state = fill(pool, ann, np.arange(0, pool.n, 3))
    res = evaluate(pool, state, test, TrainPolicy("all_samples"), FAST, seed=0)
    assert res.test_accuracy >= 0.95
    assert res.n_train_used == 100


def test_top_p_one_equals_all_samples(setup):
    pool, test = setup
    ann = build_annotator(pool, NoiseSpec("symmetric", 0.3, seed=1))
    state = fill(pool, ann, np.arange(0, pool.n, 4))
    a = evaluate(pool, state, test, TrainPolicy("all_samples"), FAST, seed=2)
    b = evaluate(pool, state, test, TrainPolicy("top_p_confident", 1.0), FAST, seed=2)
    assert a.test_accuracy == b.test_accuracy and a.n_train_used == b.n_train_used


def test_top_p_keeps_rounded_fraction(setup):
    pool, _ = setup
    ann = build_annotator(pool, NoiseSpec("symmetric", 0.3, seed=1))
    state = fill(pool, ann, np.arange(0, pool.n, 4))
    idx, _ = training_indices(pool, state, TrainPolicy("top_p_confident", 0.6), None, None, ann, 0)
    assert idx.size == 45


def test_all_noisy_ideal_filter_gives_uniform_prior(setup):
    pool, test = setup
    noisy = (pool.true_labels + 1) % pool.class_count
    ann = Annotator.from_labels(pool.true_labels, noisy)
    state = fill(pool, ann, np.arange(0, pool.n, 10))
    res = evaluate(pool, state, test, TrainPolicy("filter_then_train"), FAST, "ideal", annotator=ann)
    assert res.test_accuracy == pytest.approx(1 / pool.class_count)
    assert "empty_training_set" in res.flags and res.n_train_used == 0


def test_ideal_filter_trains_on_clean_only(setup):
    pool, _ = setup
    ann = build_annotator(pool, NoiseSpec("symmetric", 0.4, seed=3))
    state = fill(pool, ann, np.arange(0, pool.n, 2))
    idx, verdict = training_indices(pool, state, TrainPolicy("filter_then_train"), "ideal", None, ann, 0)
    assert not ann.corruption_mask[idx].any()
    m = filter_metrics(verdict, ann)
    assert m["precision"] == 1.0 and m["recall"] == 1.0


def test_metrics_everything_noisy():
    ann = Annotator.from_labels(np.zeros(10, dtype=int), [1, 1, 0, 0, 0, 0, 0, 0, 0, 1])
    idx = np.arange(10)
    m = filter_metrics(FilterVerdict.from_mask(idx, np.ones(10, dtype=bool)), ann)
    assert m["precision"] == pytest.approx(0.3) and m["recall"] == 1.0


def test_metrics_hand_count():
    ann = Annotator.from_labels(np.zeros(4, dtype=int), [1, 1, 0, 0])
    v = FilterVerdict.from_mask(np.arange(4), np.array([True, False, True, False]))
    m = filter_metrics(v, ann)
    assert m == {"precision": 0.5, "recall": 0.5, "predicted_ratio": 0.5}
    assert filter_metrics(v, ann) == m


def test_metrics_conventions_for_empty_sets():
    ann = Annotator.from_labels(np.zeros(3, dtype=int), [0, 0, 0])
    m = filter_metrics(FilterVerdict.from_mask(np.arange(3), np.zeros(3, dtype=bool)), ann)
    assert m["precision"] == 1.0 and m["recall"] == 1.0


def test_filter_then_train_needs_filter(setup):
    pool, test = setup
    state = fill(pool, build_annotator(pool, NoiseSpec("none")), [0, 1, 2])
    with pytest.raises(ValidationError):
        evaluate(pool, state, test, TrainPolicy("filter_then_train"))


def test_policy_validation():
    with pytest.raises(ValidationError):
        TrainPolicy("majority")
    with pytest.raises(ValidationError):
        TrainPolicy("top_p_confident", 0.0)


def test_evaluation_ignores_true_labels_of_training_rows(setup):
    pool, test = setup
    ann = build_annotator(pool, NoiseSpec("symmetric", 0.3, seed=1))
    idx = np.arange(0, pool.n, 4)
    state = fill(pool, ann, idx)
    # same observations with a pool whose hidden labels are scrambled outside the training rows
    from noisyal.datapool import EmbeddingPool
    scrambled = pool.true_labels.copy()
    scrambled[idx] = (scrambled[idx] + 2) % pool.class_count
    other = EmbeddingPool(pool.features, scrambled, pool.class_count)
    a = evaluate(pool, state, test, TrainPolicy("all_samples"), FAST, seed=0)
    b = evaluate(other, state, test, TrainPolicy("all_samples"), FAST, seed=0)
    assert a.test_accuracy == b.test_accuracy


def test_delta_random_is_zero():
    acc = {0: 0.5, 1: 0.6}
    d = accuracy_delta_vs_random(acc, acc)
    assert d.mean == 0 and d.standard_error == 0


def test_delta_constant_offset():
    rnd = {s: 0.5 + 0.01 * s for s in range(5)}
    d = accuracy_delta_vs_random({s: v + 0.02 for s, v in rnd.items()}, rnd)
    assert d.mean == pytest.approx(0.02) and d.standard_error == pytest.approx(0.0, abs=1e-12)


def test_delta_hand_computed():
    strat = {0: 0.70, 1: 0.62, 2: 0.66, 3: 0.71, 4: 0.64}
    rnd = {0: 0.60, 1: 0.60, 2: 0.60, 3: 0.60, 4: 0.60}
    d = accuracy_delta_vs_random(strat, rnd)
    deltas = [0.10, 0.02, 0.06, 0.11, 0.04]
    mean = sum(deltas) / 5
    se = math.sqrt(sum((x - mean) ** 2 for x in deltas) / 4) / math.sqrt(5)
    assert d.mean == pytest.approx(mean) and d.standard_error == pytest.approx(se)


def test_delta_seed_mismatch():
    with pytest.raises(ValidationError):
        accuracy_delta_vs_random({0: 1.0}, {1: 1.0})
    with pytest.raises(ValidationError):
        accuracy_delta_vs_random({}, {})
