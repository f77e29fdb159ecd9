"""Noise-aware active sampling: alternate small selections, annotation and filtering."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from noisyal.datapool import EmbeddingPool, LabelState
from noisyal.errors import ValidationError
from noisyal.filters import FILTERS, FilterVerdict, run_filter
from noisyal.noise_model import Annotator, annotate
from noisyal.strategies import STRATEGIES, StrategyRequest, StrategyRunner

log = logging.getLogger(__name__)


@dataclass
class NasConfig:
    strategy: str = "probcover"
    strategy_params: dict = field(default_factory=dict)
    filter: str = "aum"
    filter_params: dict = field(default_factory=dict)
    inner_batch: int | None = None
    use_noise_dropout: bool | None = None
    weighted_mode: bool = False
    warmup_budget: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown strategy {self.strategy!r}")
        if self.filter not in FILTERS:
            raise ValidationError(f"unknown filter {self.filter!r}")
        if self.inner_batch is not None and self.inner_batch < 1:
            raise ValidationError("inner_batch must be >= 1")
        if self.warmup_budget < 0:
            raise ValidationError("warmup_budget must be non-negative")

    def batch_size(self, class_count: int) -> int:
        if self.inner_batch is not None:
            return self.inner_batch
        return 1 if self.filter == "ideal" else class_count

    @property
    def dropout(self) -> bool:
        if self.use_noise_dropout is None:
            return self.filter == "aum"
        return self.use_noise_dropout


@dataclass
class RoundTrace:
    round: int
    q_hat: float | None
    eta: float | None
    n_clean: int
    n_noisy: int
    picks: list[int]
    delta: float | None
    events: list[str]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


def dropout_eta(q_hat) -> float:
    """Percentage of predicted-noisy samples returned to the clean set."""
    return 100.0 * max(min(q_hat, 1 - q_hat), 0.1)


def noise_dropout(verdict: FilterVerdict, seed: int | np.random.Generator = 0) -> tuple[FilterVerdict, float]:
    """Move a random eta% of the noisy samples back to clean.

    Returns the new verdict (noise ratio recomputed) and eta. The move count
    is computed in exact rational arithmetic so half-way cases round up
    deterministically.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_noisy = int(verdict.noisy.size)
    n = n_noisy + int(verdict.clean.size)
    if n == 0:
        return verdict, dropout_eta(0.0)
    q = Fraction(n_noisy, n)
    eta = max(min(q, 1 - q), Fraction(1, 10))
    if n_noisy == 0:
        return verdict, float(100 * eta)
    move = math.floor(eta * n_noisy + Fraction(1, 2))
    moved = rng.choice(verdict.noisy, size=move, replace=False)
    keep = ~np.isin(verdict.noisy, moved)
    clean = np.sort(np.concatenate([verdict.clean, moved]))
    noisy = verdict.noisy[keep]
    out = FilterVerdict(clean, noisy, noisy.size / n, verdict.scores, list(verdict.events))
    out.events.append(f"dropout_moved:{move}")
    return out, float(100 * eta)


@dataclass
class NasResult:
    state: LabelState
    traces: list[RoundTrace]
    filter_calls: int

    def save_traces(self, path: str | Path) -> None:
        Path(path).write_text("".join(t.to_json() + "\n" for t in self.traces), encoding="utf-8")


def _filter_seed(seed: int, round_index: int) -> int:
    return int(np.random.SeedSequence([seed, round_index]).generate_state(1)[0])


def run_nas(pool: EmbeddingPool, annotator: Annotator, state: LabelState, config: NasConfig,
            seed: int = 0) -> NasResult:
    """Fill ``state`` up to its budget with noise-aware selection.

    Each round filters the labeled set, optionally applies noise dropout, and
    lets the strategy pick ``b`` samples seeing only the clean part as labeled.
    Rounds before ``warmup_budget`` labels use the plain strategy.
    """
    b = config.batch_size(pool.class_count)
    runner = StrategyRunner(config.strategy, pool, config.strategy_params, seed)
    dropout_rng = np.random.default_rng([seed, 1])
    traces: list[RoundTrace] = []
    filter_calls = 0
    round_index = len(traces)
    while state.remaining > 0:
        batch = min(b, state.remaining)
        labeled = state.labeled_array()
        events: list[str] = []
        q_hat = eta = None
        noisy = np.empty(0, dtype=np.int64)
        clean = labeled
        weight = 1.0
        if labeled.size >= config.warmup_budget:
            filter_calls += 1
            try:
                verdict = run_filter(config.filter, pool, state, config.filter_params, annotator,
                                     _filter_seed(seed, round_index))
            except Exception as exc:  # a failed filter round degrades to plain selection
                log.warning("filter %s failed in round %d: %s", config.filter, round_index, exc)
                events.append(f"filter_failed:{type(exc).__name__}")
                verdict = FilterVerdict.from_mask(np.sort(labeled), np.zeros(labeled.size, dtype=bool))
            q_hat = verdict.predicted_noise_ratio
            if config.dropout and verdict.noisy.size:
                verdict, eta = noise_dropout(verdict, dropout_rng)
            clean, noisy = verdict.clean, verdict.noisy
            if config.weighted_mode:
                weight = 1.0 - verdict.predicted_noise_ratio
        else:
            events.append("warmup")
        request = StrategyRequest(clean, state.unlabeled, batch, labeled_noisy=noisy, noisy_weight=weight)
        selection = runner.select(request)
        events.extend(selection.events)
        state.add(round_index, annotate(annotator, selection.chosen))
        traces.append(RoundTrace(round_index, q_hat, eta, int(len(clean)), int(len(noisy)),
                                 selection.chosen, runner.delta, events))
        round_index += 1
    return NasResult(state, traces, filter_calls)


def run_plain(pool: EmbeddingPool, annotator: Annotator, state: LabelState, strategy: str,
              params: dict | None = None, seed: int = 0) -> NasResult:
    """Spend the remaining budget with the unmodified strategy in a single batch."""
    runner = StrategyRunner(strategy, pool, params, seed)
    if state.remaining == 0:
        return NasResult(state, [], 0)
    labeled = state.labeled_array()
    selection = runner.select(StrategyRequest(labeled, state.unlabeled, state.remaining))
    state.add(0, annotate(annotator, selection.chosen))
    trace = RoundTrace(0, None, None, int(labeled.size), 0, selection.chosen, runner.delta, selection.events)
    return NasResult(state, [trace], 0)


def complexity_estimate(config: NasConfig, budget: int, strategy_time: float, filter_time: float,
                        class_count: int | None = None) -> float:
    """Predicted run time ``T_S + ceil(B / b) * T_A``."""
    b = config.inner_batch if config.inner_batch is not None else config.batch_size(class_count or 1)
    if b < 1:
        raise ValidationError("inner batch must be >= 1")
    return strategy_time + math.ceil(budget / b) * filter_time
