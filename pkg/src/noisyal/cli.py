"""Command-line entry point: ``noisyal <subcommand> ...``.

Every subcommand takes ``--seed``, ``--out`` and ``--config``; the config is a
JSON object whose keys are option names (dashes or underscores) and serve as
defaults that explicit flags override. For ``run-experiment`` the config is
the experiment document itself.

Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from noisyal import __version__
from noisyal.datapool import (
    EmbeddingPool,
    SyntheticSpec,
    generate_synthetic,
    init_label_state,
    l2_normalize,
    load_embeddings,
    read_alne,
    read_labels,
    save_embeddings,
    synthetic_test_pool,
)
from noisyal.errors import NoisyALError, ValidationError
from noisyal.evaluation import POLICIES, TrainPolicy, evaluate
from noisyal.filters import FILTERS, run_filter
from noisyal.harness import PRESETS, attach_random_deltas, run_experiment, write_rows_csv
from noisyal.nas import NasConfig, run_nas, run_plain
from noisyal.noise_model import NOISE_KINDS, Annotator, NoiseSpec, build_annotator, confusion_transition
from noisyal.strategies import STRATEGIES

log = logging.getLogger("noisyal")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _json_arg(text: str) -> dict:
    try:
        value = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"not valid JSON: {text!r} ({exc})") from None
    if not isinstance(value, dict):
        raise ValidationError(f"expected a JSON object, got {text!r}")
    return value


def _read_indices(path: str) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8").split()
    try:
        return np.array([int(t) for t in text], dtype=np.int64)
    except ValueError:
        raise ValidationError(f"{path}: expected one integer index per line") from None


def _load_pool(args) -> EmbeddingPool:
    return load_embeddings(args.features, args.labels, args.classes)


def _load_annotator(args, pool: EmbeddingPool) -> Annotator:
    if not args.noisy_labels:
        return Annotator.from_labels(pool.true_labels, pool.true_labels)
    noisy = read_labels(args.noisy_labels)
    if noisy.size != pool.n:
        raise ValidationError(f"{args.noisy_labels} has {noisy.size} labels for a pool of {pool.n}")
    return Annotator.from_labels(pool.true_labels, noisy)


def _state_from(pool: EmbeddingPool, annotator: Annotator, indices: np.ndarray):
    state = init_label_state(pool, max(1, indices.size))
    state.add(0, {int(i): int(annotator.noisy_labels[i]) for i in indices})
    return state


def cmd_gen_synth(args) -> int:
    spec = SyntheticSpec(args.classes, args.points_per_class, args.dim, args.cluster_spread,
                         args.center_spread, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_embeddings(generate_synthetic(spec), out / "features.alne", out / "labels.txt")
    save_embeddings(synthetic_test_pool(spec, args.test_fraction), out / "test_features.alne",
                    out / "test_labels.txt")
    print(f"wrote {out}/features.alne, labels.txt, test_features.alne, test_labels.txt")
    return EXIT_OK


def cmd_inject_noise(args) -> int:
    pool = _load_pool(args)
    transition = None
    if args.kind == "asymmetric":
        if args.transition:
            transition = np.asarray(json.loads(Path(args.transition).read_text(encoding="utf-8")), dtype=float)
        else:
            transition = confusion_transition(pool, target_rate=args.rate, seed=args.seed)
    spec = NoiseSpec(args.kind, args.rate, transition, args.cluster_fraction, args.anchors, args.seed)
    annotator = build_annotator(pool, spec)
    annotator.save(args.out)
    print(f"wrote {args.out}: {int(annotator.corruption_mask.sum())} of {pool.n} labels corrupted")
    return EXIT_OK


def cmd_select(args) -> int:
    pool = _load_pool(args)
    annotator = _load_annotator(args, pool)
    params = dict(args.params or {})
    if args.delta is not None:
        params["delta"] = args.delta
    state = init_label_state(pool, args.budget)
    if args.nas:
        config = NasConfig(args.strategy, params, args.filter, args.filter_params or {}, args.inner_batch,
                           None if args.dropout is None else args.dropout == "on", args.weighted, args.warmup)
        result = run_nas(pool, annotator, state, config, args.seed)
    else:
        result = run_plain(pool, annotator, state, args.strategy, params, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "picks.txt").write_text("".join(f"{i}\n" for i in state.labeled), encoding="utf-8")
    result.save_traces(out / "traces.jsonl")
    print(f"selected {len(state.labeled)} samples in {len(result.traces)} round(s); "
          f"{result.filter_calls} filter call(s)")
    return EXIT_OK


def cmd_filter(args) -> int:
    pool = _load_pool(args)
    annotator = _load_annotator(args, pool)
    state = _state_from(pool, annotator, _read_indices(args.indices))
    verdict = run_filter(args.name, pool, state, args.params, annotator, args.seed)
    verdict.save(args.out, state.observed)
    print(f"{verdict.noisy.size} of {len(state.labeled)} flagged noisy (q_hat={verdict.predicted_noise_ratio:.4f})")
    return EXIT_OK


def cmd_eval(args) -> int:
    pool = _load_pool(args)
    annotator = _load_annotator(args, pool)
    state = _state_from(pool, annotator, _read_indices(args.indices))
    test_feats = read_alne(args.test_features)
    test = EmbeddingPool(l2_normalize(test_feats), read_labels(args.test_labels), pool.class_count)
    res = evaluate(pool, state, test, TrainPolicy(args.policy, args.p), filter_name=args.filter,
                   filter_params=args.filter_params, annotator=annotator, seed=args.seed)
    noise_rate = float(annotator.corruption_mask.mean())
    row = {"strategy": args.strategy_label, "filter": args.filter or "", "noise_kind": args.noise_kind,
           "noise_rate": noise_rate, "budget": len(state.labeled), "seed": args.seed, "policy": args.policy,
           "test_acc": res.test_accuracy, "delta_vs_random": None, "precision": res.precision,
           "recall": res.recall, "q_hat": res.predicted_ratio, "n_train_used": res.n_train_used, "wall_ms": 0}
    attach_random_deltas([row])
    write_rows_csv(args.out, [row])
    print(f"test accuracy {res.test_accuracy:.4f} trained on {res.n_train_used} samples")
    return EXIT_OK


def cmd_run_experiment(args) -> int:
    if args.preset:
        config = json.loads(json.dumps(PRESETS[args.preset]))
    elif args.config:
        config = json.loads(Path(args.config).read_text(encoding="utf-8"))
    else:
        raise ValidationError("run-experiment needs --config or --preset")
    if args.seed is not None:
        config["seeds"] = [args.seed]
    run_experiment(config, output_dir=args.out, workers=args.workers)
    return EXIT_OK


def cmd_version(args) -> int:
    print(f"noisyal {__version__}")
    return EXIT_OK


def _pool_args(p):
    p.add_argument("--features", help="ALNE feature file")
    p.add_argument("--labels", help="ground-truth labels, one per line")
    p.add_argument("--classes", type=int, default=None, help="class count (default: max label + 1)")


def _common(p, seed_default=0):
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--out")
    p.add_argument("--config", help="JSON file of option defaults")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="noisyal", description="Noise-aware active sampling toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synth", help="write a synthetic Gaussian-mixture pool and its test split")
    _common(p)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--points-per-class", type=int, default=200)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--cluster-spread", type=float, default=1.0)
    p.add_argument("--center-spread", type=float, default=1.0)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("inject-noise", help="write simulated annotator labels")
    _common(p)
    _pool_args(p)
    p.add_argument("--kind", choices=NOISE_KINDS, default="symmetric")
    p.add_argument("--rate", type=float, default=0.0)
    p.add_argument("--transition", help="JSON file with a CxC matrix (asymmetric; default: probe confusion)")
    p.add_argument("--cluster-fraction", type=float, default=None)
    p.add_argument("--anchors", type=int, default=None)
    p.set_defaults(func=cmd_inject_noise)

    p = sub.add_parser("select", help="run a strategy (optionally noise-aware) up to a budget")
    _common(p)
    _pool_args(p)
    p.add_argument("--noisy-labels", help="annotator labels (default: ground truth)")
    p.add_argument("--strategy", choices=STRATEGIES, default="probcover")
    p.add_argument("--params", type=_json_arg, default=None, help="strategy parameters as JSON")
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--budget", type=int, required=False)
    p.add_argument("--nas", action="store_true", help="wrap the strategy in noise-aware sampling")
    p.add_argument("--filter", choices=FILTERS, default="aum")
    p.add_argument("--filter-params", type=_json_arg, default=None)
    p.add_argument("--inner-batch", type=int, default=None)
    p.add_argument("--dropout", choices=("on", "off"), default=None)
    p.add_argument("--weighted", action="store_true")
    p.add_argument("--warmup", type=int, default=0)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("filter", help="run one noise filter on a labeled subset")
    _common(p)
    _pool_args(p)
    p.add_argument("--noisy-labels", help="annotator labels (default: ground truth)")
    p.add_argument("--indices", required=False, help="labeled indices, one per line")
    p.add_argument("--name", choices=FILTERS, default="aum")
    p.add_argument("--params", type=_json_arg, default=None)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("eval", help="train a probe per policy and emit one CSV row")
    _common(p)
    _pool_args(p)
    p.add_argument("--noisy-labels", help="annotator labels (default: ground truth)")
    p.add_argument("--indices", required=False, help="labeled indices, one per line")
    p.add_argument("--test-features", required=False)
    p.add_argument("--test-labels", required=False)
    p.add_argument("--policy", choices=POLICIES, default="filter_then_train")
    p.add_argument("--p", type=float, default=None)
    p.add_argument("--filter", choices=FILTERS, default="aum")
    p.add_argument("--filter-params", type=_json_arg, default=None)
    p.add_argument("--strategy-label", default="-")
    p.add_argument("--noise-kind", default="unknown")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run-experiment", help="run a configured grid and write results.csv")
    _common(p, seed_default=None)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_run_experiment)

    p = sub.add_parser("version", help="print the package version")
    _common(p, seed_default=None)
    p.set_defaults(func=cmd_version)
    return parser


_POOL = ("features", "labels")
# checked after --config defaults are merged, so a config file may supply them
_REQUIRED_AFTER_CONFIG = {
    "gen-synth": ("out",),
    "inject-noise": _POOL + ("out",),
    "select": _POOL + ("budget", "out"),
    "filter": _POOL + ("indices", "out"),
    "eval": _POOL + ("indices", "test_features", "test_labels", "out"),
}


def _apply_config(parser, args, argv):
    """Reparse with defaults taken from ``--config`` so explicit flags still win."""
    if not args.config or args.command == "run-experiment":
        return args
    try:
        defaults = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{args.config}: not valid JSON ({exc})") from None
    if not isinstance(defaults, dict):
        raise ValidationError(f"{args.config}: expected a JSON object")
    defaults = {k.replace("-", "_"): v for k, v in defaults.items()}
    unknown = set(defaults) - set(vars(args))
    if unknown:
        raise ValidationError(f"{args.config}: unknown option(s) {sorted(unknown)}")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    subparser.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config(parser, args, argv)
        for name in _REQUIRED_AFTER_CONFIG.get(args.command, ()):
            if getattr(args, name) is None:
                raise ValidationError(f"{args.command}: --{name.replace('_', '-')} is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (NoisyALError, ValueError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # anything else is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
