"""Configuration-driven experiment grid: selection, filtering, evaluation and the results CSV."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import jsonschema
import numpy as np

from noisyal import __version__
from noisyal.datapool import (
    EmbeddingPool,
    SyntheticSpec,
    budget_for_spc,
    generate_synthetic,
    init_label_state,
    l2_normalize,
    load_embeddings,
    read_alne,
    read_labels,
    synthetic_test_pool,
)
from noisyal.errors import ValidationError
from noisyal.evaluation import POLICIES, TrainPolicy, evaluate
from noisyal.filters import FILTERS
from noisyal.nas import NasConfig, run_nas, run_plain
from noisyal.noise_model import NOISE_KINDS, NoiseSpec, build_annotator, confusion_transition
from noisyal.probe import LinearProbeConfig
from noisyal.strategies import STRATEGIES

log = logging.getLogger(__name__)

CSV_HEADER = ("strategy", "filter", "noise_kind", "noise_rate", "budget", "seed", "policy", "test_acc",
              "delta_vs_random", "precision", "recall", "q_hat", "n_train_used", "wall_ms")
COMPLETE_MARKER = "COMPLETE"
# fields that do not change results and are left out of the config hash
UNHASHED = ("output_dir", "workers")

_object = {"type": "object"}
CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "noisyal experiment config",
    "type": "object",
    "additionalProperties": False,
    "required": ["data", "budgets", "strategies", "seeds"],
    "properties": {
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "synthetic": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "class_count": {"type": "integer", "minimum": 2},
                        "points_per_class": {"type": "integer", "minimum": 1},
                        "dim": {"type": "integer", "minimum": 1},
                        "cluster_spread": {"type": "number", "exclusiveMinimum": 0},
                        "center_spread": {"type": "number", "exclusiveMinimum": 0},
                        "seed": {"type": ["integer", "null"], "minimum": 0},
                        "test_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                    },
                },
                "files": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["features", "labels", "test_features", "test_labels"],
                    "properties": {
                        "features": {"type": "string"},
                        "labels": {"type": "string"},
                        "test_features": {"type": "string"},
                        "test_labels": {"type": "string"},
                        "class_count": {"type": "integer", "minimum": 2},
                    },
                },
            },
            "oneOf": [{"required": ["synthetic"]}, {"required": ["files"]}],
        },
        "noise": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["kind"],
                "properties": {
                    "kind": {"enum": list(NOISE_KINDS)},
                    "rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                    "transition": {
                        "oneOf": [
                            {"const": "confusion"},
                            {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
                        ]
                    },
                    "cluster_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                    "n_anchors": {"type": "integer", "minimum": 1},
                },
            },
        },
        "budgets": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "spc": {"type": "array", "minItems": 1, "items": {"type": "number", "exclusiveMinimum": 0}},
                "raw": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
            },
            "oneOf": [{"required": ["spc"]}, {"required": ["raw"]}],
        },
        "strategies": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["label", "name"],
                "properties": {
                    "label": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
                    "name": {"enum": list(STRATEGIES)},
                    "params": _object,
                    "nas": {
                        "type": "object",
                        "additionalProperties": False,
                        "properties": {
                            "filter": {"enum": list(FILTERS)},
                            "filter_params": _object,
                            "inner_batch": {"type": "integer", "minimum": 1},
                            "use_noise_dropout": {"type": "boolean"},
                            "weighted_mode": {"type": "boolean"},
                            "warmup_budget": {"type": "integer", "minimum": 0},
                        },
                    },
                },
            },
        },
        "filters": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["name"],
                "properties": {"name": {"enum": list(FILTERS)}, "params": _object},
            },
        },
        "policies": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["mode"],
                "properties": {
                    "mode": {"enum": list(POLICIES)},
                    "p": {"type": ["number", "null"], "exclusiveMinimum": 0, "maximum": 1},
                },
            },
        },
        "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "probe": _object,
        "record_wall_ms": {"type": "boolean"},
        "output_dir": {"type": "string"},
        "workers": {"type": "integer", "minimum": 1},
    },
}

SMOKE_PRESET = {
    "data": {"synthetic": {"class_count": 10, "points_per_class": 200, "dim": 16}},
    "noise": [{"kind": "symmetric", "rate": 0.3}],
    "budgets": {"spc": [5]},
    "strategies": [
        {"label": "random", "name": "random"},
        {"label": "probcover", "name": "probcover", "params": {"delta": 0.7}},
        {"label": "npc", "name": "probcover", "params": {"delta": 0.7}, "nas": {}},
    ],
    "filters": [{"name": "aum"}],
    "policies": [{"mode": "filter_then_train"}],
    "seeds": [0, 1, 2],
}

PRESETS = {"smoke": SMOKE_PRESET}


def _field_path(error: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in error.absolute_path]
    return ".".join(parts) if parts else "<root>"


def normalize_config(raw: dict) -> dict:
    """Validate ``raw`` and return a copy with every default filled in.

    Raises ValidationError naming the offending field.
    """
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    error = jsonschema.exceptions.best_match(validator.iter_errors(raw))
    if error is not None:
        raise ValidationError(f"config field {_field_path(error)}: {error.message}")
    cfg = copy.deepcopy(raw)
    if "synthetic" in cfg["data"]:
        syn = {"class_count": 10, "points_per_class": 200, "dim": 16, "cluster_spread": 1.0,
               "center_spread": 1.0, "seed": None, "test_fraction": 0.2}
        syn.update(cfg["data"]["synthetic"])
        cfg["data"] = {"synthetic": syn}
    cfg.setdefault("noise", [{"kind": "none"}])
    for noise in cfg["noise"]:
        noise.setdefault("rate", 0.0)
        if noise["kind"] == "asymmetric" and "transition" not in noise:
            raise ValidationError("config field noise: asymmetric noise needs a 'transition' (matrix or \"confusion\")")
    for s in cfg["strategies"]:
        s.setdefault("params", {})
        if s["name"] == "probcover" and "delta" not in s["params"]:
            raise ValidationError(f"config field strategies.{s['label']}.params: probcover needs 'delta'")
    labels = [s["label"] for s in cfg["strategies"]]
    if len(set(labels)) != len(labels):
        raise ValidationError("config field strategies: labels must be unique")
    cfg.setdefault("filters", [{"name": "aum"}])
    for f in cfg["filters"]:
        f.setdefault("params", {})
    cfg.setdefault("policies", [{"mode": "filter_then_train"}])
    for p in cfg["policies"]:
        p.setdefault("p", None)
    if len(set(cfg["seeds"])) != len(cfg["seeds"]):
        raise ValidationError("config field seeds: duplicates are not allowed")
    cfg.setdefault("probe", {})
    try:
        LinearProbeConfig().with_(**cfg["probe"])
    except TypeError as exc:
        raise ValidationError(f"config field probe: {exc}") from None
    cfg.setdefault("record_wall_ms", False)
    cfg.setdefault("output_dir", "results")
    cfg.setdefault("workers", 1)
    return cfg


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON of a normalized config, minus run-location fields."""
    norm = normalize_config(cfg)
    body = {k: v for k, v in norm.items() if k not in UNHASHED}
    text = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_config(path: str | Path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    return normalize_config(raw)


@lru_cache(maxsize=8)
def _pools(data_json: str, seed: int) -> tuple[EmbeddingPool, EmbeddingPool]:
    data = json.loads(data_json)
    if "synthetic" in data:
        syn = dict(data["synthetic"])
        fraction = syn.pop("test_fraction")
        # without a fixed data seed every run seed draws its own pool
        syn["seed"] = seed if syn["seed"] is None else syn["seed"]
        spec = SyntheticSpec(**syn)
        return generate_synthetic(spec), synthetic_test_pool(spec, fraction)
    files = data["files"]
    pool = load_embeddings(files["features"], files["labels"], files.get("class_count"))
    test_feats = read_alne(files["test_features"])
    test_labels = read_labels(files["test_labels"])
    test = EmbeddingPool(l2_normalize(test_feats), test_labels, pool.class_count)
    if test.dim != pool.dim:
        raise ValidationError(f"test features have D={test.dim}, pool has D={pool.dim}")
    return pool, test


def pools_for(cfg: dict, seed: int) -> tuple[EmbeddingPool, EmbeddingPool]:
    return _pools(json.dumps(cfg["data"], sort_keys=True), seed)


def noise_spec_for(noise: dict, pool: EmbeddingPool, seed: int) -> NoiseSpec:
    transition = noise.get("transition")
    if isinstance(transition, str):
        transition = confusion_transition(pool, target_rate=noise["rate"], seed=seed)
    elif transition is not None:
        transition = np.asarray(transition, dtype=float)
    return NoiseSpec(noise["kind"], noise["rate"], transition, noise.get("cluster_fraction"),
                     noise.get("n_anchors"), seed)


def budgets_for(cfg: dict, noise: dict, class_count: int) -> list[int]:
    if "raw" in cfg["budgets"]:
        return list(cfg["budgets"]["raw"])
    return [budget_for_spc(spc, class_count, noise["rate"]) for spc in cfg["budgets"]["spc"]]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return f"{value:.6f}"
    return str(value)


def row_sort_key(row: dict) -> tuple:
    return (row["strategy"], row["filter"], row["noise_kind"], float(row["noise_rate"]), int(row["budget"]),
            int(row["seed"]), row["policy"])


def write_rows_csv(path: str | Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
    writer.writeheader()
    for row in sorted(rows, key=row_sort_key):
        writer.writerow({k: _fmt(row[k]) for k in CSV_HEADER})
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _trace_name(strategy: str, noise: dict, budget: int, seed: int, filter_name: str) -> str:
    return f"{strategy}__{noise['kind']}_{noise['rate']:g}__B{budget}__{filter_name}__s{seed}.jsonl"


def run_task(cfg: dict, strategy: dict, seed: int, trace_dir: str | None) -> tuple[list[dict], list[str]]:
    """Every grid cell belonging to one (strategy, seed) pair."""
    pool, test = pools_for(cfg, seed)
    probe_config = LinearProbeConfig().with_(**cfg["probe"])
    rows, traces = [], []
    for noise in cfg["noise"]:
        annotator = build_annotator(pool, noise_spec_for(noise, pool, seed))
        for budget in budgets_for(cfg, noise, pool.class_count):
            if budget > pool.n:
                raise ValidationError(f"budget {budget} exceeds pool size {pool.n}")
            selections = {}
            for filt in cfg["filters"]:
                # plain strategies ignore the filter, so their selection is shared across filters
                nas = strategy.get("nas")
                key = filt["name"] if nas is not None and "filter" not in nas else "-"
                if key not in selections:
                    start = time.perf_counter()
                    state = init_label_state(pool, budget)
                    if nas is None:
                        result = run_plain(pool, annotator, state, strategy["name"], strategy["params"], seed)
                    else:
                        nas_cfg = dict(nas)
                        nas_cfg.setdefault("filter", filt["name"])
                        nas_cfg.setdefault("filter_params", filt["params"] if nas_cfg["filter"] == filt["name"] else {})
                        result = run_nas(pool, annotator, state,
                                         NasConfig(strategy["name"], strategy["params"], **nas_cfg), seed)
                    select_ms = 1000.0 * (time.perf_counter() - start)
                    if trace_dir is not None:
                        path = Path(trace_dir) / _trace_name(strategy["label"], noise, budget, seed, key)
                        result.save_traces(path)
                        traces.append(str(path))
                    selections[key] = (state, select_ms)
                state, select_ms = selections[key]
                for pol in cfg["policies"]:
                    start = time.perf_counter()
                    res = evaluate(pool, state, test, TrainPolicy(pol["mode"], pol["p"]), probe_config,
                                   filt["name"], filt["params"], annotator, seed)
                    eval_ms = 1000.0 * (time.perf_counter() - start)
                    labeled = state.labeled_array()
                    clean = int((~annotator.corruption_mask[labeled]).sum())
                    rows.append({
                        "strategy": strategy["label"], "filter": filt["name"], "noise_kind": noise["kind"],
                        "noise_rate": float(noise["rate"]), "budget": int(budget), "seed": int(seed),
                        "policy": pol["mode"], "test_acc": res.test_accuracy, "delta_vs_random": None,
                        "precision": res.precision, "recall": res.recall, "q_hat": res.predicted_ratio,
                        "n_train_used": res.n_train_used,
                        "wall_ms": select_ms + eval_ms, "empirical_spc": clean / pool.class_count,
                        "flags": list(res.flags),
                    })
    return rows, traces


def attach_random_deltas(rows: list[dict], random_label: str = "random") -> None:
    """Fill delta_vs_random from the random row sharing filter, noise, budget, seed and policy."""
    def key(r):
        return (r["filter"], r["noise_kind"], r["noise_rate"], r["budget"], r["seed"], r["policy"])

    base = {key(r): r["test_acc"] for r in rows if r["strategy"] == random_label}
    for r in rows:
        ref = base.get(key(r))
        r["delta_vs_random"] = None if ref is None else r["test_acc"] - ref


@dataclass
class RunRecord:
    config_hash: str
    rows: list[dict]
    trace_paths: list[str]
    version: str = __version__
    timings: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"config_hash": self.config_hash, "version": self.version,
                           "trace_paths": self.trace_paths, "rows": self.rows}, indent=2, sort_keys=True)


def summary_table(rows: list[dict]) -> str:
    """Mean test accuracy and delta per (strategy, filter, noise, budget, policy) with SE over seeds."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["strategy"], r["filter"], r["noise_kind"], r["noise_rate"], r["budget"], r["policy"]),
                          []).append(r)
    lines = [f"{'strategy':<12} {'filter':<16} {'noise':<20} {'budget':>6} {'policy':<18} "
             f"{'acc':>7} {'delta':>8} {'se':>7} {'spc':>6} seeds"]
    for k in sorted(groups, key=lambda k: (k[0], k[1], k[2], k[3], k[4], k[5])):
        g = groups[k]
        acc = float(np.mean([r["test_acc"] for r in g]))
        deltas = [r["delta_vs_random"] for r in g if r["delta_vs_random"] is not None]
        if deltas:
            d = f"{np.mean(deltas):+8.4f}"
            se = f"{np.std(deltas, ddof=1) / math.sqrt(len(deltas)):7.4f}" if len(deltas) > 1 else f"{0.0:7.4f}"
        else:
            d, se = f"{'-':>8}", f"{'-':>7}"
        spc = float(np.mean([r["empirical_spc"] for r in g]))
        lines.append(f"{k[0]:<12} {k[1]:<16} {k[2] + ':' + format(k[3], 'g'):<20} {k[4]:>6} {k[5]:<18} "
                     f"{acc:7.4f} {d} {se} {spc:6.2f} {len(g)}")
    return "\n".join(lines)


def run_experiment(config: dict | str | Path, output_dir: str | Path | None = None,
                   workers: int | None = None, echo: bool = True) -> RunRecord:
    """Execute the whole grid and write results.csv, traces, run_record.json and the completion marker.

    Rows are rewritten (sorted) after every finished task, so a failed run
    leaves a partial CSV behind without the marker.
    """
    cfg = load_config(config) if isinstance(config, (str, Path)) else normalize_config(config)
    if output_dir is not None:
        cfg["output_dir"] = str(output_dir)
    if workers is not None:
        cfg["workers"] = int(workers)
    out = Path(cfg["output_dir"])
    trace_dir = out / "traces"
    trace_dir.mkdir(parents=True, exist_ok=True)
    marker = out / COMPLETE_MARKER
    if marker.exists():
        marker.unlink()
    digest = config_hash(cfg)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    tasks = [(s, seed) for s in cfg["strategies"] for seed in cfg["seeds"]]
    rows: list[dict] = []
    traces: list[str] = []

    def collect(task_rows, task_traces):
        rows.extend(task_rows)
        traces.extend(task_traces)
        attach_random_deltas(rows)
        _write_results(out, rows, cfg["record_wall_ms"])

    if cfg["workers"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["workers"]) as ex:
            futures = [ex.submit(run_task, cfg, s, seed, str(trace_dir)) for s, seed in tasks]
            for fut in as_completed(futures):
                collect(*fut.result())
    else:
        for s, seed in tasks:
            collect(*run_task(cfg, s, seed, str(trace_dir)))

    rows.sort(key=row_sort_key)
    traces.sort()
    record = RunRecord(digest, [_public_row(r, cfg["record_wall_ms"]) for r in rows], traces)
    (out / "run_record.json").write_text(record.to_json() + "\n", encoding="utf-8")
    marker.write_text(digest + "\n", encoding="utf-8")
    if echo:
        print(summary_table(rows))
    return record


def _public_row(row: dict, record_wall_ms: bool) -> dict:
    out = {k: row[k] for k in CSV_HEADER}
    out["empirical_spc"] = row["empirical_spc"]
    out["flags"] = row["flags"]
    if not record_wall_ms:
        out["wall_ms"] = 0
    return out


def _write_results(out: Path, rows: list[dict], record_wall_ms: bool) -> None:
    # wall time is not reproducible, so the main CSV carries it only on request
    write_rows_csv(out / "results.csv", [_public_row(r, record_wall_ms) for r in rows])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["strategy", "filter", "noise_kind", "noise_rate", "budget", "seed", "policy", "wall_ms"])
    for r in sorted(rows, key=row_sort_key):
        writer.writerow([r["strategy"], r["filter"], r["noise_kind"], _fmt(r["noise_rate"]), r["budget"],
                         r["seed"], r["policy"], f"{r['wall_ms']:.3f}"])
    (out / "timings.csv").write_text(buf.getvalue(), encoding="utf-8")
