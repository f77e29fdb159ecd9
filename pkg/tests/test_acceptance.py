"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line (collected again in
the terminal summary) and then asserts the same condition.
"""

import math
import time

import numpy as np
import pytest

from conftest import raw_pool
from noisyal.covergraph import CoverGraph, build_graph, coverage, delta_grid, max_degree_curve
from noisyal.datapool import (
    LabelState,
    SyntheticSpec,
    budget_for_spc,
    generate_synthetic,
    init_label_state,
    synthetic_test_pool,
)
from noisyal.evaluation import TrainPolicy, accuracy_delta_vs_random, evaluate, filter_metrics
from noisyal.filters import FILTERS, run_filter
from noisyal.harness import SMOKE_PRESET, run_experiment
from noisyal.nas import NasConfig, dropout_eta, run_nas, run_plain
from noisyal.noise_model import NoiseSpec, annotate, build_annotator
from noisyal.probe import loss_and_grad
from noisyal.strategies import StrategyRequest, coreset_select, prepare_graph, probcover_select
from oracles import dist_table, finite_diff, greedy_max_coverage_fast, k_center_greedy

DELTA = 0.7


def acceptance_pool(seed):
    return generate_synthetic(SyntheticSpec(class_count=10, points_per_class=200, dim=16, seed=seed))


def test_criterion_01_greedy_oracles(criterion):
    rng = np.random.default_rng(2024)
    elapsed = 0.0
    mismatches = []
    for inst in range(50):
        n = int(rng.integers(10, 201))
        d = int(rng.integers(1, 9))
        pts = rng.uniform(size=(n, d))
        pool = raw_pool(pts)
        dist = dist_table(pts)
        delta = float(np.quantile(dist[np.triu_indices(n, 1)], rng.uniform(0.02, 0.3)))
        labeled = [int(i) for i in rng.choice(n, size=int(rng.integers(0, 4)), replace=False)]
        batch = min(12, n - len(labeled))
        unl = np.setdiff1d(np.arange(n), labeled)

        start = time.perf_counter()
        req = StrategyRequest(labeled, unl, batch, params={"delta_update": False})
        graph = prepare_graph(build_graph(pool, delta), labeled)
        pc = probcover_select(req, graph, pool).chosen
        cs = coreset_select(StrategyRequest(labeled, unl, batch), pool).chosen
        elapsed += time.perf_counter() - start

        if pc != greedy_max_coverage_fast(dist, delta, batch, labeled):
            mismatches.append(("probcover", inst))
        if cs != k_center_greedy(dist, batch, labeled):
            mismatches.append(("coreset", inst))
    ok = not mismatches and elapsed < 10.0
    criterion(1, ok, f"50 instances, mismatches={mismatches}, selection time {elapsed:.2f}s")
    assert ok


def test_criterion_02_nas_reduction(criterion):
    failures = []
    for seed in range(20):
        pool = generate_synthetic(SyntheticSpec(class_count=10, points_per_class=20, dim=8, seed=seed))
        ann = build_annotator(pool, NoiseSpec("none"))
        budget = 120  # large enough to hit delta updates and exhaustion
        nas = run_nas(pool, ann, init_label_state(pool, budget), NasConfig("probcover", {"delta": DELTA}, "ideal"), seed)
        plain = run_plain(pool, ann, init_label_state(pool, budget), "probcover", {"delta": DELTA}, seed)
        if nas.state.labeled != plain.state.labeled:
            failures.append(seed)
    ok = not failures
    criterion(2, ok, f"20 seeds, pick-for-pick mismatches in seeds {failures}")
    assert ok


def test_criterion_03_coverage_dominance(criterion):
    start = time.perf_counter()
    geq = strict = 0
    for seed in range(20):
        pool = acceptance_pool(seed)
        ann = build_annotator(pool, NoiseSpec("symmetric", 0.5, seed=seed))
        npc = run_nas(pool, ann, init_label_state(pool, 200), NasConfig("probcover", {"delta": DELTA}, "ideal"), seed)
        pc = run_plain(pool, ann, init_label_state(pool, 200), "probcover", {"delta": DELTA}, seed)
        cov = []
        for res in (npc, pc):
            L = res.state.labeled_array()
            cov.append(coverage(pool, DELTA, L[~ann.corruption_mask[L]]).coverage_fraction)
        geq += cov[0] >= cov[1]
        strict += cov[0] > cov[1]
    elapsed = time.perf_counter() - start
    ok = geq == 20 and strict >= 15 and elapsed < 60
    criterion(3, ok, f"NPC >= ProbCover in {geq}/20, strictly in {strict}/20, {elapsed:.1f}s")
    assert ok


def test_criterion_04_lowbudget_aum(criterion):
    start = time.perf_counter()
    cells = []
    for q in (0.2, 0.5):
        for spc in (5, 10, 20):
            budget = budget_for_spc(spc, 10, q)
            qh, prec, rec = [], [], []
            for seed in range(5):
                pool = acceptance_pool(seed)
                ann = build_annotator(pool, NoiseSpec("symmetric", q, seed=seed))
                idx = np.random.default_rng(seed).choice(pool.n, size=budget, replace=False)
                state = LabelState(n=pool.n, budget=budget)
                state.add(0, annotate(ann, idx))
                v = run_filter("aum", pool, state, seed=seed)
                m = filter_metrics(v, ann)
                qh.append(v.predicted_noise_ratio)
                prec.append(m["precision"])
                rec.append(m["recall"])
            cells.append((q, spc, abs(np.mean(qh) - q), np.mean(prec), np.mean(rec)))
    elapsed = time.perf_counter() - start
    bad = [c for c in cells if not (c[2] <= 0.15 and c[3] >= 0.7 and c[4] >= 0.7)]
    ok = not bad and elapsed < 120
    detail = "; ".join(f"q={q} spc={s}: |dq|={e:.3f} P={p:.2f} R={r:.2f}" for q, s, e, p, r in cells)
    criterion(4, ok, f"{elapsed:.1f}s; {detail}")
    assert ok


def test_criterion_05_dropout_formula(criterion):
    cases = {0.5: 50, 0.95: 10, 0.05: 10, 0.3: 30}
    got = {q: dropout_eta(q) for q in cases}
    ok = all(math.isclose(got[q], eta, abs_tol=1e-9) for q, eta in cases.items())
    criterion(5, ok, f"eta values {got}")
    assert ok


def test_criterion_06_accuracy_trend(criterion):
    start = time.perf_counter()
    q = 0.5
    seeds = range(5)
    lines, ok = [], True
    for spc in (2, 5, 10):
        budget = budget_for_spc(spc, 10, q)
        acc = {"random": {}, "probcover": {}, "npc": {}}
        for seed in seeds:
            spec = SyntheticSpec(class_count=10, points_per_class=200, dim=16, seed=seed)
            pool, test = generate_synthetic(spec), synthetic_test_pool(spec)
            ann = build_annotator(pool, NoiseSpec("symmetric", q, seed=seed))
            for name in acc:
                state = init_label_state(pool, budget)
                if name == "npc":
                    run_nas(pool, ann, state, NasConfig("probcover", {"delta": DELTA}, "aum"), seed)
                else:
                    run_plain(pool, ann, state, name, {"delta": DELTA}, seed)
                res = evaluate(pool, state, test, TrainPolicy("filter_then_train"), filter_name="aum",
                               annotator=ann, seed=seed)
                acc[name][seed] = res.test_accuracy
        npc = accuracy_delta_vs_random(acc["npc"], acc["random"])
        pc = accuracy_delta_vs_random(acc["probcover"], acc["random"])
        if spc == 2:
            cell_ok = npc.mean >= pc.mean - pc.standard_error
        else:
            cell_ok = npc.mean >= pc.mean and npc.mean > 0 and pc.mean > 0
        ok &= cell_ok
        lines.append(f"spc={spc}: npc {npc.mean:+.4f}±{npc.standard_error:.4f} "
                     f"probcover {pc.mean:+.4f}±{pc.standard_error:.4f}{'' if cell_ok else ' <-'}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 300
    criterion(6, ok, f"{elapsed:.1f}s; " + "; ".join(lines))
    assert ok


def test_criterion_07_delta_curve_interior(criterion):
    interior = picked_interior = 0
    positions = []
    grid = delta_grid(DELTA)
    for seed in range(20):
        pool = acceptance_pool(seed)
        graph = build_graph(pool, DELTA)
        picks = probcover_select(StrategyRequest([], np.arange(pool.n), 200, params={"delta_update": False}),
                                 graph, pool).chosen
        covered = np.zeros(pool.n, dtype=bool)
        labeled = []
        for p in picks:
            labeled.append(p)
            covered |= pool.distances[p] <= DELTA
            if covered.mean() >= 0.5:
                break
        curve = max_degree_curve(pool, labeled, grid)
        argmax = np.flatnonzero(curve == curve.max())
        # the curve has an interior argmax when any maximizing radius is interior
        interior += bool(np.any((argmax > 0) & (argmax < grid.size - 1)))
        picked = int(argmax.max())  # what update_delta returns (ties -> larger radius)
        positions.append(picked)
        picked_interior += 0 < picked < grid.size - 1
    ok = interior >= 18
    criterion(7, ok, f"interior argmax in {interior}/20 seeds; update_delta's tie-broken pick interior in "
                     f"{picked_interior}/20 (positions {positions})")
    assert ok


def test_criterion_08_gradient_check(criterion):
    worst = 0.0
    rng = np.random.default_rng(8)
    for _ in range(5):
        n, d, C = int(rng.integers(2, 12)), int(rng.integers(1, 6)), int(rng.integers(2, 6))
        x, y = rng.normal(size=(n, d)), rng.integers(0, C, size=n)
        W, b = rng.normal(size=(C, d)), rng.normal(size=C)
        _, gW, gb = loss_and_grad(W, b, x, y, 3e-4)
        fW = finite_diff(lambda: loss_and_grad(W, b, x, y, 3e-4)[0], W)
        fb = finite_diff(lambda: loss_and_grad(W, b, x, y, 3e-4)[0], b)
        worst = max(worst, np.abs(gW - fW).max(), np.abs(gb - fb).max())
    ok = worst < 1e-4
    criterion(8, ok, f"max abs gradient error {worst:.2e}")
    assert ok


def _dense_replay(adj, ops):
    W = adj.astype(float)
    for kind, arg, w in ops:
        if kind == "reset":
            W = adj.astype(float)
        elif kind == "incoming":
            targets = adj[arg].any(axis=0) if arg else np.zeros(len(adj), dtype=bool)
            W[:, targets] = np.where(adj[:, targets], w, 0.0)
        else:
            W[arg, :] = 0.0
    return W.sum(axis=1)


def test_criterion_09_invariant_fuzz(criterion):
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 101))
        pts = rng.uniform(size=(n, 2))
        dist = dist_table(pts) if n <= 30 else raw_pool(pts).distances
        delta = float(rng.uniform(0.02, 0.5))
        g = CoverGraph(dist, delta)
        adj = dist <= delta
        ops = []
        for _ in range(int(rng.integers(1, 10))):
            kind = rng.choice(["incoming", "outgoing", "reset"])
            arg = [int(i) for i in rng.choice(n, size=int(rng.integers(0, 4)))]
            w = float(rng.choice([0.0, 0.3, 0.6, 1.0]))
            if kind == "incoming":
                g.set_incoming_weight(arg, w)
            elif kind == "outgoing":
                g.zero_outgoing(arg)
            else:
                g.reset_weights()
            ops.append((kind, arg, w))
            worst = max(worst, float(np.abs(g.odr - g.recompute_odr()).max()))
        worst = max(worst, float(np.abs(g.odr - _dense_replay(adj, ops)).max()))

    partition_ok = True
    idempotent = True
    for seed in range(len(FILTERS) * 3):
        name = FILTERS[seed % len(FILTERS)]
        pool = generate_synthetic(SyntheticSpec(class_count=5, points_per_class=30, dim=6, seed=seed))
        ann = build_annotator(pool, NoiseSpec("symmetric", 0.3, seed=seed))
        idx = np.random.default_rng(seed).choice(pool.n, size=40, replace=False)
        first = annotate(ann, idx)
        idempotent &= first == annotate(ann, idx[::-1])
        state = LabelState(n=pool.n, budget=40)
        state.add(0, first)
        params = {"known_rate": 0.3} if name == "aum_known_rate" else {}
        v = run_filter(name, pool, state, params, ann, seed)
        partition_ok &= sorted(v.clean.tolist() + v.noisy.tolist()) == sorted(idx.tolist())
        partition_ok &= not set(v.clean.tolist()) & set(v.noisy.tolist())
    ok = worst <= 1e-9 and partition_ok and idempotent
    criterion(9, ok, f"1000 sequences, max odr error {worst:.1e}; verdict partitions {partition_ok}; "
                     f"idempotent annotation {idempotent}")
    assert ok


def test_criterion_10_determinism(criterion, tmp_path):
    run_experiment(SMOKE_PRESET, tmp_path / "a", echo=False)
    run_experiment(SMOKE_PRESET, tmp_path / "b", echo=False)
    a = (tmp_path / "a" / "results.csv").read_bytes()
    b = (tmp_path / "b" / "results.csv").read_bytes()
    ok = a == b and len(a.splitlines()) == 10
    criterion(10, ok, f"smoke preset CSV byte-identical: {a == b} ({len(a)} bytes)")
    assert ok


def test_criterion_11_complexity_accounting(criterion):
    pool = generate_synthetic(SyntheticSpec(class_count=10, points_per_class=100, dim=16, seed=11))
    ann = build_annotator(pool, NoiseSpec("symmetric", 0.3, seed=11))
    budget = 60
    rows = []
    for b in (1, 10, budget):
        start = time.perf_counter()
        res = run_nas(pool, ann, init_label_state(pool, budget),
                      NasConfig("probcover", {"delta": DELTA}, "aum", inner_batch=b), 0)
        rows.append((b, res.filter_calls, time.perf_counter() - start))
    counts_ok = all(calls == math.ceil(budget / b) for b, calls, _ in rows)
    times = [t for _, _, t in rows]
    order_ok = times[0] > times[1] > times[2]
    ok = counts_ok and order_ok
    criterion(11, ok, "; ".join(f"b={b}: calls={c} time={t:.2f}s" for b, c, t in rows))
    assert ok
