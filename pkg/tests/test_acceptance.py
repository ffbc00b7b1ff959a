"""Acceptance gate: the ten headline criteria at their stated tolerances.

Each test records one PASS/FAIL line; the lines are printed together at the
end of the pytest run (see ``conftest.pytest_terminal_summary``) and also
when this file is run directly with ``python tests/test_acceptance.py``.
"""
import filecmp
import math
import os
import random
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mstdp import nn
from mstdp.cli import main as cli_main
from mstdp.epidemic import SeirParams, build_transition_matrices, ensemble_mae, run_simulation, seir_step
from mstdp.graph import build_graph
from mstdp.metrics import FlowMatrix, cpc, deviation_distance, jsd, r_squared, seven_day_curves, accuracy
from mstdp.model import MSTDP, ModelConfig, collate, make_sample, predict_iterative
from mstdp.motifs import canonical_form, daily_graph
from mstdp.nn import layers
from mstdp.synth import (
    AgentProfile,
    census,
    generate_city,
    generate_population,
    generate_trajectories,
    select_days,
    split_dataset,
)
from mstdp.train import TrainConfig, make_samples, train
from mstdp.trajectory import DailyTrajectory, UserHistory, decouple, recouple

from oracles import binomial_exposure, brute_canonical

RESULTS = {}


def record(n, ok, detail):
    RESULTS[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, RESULTS[n]


# ---------------------------------------------------------------------------
# 1. decoupler round trip

def random_day(rng, T):
    slots, left = [], T
    prev = None
    while left:
        run = min(left, int(rng.integers(1, 9)))
        cell = int(rng.integers(0, 400))
        while cell == prev:
            cell = int(rng.integers(0, 400))
        slots += [cell] * run
        left -= run
        prev = cell
    return slots


def test_c1_decoupler_round_trip():
    rng = np.random.default_rng(0)
    days = [DailyTrajectory(0, i, i % 7, random_day(rng, (24, 48)[i % 2])) for i in range(10_000)]
    t0 = time.perf_counter()
    bad = sum(recouple(*decouple(t), t.T) != t.slots for t in days)
    elapsed = time.perf_counter() - t0
    # hourly example: l1 l1 l1 l2 l2 ... l3 l1 l1 -> {l1, l2, ..., l3, l1}, {3, 2, ..., 1, 2}
    example = [1, 1, 1, 2, 2] + [4] * 8 + [5] * 8 + [3, 1, 1]
    loc, dur = decouple(example)
    worked = loc[:2] == (1, 2) and loc[-2:] == (3, 1) and dur[:2] == (3, 2) and dur[-2:] == (1, 2) \
        and sum(dur) == 24 and len(loc) == len(dur)
    record(1, bad == 0 and worked and elapsed < 5.0,
           f"{10_000 - bad}/10000 exact round trips, worked example {'ok' if worked else 'wrong'}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 2. gradient fidelity of the full loss at micro scale

def micro_setup():
    city = generate_city(0, 2, 1, 1)  # 2 cells + 1 admin = 3 graph nodes
    T = 8
    hist = UserHistory(0, T)
    for d in range(9):
        cut = 2 + d % 3
        hist.add(DailyTrajectory(0, d, d % 7, [0] * cut + [1] * (T - cut - 1) + [0]))
    graph, feats = build_graph(hist.sorted_days(), city)
    cfg = ModelConfig.micro(2, 1, T=T, max_chain_len=4)
    samples = [make_sample(hist, k, hist.days[k + 1]) for k in (5, 6, 7)]
    return graph, feats, cfg, samples


def test_c2_gradient_fidelity():
    graph, feats, cfg, samples = micro_setup()
    assert graph.n_nodes == 3 and len(graph.flow_cell) > 0 and len(graph.flow_adm) > 0
    assert all(len(s.target[0]) <= 4 for s in samples)
    model = MSTDP(cfg, graph, feats)
    batch = collate(samples, cfg.n_cells)
    t0 = time.perf_counter()
    err = nn.grad_check(lambda: model.loss(batch, 1.0), list(model.store))
    elapsed = time.perf_counter() - t0
    dims = max(cfg.d_el, cfg.d_et, cfg.d_hl, cfg.d_ht, cfg.d_zl, cfg.d_zt)
    record(2, err < 1e-4 and elapsed < 60 and dims <= 8,
           f"max relative error {err:.2e} over {model.store.n_values()} parameters, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. normalization invariants

def test_c3_normalization(monkeypatch, graph_and_features):
    seen = []
    orig = layers.MultiHeadAttention.__call__

    def spy(self, q_in, kv_in, mask=None):
        out = orig(self, q_in, kv_in, mask)
        seen.append((self.last_weights, None if mask is None else np.broadcast_to(mask, self.last_weights.shape)))
        return out

    monkeypatch.setattr(layers.MultiHeadAttention, "__call__", spy)
    g, f = graph_and_features
    model = MSTDP(ModelConfig.desk(g.n_cells, g.n_admins), g, f)
    rng = np.random.default_rng(0)
    samples = []
    for user in range(6):
        h = UserHistory(user, 24)
        for d in range(7):
            if rng.random() < 0.6 or d == 6:
                h.add(DailyTrajectory(user, d, d, random_day(rng, 24)))
        samples.append(make_sample(h, 6, DailyTrajectory(user, 7, 0, random_day(rng, 24))))
    batch = collate(samples, g.n_cells)
    with nn.no_grad():
        model.forward(batch)
    row_err = max(np.abs(w.sum(-1) - 1).max() for w, _ in seen)
    masked = sum(int(m is not None and (w[~m] != 0).any()) for w, m in seen)
    alpha = model.graph_embed.last_alpha
    sums = np.zeros(g.n_nodes)
    np.add.at(sums, model.graph_embed.att_seg, alpha)
    flow_err = np.abs(sums - 1).max()

    # weekly encoders must ignore whatever sits in masked day slots
    with nn.no_grad():
        table = model.token_table()
        h_loc, h_dur = model.encode_days(table, batch)
        z1 = model.encode_week(h_loc, h_dur, batch)
        noisy = batch.day_slot.copy()
        noisy[~batch.week_mask] = rng.integers(1, len(h_loc.data) + 1, size=(~batch.week_mask).sum())
        batch.day_slot, saved = noisy, batch.day_slot
        z2 = model.encode_week(h_loc, h_dur, batch)
        batch.day_slot = saved
    invariant = all(np.array_equal(a.data, b.data) for a, b in zip(z1, z2)) and (~batch.week_mask).any()
    ok = row_err < 1e-9 and masked == 0 and flow_err < 1e-9 and invariant
    record(3, ok, f"{len(seen)} attention maps, row error {row_err:.1e}, flow row error {flow_err:.1e}, "
                  f"masked leaks {masked}, weekly invariance {'ok' if invariant else 'broken'}")


# ---------------------------------------------------------------------------
# 4. micro-overfit

def deterministic_corpus():
    city = generate_city(0, 10, 10, 4)
    rng = np.random.default_rng(4)
    agents = []
    for u in range(5):
        home, work, other = (int(c) for c in rng.choice(100, size=3, replace=False))
        weekday = np.eye(4)[[1, 2, 3, 1, 2][u]]
        weekend = np.eye(4)[[0, 3, 0, 3, 0][u]]
        agents.append(AgentProfile(home, work, other, weekday, weekend, noise_rate=0.0, stickiness=0.0,
                                   start_hour=7 + u % 3, weekly_day=u if u < 3 else None,
                                   weekly_cell=int((home + 11) % 100) if u < 3 else None))
    hist = generate_trajectories(city, agents, n_days=14, T=24, seed=0)
    return city, hist


def test_c4_micro_overfit():
    city, hist = deterministic_corpus()
    graph, feats = build_graph([t for h in hist.values() for t in h.sorted_days()], city)
    samples = make_samples(hist, (1, 14))
    model = MSTDP(ModelConfig.desk(graph.n_cells, graph.n_admins, seed=0), graph, feats)
    truth = [recouple(*s.target, 24) for s in samples]
    batch = collate(samples, graph.n_cells)
    state = {"acc": 0.0, "mae": float("inf"), "epochs": 0}

    def check(epoch, m):
        state["epochs"] = epoch
        if epoch % 5:
            return False
        state["acc"] = accuracy(m.predict_samples(samples), truth)
        with nn.no_grad():
            _, durs = m.forward(batch)
        # duration error of the temporal decoder on the true location chains
        state["mae"] = float(np.abs(durs.data - batch.tgt_dur)[batch.tgt_valid].mean())
        return state["acc"] >= 0.95 and state["mae"] <= 0.5

    t0 = time.perf_counter()
    train(model, samples, [], TrainConfig(lr=1e-3, epochs=200, batch_size=4, patience=0, seed=0), on_epoch=check)
    elapsed = time.perf_counter() - t0
    acc, mae = state["acc"], state["mae"]
    record(4, acc >= 0.95 and mae <= 0.5 and elapsed < 600,
           f"train Acc {acc:.3f}, duration MAE {mae:.3f} slots after {state['epochs']} epochs "
           f"({len(samples)} samples), {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 5 and 9 share one desk-scale training run

DESK_TRAIN = TrainConfig(lr=1e-3, epochs=40, batch_size=32, patience=0, seed=0, schedule="cosine", lr_min=1e-4)


@pytest.fixture(scope="module")
def desk_run(city, corpus, split, train_trajs):
    graph, feats = build_graph(train_trajs, city)
    model = MSTDP(ModelConfig.desk(graph.n_cells, graph.n_admins, seed=0), graph, feats)
    tr = make_samples(select_days(corpus, (0, split.train[1])), split.train)
    va = make_samples(select_days(corpus, (0, split.validation[1])), split.validation)
    t0 = time.perf_counter()
    result = train(model, tr, va, DESK_TRAIN)
    return model, va, result, time.perf_counter() - t0


def test_c5_beats_persistence(desk_run, corpus, split):
    model, va, result, elapsed = desk_run
    truth = [recouple(*s.target, 24) for s in va]
    persistence = accuracy([corpus[s.user].days[s.target_day - 7].slots for s in va], truth)
    gap = result.best_val_acc - persistence
    # validation also picked the epoch, so report held-out test days alongside
    te = make_samples(corpus, split.test)
    te_truth = [recouple(*s.target, 24) for s in te]
    te_model = accuracy(model.predict_samples(te), te_truth)
    te_persist = accuracy([corpus[s.user].days[s.target_day - 7].slots for s in te], te_truth)
    record(5, gap >= 0.02 and elapsed < 1800,
           f"val Acc {result.best_val_acc:.4f} vs persistence {persistence:.4f} (+{100 * gap:.2f} points), "
           f"test {te_model:.4f} vs {te_persist:.4f}, best epoch {result.best_epoch}, {elapsed / 60:.1f} min")


# ---------------------------------------------------------------------------
# 6. metric oracles

def test_c6_metric_oracles():
    checks = {}
    checks["jsd(p,p)=0"] = abs(jsd([0.1, 0.6, 0.3], [0.1, 0.6, 0.3])) < 1e-12
    checks["jsd disjoint=ln2"] = abs(jsd([0.5, 0.5, 0, 0], [0, 0, 0.2, 0.8]) - math.log(2)) < 1e-12
    F = FlowMatrix("cell", {(0, 1): 5, (1, 0): 2, (2, 3): 9})
    checks["identical cpc/r2=1"] = cpc(F, F) == 1.0 and r_squared(F, F) == 1.0
    checks["cpc 2/3"] = abs(cpc(FlowMatrix("cell", {(0, 1): 4}), FlowMatrix("cell", {(0, 1): 2})) - 2 / 3) < 1e-12
    mean = FlowMatrix("cell", {k: np.mean(list(F.flows.values())) for k in F.flows})
    checks["r2 mean=0"] = abs(r_squared(F, mean)) < 1e-12
    grid = generate_city(0, 10, 10, 4)
    rng = np.random.default_rng(0)
    actual = [DailyTrajectory(0, d, d, rng.integers(0, 90, size=24).tolist()) for d in range(5)]
    shifted = [DailyTrajectory(0, t.day, t.weekday, [s + 10 for s in t.slots]) for t in actual]
    checks["devdist 1 cell=1 km"] = abs(deviation_distance(shifted, actual, grid.centroids_km) - 1.0) < 1e-12
    failed = [k for k, v in checks.items() if not v]
    record(6, not failed, f"{len(checks) - len(failed)}/{len(checks)} oracles hold" + (f", failed {failed}" if failed else ""))


# ---------------------------------------------------------------------------
# 7. motif correctness, exhaustive over the default corpus

def test_c7_motifs(corpus):
    to_ref, to_mid, n, mismatches = {}, {}, 0, 0
    for h in corpus.values():
        for t in h.days.values():
            nodes, edges = daily_graph(t)
            if nodes > 5:
                continue
            n += 1
            mid, ref = canonical_form(nodes, edges), brute_canonical(nodes, edges)
            if to_ref.setdefault(mid, ref) != ref or to_mid.setdefault(ref, mid) != mid:
                mismatches += 1
    record(7, mismatches == 0 and n > 0,
           f"{n} daily trajectories, {len(to_mid)} isomorphism classes, {mismatches} disagreements with the oracle")


# ---------------------------------------------------------------------------
# 8. SEIR properties

def test_c8_seir(corpus, city, agents, split):
    t0 = time.perf_counter()
    test_trajs = [t for h in select_days(corpus, split.test).values() for t in h.sorted_days()]
    M = build_transition_matrices(test_trajs, city.cell_admin, city.n_admins)
    pop = census(city, agents)
    drift = 0

    def check(step, state):
        nonlocal drift
        drift += int(state.sum() != pop.sum() or (state < 0).any())

    for r in range(100):
        run_simulation(M, pop, rng=r, callback=check)
    no_beta = run_simulation(M, pop, SeirParams(beta=0.0), rng=0).cumulative.max()
    rng = np.random.default_rng(8)
    state = np.array([[1000], [0], [100], [0]])
    draws = np.array([1000 - seir_step(state, SeirParams(), rng)[0][0, 0] for _ in range(10_000)])
    mean, sd = binomial_exposure(1000, 100, 1100)
    z = abs(draws.mean() - mean) / (sd / math.sqrt(len(draws)))
    same = ensemble_mae(M, M, pop, n_runs=100)
    zero = not same.mae_infectious.any() and not same.mae_cumulative.any()
    r0 = SeirParams().r0
    elapsed = time.perf_counter() - t0
    ok = drift == 0 and no_beta == 0 and r0 == 6.72 and z < 3 and zero and elapsed < 300
    record(8, ok, f"conservation violations {drift}, beta=0 cases {no_beta}, R0 {r0!r}, exposure z {z:.2f}, "
                  f"paired MAE {'0' if zero else 'nonzero'}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 9. seven-day forecast degradation and epidemic error growth

def test_c9_week_trends(desk_run, corpus, city, agents, split):
    model, _, _, _ = desk_run
    start = split.test[0]
    users = [u for u in sorted(corpus) if all(start + i in corpus[u].days for i in range(7))]
    # Weekend days are much easier than weekdays, so a single start day
    # confounds horizon with weekday. Pool seven consecutive start days (one
    # per weekday) from the same people, continued past the corpus end.
    longer = generate_trajectories(city, agents, n_days=start + 13, T=24, seed=1)
    assert all(longer[u].days[d] == corpus[u].days[d] for u in corpus for d in corpus[u].days)
    pooled_pred, pooled_actual = [], []
    for s0 in range(start, start + 7):
        pooled_pred += predict_iterative(model, [longer[u] for u in users], s0 - 1, 7)
        pooled_actual += [[longer[u].days[s0 + i] for i in range(7)] for u in users]
    curves = seven_day_curves(pooled_pred, pooled_actual, city.centroids_km)
    acc, dev = curves["acc"], curves["dev_dist_km"]
    weeks = pooled_pred[:len(users)]
    actual = pooled_actual[:len(users)]
    Ma = build_transition_matrices([t for w in actual for t in w], city.cell_admin, city.n_admins)
    Mp = build_transition_matrices([t for w in weeks for t in w], city.cell_admin, city.n_admins)
    res = ensemble_mae(Ma, Mp, census(city, agents), n_runs=100)
    day3, day7 = res.day_mean(3)[1], res.day_mean(7)[1]
    ok = acc[0] >= acc[6] and dev[0] <= dev[6] and day7 > day3
    record(9, ok, "7 start days pooled; Acc by day " + " ".join(f"{a:.3f}" for a in acc) + "; DevDist by day "
           + " ".join(f"{d:.3f}" for d in dev) + f"; MAE(cum) day3 {day3:.1f} -> day7 {day7:.1f}")


# ---------------------------------------------------------------------------
# 10. pipeline determinism

PIPELINE_CFG = """
[synth]
agents = 30
days = 28
grid = 10x10
admins = 4

[model]
d_el = 16
d_et = 8
d_hl = 16
d_ht = 8
n_enc_layers = 1
n_dec_layers = 1

[train]
epochs = 3
batch_size = 32
lr = 0.001

[epi]
runs = 20
"""


def run_pipeline(root: Path, seed=11):
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "pipeline.ini"
    cfg.write_text(PIPELINE_CFG)
    d, g, m = root / "data", root / "graph.json", root / "model.ckpt"
    steps = [
        ["--config", cfg, "--seed", seed, "synth", "--out-dir", d],
        ["--config", cfg, "build-graph", "--data", d, "--out", g],
        ["--config", cfg, "--seed", seed, "train", "--data", d, "--graph", g, "--out", m, "--log", root / "train.csv"],
        ["predict", "--data", d, "--graph", g, "--checkpoint", m, "--task", "day", "--rolling", "--out", root / "day.jsonl"],
        ["predict", "--data", d, "--graph", g, "--checkpoint", m, "--task", "week", "--out", root / "week.jsonl"],
        ["evaluate", "--data", d, "--pred", root / "day.jsonl", "--report", root / "eval_day"],
        ["evaluate", "--data", d, "--pred", root / "week.jsonl", "--task", "week", "--report", root / "eval_week"],
        ["--config", cfg, "--seed", seed, "epi-sim", "--data", d, "--pred", root / "week.jsonl", "--out", root / "epi"],
        ["report", root / "eval_day", root / "eval_week", root / "epi", root / "train.csv", "--out", root / "report"],
    ]
    for argv in steps:
        code = cli_main([str(a) for a in argv])
        if code != 0:
            raise RuntimeError(f"step {argv} exited {code}")
    return root / "report"


def same_tree(a: Path, b: Path) -> bool:
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    return fa == fb and all(filecmp.cmp(a / p, b / p, shallow=False) for p in fa)


def test_c10_pipeline_determinism(tmp_path):
    t0 = time.perf_counter()
    r1 = run_pipeline(tmp_path / "a")
    r2 = run_pipeline(tmp_path / "b")
    n = sum(1 for p in r1.rglob("*") if p.is_file())
    ok = same_tree(r1, r2) and n > 5
    record(10, ok, f"{n} report files {'byte-identical' if ok else 'differ'} across two runs, "
                   f"{time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    sys.exit(code)
