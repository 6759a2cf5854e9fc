"""Acceptance suite: one recorded pass/fail line per criterion, each at its stated tolerance and time budget."""

import time

import numpy as np
import pytest
from scipy import ndimage
from skimage.draw import polygon

from clothfold.correspondence import contrastive_grad, contrastive_loss
from clothfold.graph import Edge, SpatioTemporalGraph, Vertex, VertexKind, graph_dissimilarity
from clothfold.harness import (
    RunConfig,
    descriptor_experiment,
    evaluate_policy,
    policy_controller,
    record_demo,
    train_policy,
    train_state_classifier,
)
from clothfold.policy import (
    LinearGaussianDynamics,
    QuadraticCost,
    Trajectory,
    TvlgPolicy,
    lqr_backward,
    lqr_solve,
    pi2_update,
    pi2_weights,
)
from clothfold.saliency import RefinedFlowMap, saliency_score, segment, segment_threshold
from clothfold.shape import central_moment, hu_invariants, normalized_moment, raw_moment

SEEDS = range(8)
MODES = ("refined", "plain", "embedding")


# ---------------------------------------------------------------- helpers


def naive_moments(mask, order=3):
    ys, xs = np.nonzero(mask)
    pts = list(zip(xs.tolist(), ys.tolist()))
    out = {}
    m00 = float(len(pts))
    xb = sum(x for x, _ in pts) / m00
    yb = sum(y for _, y in pts) / m00
    for p in range(order + 1):
        for q in range(order + 1 - p):
            raw = sum(x**p * y**q for x, y in pts)
            cen = sum((x - xb) ** p * (y - yb) ** q for x, y in pts)
            out[p, q] = (raw, cen, cen / m00 ** ((p + q + 2) / 2))
    return out


def rel_err(a, b, floor):
    return abs(a - b) / max(abs(b), floor)


def star_blob(rng, size=110):
    while True:
        n = rng.integers(5, 10)
        ang = np.sort(rng.uniform(0, 2 * np.pi, n))
        rad = rng.uniform(25, 45, n)
        m = np.zeros((size, size), bool)
        rr, cc = polygon(size / 2 + rad * np.sin(ang), size / 2 + rad * np.cos(ang), m.shape)
        m[rr, cc] = True
        ys, xs = np.nonzero(m)
        if np.ptp(ys) >= 63 and np.ptp(xs) >= 63:
            return m


def random_graph(rng):
    kinds = [VertexKind.EFFECTOR] * 2 + [VertexKind.BOARD] * int(rng.integers(2, 6)) + [VertexKind.CLOTH] * 2
    pos = rng.normal(size=(len(kinds), 3))
    verts = [Vertex(i, k, p) for i, (k, p) in enumerate(zip(kinds, pos))]
    ids = range(len(kinds))
    edges = [Edge(i, j, float(rng.uniform(0.1, 3.0))) for i in ids for j in ids if i < j and rng.random() < 0.6]
    return SpatioTemporalGraph(0, verts, edges)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


def scalar_chain(T):
    dyn = LinearGaussianDynamics(np.ones((T, 1, 1)), np.ones((T, 1, 1)), np.zeros((T, 1)), np.zeros((T, 1, 1)))
    cost = QuadraticCost(np.tile(np.diag([2.0, 2.0]), (T, 1, 1)), np.zeros((T, 2)), np.zeros(T),
                         np.array([[2.0]]), np.zeros(1), 0.0)
    return dyn, cost


def grid_search_cost(T, s0, span=1.0, levels=(1e-2, 1e-3, 1e-4, 1e-5), sweeps=400):
    """Coordinate descent over discretized actions, refining the grid; cost is sum s^2 + a^2 plus terminal s^2."""
    a = np.zeros(T)

    def totals(acts):
        s = s0 + np.concatenate([np.zeros((len(acts), 1)), np.cumsum(acts, axis=1)], axis=1)
        return (s**2).sum(axis=1) + (acts**2).sum(axis=1)

    best = totals(a[None])[0]
    for step in levels:
        grid = np.arange(-span, span + step / 2, step)
        for _ in range(sweeps):
            moved = False
            for t in range(T):
                trial = np.repeat(a[None], len(grid), axis=0)
                trial[:, t] += grid
                c = totals(trial)
                j = int(np.argmin(c))
                if c[j] < best - 1e-15:
                    a, best, moved = trial[j], c[j], True
            if not moved:
                break
        span = 10 * step
    return best


# ---------------------------------------------------------------- criteria


def test_segmentation_identity(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(1000):
        lam = float(rng.uniform(1e-2, 50.0))
        eps = float(rng.uniform(1e-6, 1 - 1e-6))
        thr = segment_threshold(lam, eps)
        mag = np.concatenate([rng.exponential(1.0 / lam, 30), [thr, np.nextafter(thr, 0), np.nextafter(thr, np.inf)]])
        mask = rng.random(mag.shape) < 0.8
        r = RefinedFlowMap(np.where(mask, mag, 0.0), mask)
        mismatches += int(np.sum(segment(r, lam, eps) != (saliency_score(r, lam) >= eps)))
    worst = max(abs(segment_threshold(lam, 0.5) - np.log(2) / lam) for lam in rng.uniform(1e-2, 50.0, 1000))
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and worst <= 1e-12 and dt < 1.0
    criterion("segmentation identity", ok, f"{mismatches} pixel mismatches over 1000 triples, "
              f"eps=0.5 threshold error {worst:.1e}, {dt:.2f}s")
    assert ok


def test_moment_oracle(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        m = rng.random((int(rng.integers(6, 20)), int(rng.integers(6, 20)))) < rng.uniform(0.2, 0.8)
        m[rng.integers(m.shape[0]), rng.integers(m.shape[1])] = True
        for (p, q), (raw, cen, nu) in naive_moments(m).items():
            worst = max(worst, rel_err(raw_moment(m, p, q), raw, 1.0))
            worst = max(worst, abs(central_moment(m, p, q) - cen) / max(abs(cen), 1.0))
            if p + q >= 2:
                worst = max(worst, abs(normalized_moment(m, p, q) - nu) / max(abs(nu), 1e-3))
    n = 100
    phi1 = hu_invariants(np.ones((n, n), bool))[0]
    sq_err = abs(phi1 - (n**2 - 1) / (6 * n**2))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and sq_err <= 1e-6 and dt < 10.0
    criterion("moment oracle", ok, f"worst relative error {worst:.1e} over 50 masks, square phi1 error {sq_err:.1e}, {dt:.2f}s")
    assert ok


def test_hu_invariance(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    exact = True
    for _ in range(30):
        m = rng.random((14, 11)) < 0.5
        m[0, 0] = True
        ref = hu_invariants(m)
        canvas = np.zeros((40, 40), bool)
        dy, dx = rng.integers(0, 20, 2)
        canvas[dy : dy + 14, dx : dx + 11] = m
        exact &= np.array_equal(hu_invariants(canvas), ref)
        for k in (1, 2, 3):
            exact &= np.array_equal(hu_invariants(np.rot90(m, k)), ref)
    drift = 0.0
    for _ in range(8):
        m = star_blob(rng)
        h0 = hu_invariants(m)
        for ang in rng.uniform(0, 360, 4):
            r = ndimage.rotate(m.astype(np.uint8), ang, order=0, reshape=True) > 0
            drift = max(drift, np.linalg.norm(hu_invariants(r) - h0) / np.linalg.norm(h0))
    dt = time.perf_counter() - t0
    ok = exact and drift < 0.02 and dt < 30.0
    criterion("Hu invariance", ok, f"lattice bit-exact {exact}, worst arbitrary-rotation drift {100 * drift:.2f}%, {dt:.2f}s")
    assert ok


def test_graph_cost_properties(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    zero = inv = lin = 0.0
    for _ in range(1000):
        gE = random_graph(rng)
        gR = gE.with_positions(gE.positions() + rng.normal(0, 0.3, gE.positions().shape))
        mask = rng.random(len(gE.edges)) < 0.7
        zero = max(zero, graph_dissimilarity(gE, gE, mask))
        d = graph_dissimilarity(gE, gR, mask)
        R, tr = random_rotation(rng), rng.normal(size=3)
        inv = max(inv, abs(graph_dissimilarity(gE.transformed(R, tr), gR.transformed(R, tr), mask) - d))
        c = float(rng.uniform(0.1, 10.0))
        scaled = SpatioTemporalGraph(0, gE.vertices, [Edge(e.i, e.j, c * e.weight) for e in gE.edges])
        lin = max(lin, abs(graph_dissimilarity(scaled, gR, mask) - c * d) / max(c * d, 1e-12))
    dt = time.perf_counter() - t0
    ok = zero == 0 and inv <= 1e-9 and lin <= 1e-12 and dt < 5.0
    criterion("graph cost properties", ok, f"identical {zero}, rigid-motion change {inv:.1e}, "
              f"weight-scaling relative error {lin:.1e} over 1000 graphs, {dt:.2f}s")
    assert ok


def test_contrastive_gradient(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = {True: 0.0, False: 0.0}
    active = {True: 0, False: 0}
    h = 1e-6
    for k in range(100):
        match = k % 2 == 0
        a = rng.normal(size=16) * 0.1
        b = a + rng.normal(size=16) * (0.3 if match else 0.05)
        ga, _ = contrastive_grad(a, b, match, 0.5)
        E = np.eye(16) * h
        num = np.array([(contrastive_loss(a + e, b, match, 0.5) - contrastive_loss(a - e, b, match, 0.5)) / (2 * h) for e in E])
        active[match] += int(np.linalg.norm(num) > 0)
        worst[match] = max(worst[match], np.linalg.norm(ga - num) / max(np.linalg.norm(num), 1e-12))
    dt = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-5 and active[False] > 0 and dt < 5.0
    criterion("contrastive gradient", ok, f"relative error match {worst[True]:.1e}, non-match {worst[False]:.1e} "
              f"({active[False]} of 50 inside the margin), {dt:.2f}s")
    assert ok


def test_correspondence_accuracy(criterion):
    t0 = time.perf_counter()
    _, acc, n = descriptor_experiment(n_train=20, n_test=10, seed=0)
    dt = time.perf_counter() - t0
    ok = acc >= 0.9 and n > 0 and dt < 300.0
    criterion("correspondence accuracy", ok, f"{100 * acc:.1f}% of {n} held-out corner queries within 3 px, {dt:.1f}s")
    assert ok


def test_lqr_oracle(criterion):
    t0 = time.perf_counter()
    dyn, cost = scalar_chain(1)
    k_err = abs(lqr_backward(dyn, cost).K[0, 0, 0] + 0.5)
    dyn, cost = scalar_chain(20)
    v = lqr_solve(dyn, cost).value(np.array([1.0]), 0)
    t_lqr = time.perf_counter() - t0
    g = grid_search_cost(20, 1.0)
    gap = abs(v - g)
    ok = k_err <= 1e-9 and gap <= 1e-3 and t_lqr < 1.0
    criterion("LQR oracle", ok, f"K error {k_err:.1e}, cost-to-go {v:.6f} vs grid search {g:.6f} (gap {gap:.1e}), "
              f"solver {t_lqr * 1000:.1f} ms")
    assert ok


def test_pi2_properties(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    norm = shift = 0.0
    for _ in range(300):
        S = rng.normal(size=(int(rng.integers(2, 12)), int(rng.integers(1, 8)))) * rng.uniform(0.1, 10)
        temp = float(rng.uniform(1e-3, 1e2))
        w = pi2_weights(S, temp)
        norm = max(norm, np.abs(w.sum(axis=0) - 1).max())
        shift = max(shift, np.abs(pi2_weights(S + rng.uniform(-1e3, 1e3), temp) - w).max())
    argmin_ok = True
    for _ in range(50):
        M, T = int(rng.integers(2, 8)), 4
        rs = [Trajectory(rng.normal(size=(T + 1, 2)), rng.normal(size=(T, 1)), rng.random(T + 1)) for _ in range(M)]
        new = pi2_update(TvlgPolicy.zeros(T, 2, 1), rs, temperature=1e-9)
        S = np.stack([r.cost_to_go() for r in rs])
        best = np.array([rs[int(np.argmin(S[:, t]))].actions[t] for t in range(T)])
        argmin_ok &= np.allclose(new.k, best, atol=1e-6)
    dt = time.perf_counter() - t0
    ok = norm <= 1e-12 and shift <= 1e-12 and argmin_ok and dt < 5.0
    criterion("PI2 properties", ok, f"normalization error {norm:.1e}, shift change {shift:.1e}, "
              f"low-temperature argmin {argmin_ok}, {dt:.2f}s")
    assert ok


# ---------------------------------------------------------------- end to end


@pytest.fixture(scope="module")
def end_to_end():
    t0 = time.perf_counter()
    demo = record_demo("left")
    cfg0 = RunConfig(task="left")
    model = train_state_classifier(cfg0.env, cfg0.sim_task)
    reports = {}
    for mode in MODES:
        for seed in SEEDS:
            reports[mode, seed] = full_run(mode, seed, demo, model)
    return reports, demo, model, time.perf_counter() - t0


def full_run(mode, seed, demo, model):
    cfg = RunConfig(task="left", mode=mode, seed=seed)
    policy, report = train_policy(cfg, demo, model)
    report.runs = evaluate_policy(policy_controller(policy, stochastic=False), cfg, model, len(demo.actions), n_runs=1)
    return report


def test_end_to_end_trend(end_to_end, criterion):
    reports, _, _, dt = end_to_end
    counts = {m: sum(reports[m, s].runs[0].success for s in SEEDS) for m in MODES}
    phases = {m: {p: sum(getattr(reports[m, s].runs[0], p) for s in SEEDS)
                  for p in ("approaching", "lifting", "rotating", "pushing")} for m in MODES}
    for m in MODES:
        print(m, phases[m], "summary", counts[m])
    ok = (counts["refined"] >= counts["plain"] >= counts["embedding"] and counts["refined"] >= 6
          and counts["embedding"] <= 4 and dt < 1800)
    criterion("end-to-end trend", ok, f"refined {counts['refined']}/8, plain {counts['plain']}/8, "
              f"embedding {counts['embedding']}/8, {dt / 60:.1f} min")
    assert ok


def test_pipeline_determinism(end_to_end, criterion):
    reports, demo, model, _ = end_to_end
    t0 = time.perf_counter()
    again = full_run("refined", 0, demo, model)
    dt = time.perf_counter() - t0
    ok = again == reports["refined", 0]
    criterion("pipeline determinism", ok, f"repeat refined seed 0 run identical {ok}, {dt:.1f}s")
    assert ok
