"""End-to-end acceptance checks.

Each test prints one ``[criterion N] PASS|FAIL ...`` line with the measured
quantity next to its threshold, then asserts.
"""

from __future__ import annotations

import json
import math
import time

import numpy as np
import pytest
from scipy import stats

from switchpdmp.brackets import check_condition, grid_points, lie_bracket, numeric_bracket
from switchpdmp.cli import main
from switchpdmp.examples import (
    TRANSIENCE_C,
    b_closed_form,
    b_newton,
    interval_beta,
    planar_linear,
    radulescu,
    torus,
)
from switchpdmp.measure import continuous_occupation, correspondence_gap, ks_distance_1d
from switchpdmp.reach import accessible_set
from switchpdmp.simulate import replica_rng, sample_embedded, sample_path, sojourn_times
from switchpdmp.system import Box, SwitchingSystem

from conftest import segment_check, two_state


@pytest.fixture
def report(capsys):
    start = time.perf_counter()

    def emit(n, ok, detail):
        line = f"[criterion {n}] {'PASS' if ok else 'FAIL'} {detail} ({time.perf_counter() - start:.1f} s)"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return emit


# 1 -------------------------------------------------------------------------


def test_c1_beta_invariant_law(report):
    T = 5e4
    out = []
    for lam, law in ((2.0, stats.beta(2, 3)), (1.0, stats.beta(1, 2))):
        ex = interval_beta(lam)
        path = sample_path(ex.system, ex.start, T, 0.01, 2024, h=0.02)
        occ = continuous_occupation(path, T, box=ex.system.box, n_regimes=2)
        vals, w = occ.marginal(0, regime=0)
        out.append(ks_distance_1d(vals, law.cdf, w))
    report(1, max(out) < 0.02, f"KS lambda=2: {out[0]:.4f}, lambda=1: {out[1]:.4f} (< 0.02)")


# 2 -------------------------------------------------------------------------


def fd_jacobian(f, x, step=1e-6):
    cols = [(f(x + step * e) - f(x - step * e)) / (2 * step) for e in np.eye(len(x))]
    return np.column_stack(cols)


def test_c2_toggle_fixed_points(report):
    alpha = 3.0
    b, bc = b_newton(alpha), b_closed_form(alpha)
    ex = radulescu(alpha)
    f1 = lambda x: ex.system.field(1, np.asarray(x, dtype=float))  # noqa: E731
    res_b = float(np.linalg.norm(f1([b, b])))
    eig_b = np.sort(np.linalg.eigvals(fd_jacobian(f1, np.array([b, b]))).real)
    want_b = np.sort([-3 + 2 * b / alpha, 1 - 2 * b / alpha])
    a = (alpha + math.sqrt(alpha * alpha - 4)) / 2
    eig_a = np.sort(np.linalg.eigvals(fd_jacobian(f1, np.array([a, 1 / a]))).real)
    want_a = np.array([-1 - 2 / alpha, -1 + 2 / alpha])
    err_b, err_a = float(np.max(np.abs(eig_b - want_b))), float(np.max(np.abs(eig_a - want_a)))
    ok = res_b < 1e-10 and abs(b - bc) < 1e-10 and err_b < 1e-6 and err_a < 1e-6
    report(2, ok, f"|F1(b,b)|={res_b:.1e}, |b_newton-b_closed|={abs(b - bc):.1e}, eig errors {err_b:.1e}, {err_a:.1e}")


# 3 -------------------------------------------------------------------------


def test_c3_transience_rate(report):
    lam0, lam1, alpha = 1.0, 4.0, 3.0
    ex = radulescu(alpha, lambda0=lam0, lambda1=lam1, coordinates="sum-difference")
    bound = -(lam1 - (TRANSIENCE_C * alpha - 1) * lam0) / (lam0 + lam1)
    assert bound == pytest.approx(ex.extras["transience_rate_bound"])
    assert ex.start[0] == (1.5, 1.0)  # (x, y) = (2.5, 0.5)
    slopes = []
    for k in range(20):
        p = sample_path(ex.system, ex.start, 500.0, 0.5, replica_rng(31, k), h=0.01)
        keep = p.dense_t >= 50.0
        t, v = p.dense_t[keep], p.dense_x[keep, 1]
        assert np.all(v > 0)
        slopes.append(np.polyfit(t, np.log(2 * v), 1)[0])
    wins = int(np.sum(np.asarray(slopes) <= bound + 0.1))
    report(3, wins >= 18, f"{wins}/20 slopes <= {bound + 0.1:.3f} (median slope {np.median(slopes):.3f})")


# 4 -------------------------------------------------------------------------


def test_c4_recurrence_visits(report):
    ex = radulescu(3.0, lambda0=1.0, lambda1=0.05)
    a = ex.extras["a"]
    target = np.array([a, 1 / a])
    hits = 0
    for k in range(20):
        p = sample_path(ex.system, ((2.5, 0.5), 0), 500.0, 0.05, replica_rng(41, k), h=0.01)
        pts = np.vstack([p.dense_x, p.positions])
        hits += bool(np.any(np.linalg.norm(pts - target, axis=1) < 0.2))
    report(4, hits >= 18, f"{hits}/20 paths enter B(({a:.3f}, {1 / a:.3f}), 0.2) (>= 18)")


# 5 -------------------------------------------------------------------------


def test_c5_bracket_verdicts(report):
    bad = []
    for d in (2, 3):
        sys = torus(d).system
        pts = grid_points(sys, 5)[:25] if d == 3 else grid_points(sys, 5)
        for x in pts:
            w = check_condition(sys, x, "weak", k_max=4)
            s = check_condition(sys, x, "strong", k_max=4)
            if not (w.satisfied and w.order_achieved == 0) or s.satisfied:
                bad.append((f"torus{d}", tuple(x)))
    ex = planar_linear()
    A, a = ex.extras["A"], ex.extras["a"]
    assert np.linalg.det(np.column_stack([A @ a, A @ A @ a])) == pytest.approx(2.0)
    for x in grid_points(ex.system, 5):
        r = check_condition(ex.system, x, "strong", k_max=4)
        if not (r.satisfied and r.order_achieved == 1):
            bad.append(("planar", tuple(x)))
    case1 = planar_linear(A=((-1.0, 0.0), (0.0, -1.0)), a=(1.0, 0.0)).system
    for x in grid_points(case1, 5):
        if check_condition(case1, x, "strong", k_max=4).satisfied:
            bad.append(("case1", tuple(x)))
    report(5, not bad, f"{len(bad)} grid points with an unexpected verdict")


# 6 -------------------------------------------------------------------------


def test_c6_bracket_oracle(report):
    F0, F1 = radulescu().system.fields[:2]
    sym, num = lie_bracket(F0, F1), numeric_bracket(F0, F1)
    rng = np.random.default_rng(6)
    worst = 0.0
    for x in rng.uniform(0.5, 3.5, size=(20, 2)):
        s, n = np.asarray(sym(x)), np.asarray(num(x))
        worst = max(worst, float(np.linalg.norm(s - n) / max(np.linalg.norm(s), 1e-300)))
    report(6, worst <= 1e-6, f"max relative error {worst:.2e} (<= 1e-6)")


# 7 -------------------------------------------------------------------------


@pytest.mark.parametrize("case", ["case1", "radulescu"])
def test_c7_accessible_segments(report, case):
    if case == "case1":
        sys = planar_linear(A=((-1.0, 0.0), (0.0, -1.0)), a=(1.0, 0.0)).system
        p0, p1 = [0.0, 0.0], [1.0, 0.0]
    else:
        sys = radulescu(3.0).system
        b = b_newton(3.0)
        p0, p1 = [b, b], [3.0, 3.0]
    g = accessible_set(sys, resolution=128, n_starts=32)
    dist, cover = segment_check(g, p0, p1)
    report(7, dist <= 2.0 and cover >= 0.9,
           f"{case}: max distance {dist:.2f} cells (<= 2), coverage {cover:.3f} (>= 0.9), {g.n_occupied} cells")


# 8 -------------------------------------------------------------------------


def test_c8_correspondence_gap(report):
    ex = interval_beta(2.0)
    g2, g4 = [], []
    for k in range(20):
        p = sample_path(ex.system, ex.start, 1e4, 0.02, replica_rng(88, k), h=0.02)
        g2.append(correspondence_gap(ex.system, p, "x1", 1e2, h=0.1, cutoff=1e-12))
        g4.append(correspondence_gap(ex.system, p, "x1", 1e4, h=0.1, cutoff=1e-12))
    m2, m4 = float(np.median(g2)), float(np.median(g4))
    report(8, m4 < 0.01 and m4 < m2, f"median gap t=1e4: {m4:.2e} (< 0.01), t=1e2: {m2:.2e}")


# 9 -------------------------------------------------------------------------


def test_c9_thinning(report):
    sys = two_state(1.0, 2.0, 5.0)
    path = sample_embedded(sys, ([0.5], 0), 10**6, 9, h=1.0)
    soj = sojourn_times(path, 0)[: 10**5]
    assert len(soj) == 10**5
    ks = float(stats.kstest(soj, stats.expon(scale=1.0).cdf).statistic)
    surv = SwitchingSystem([["0"], ["0"]], [[0, "x1"], [0, 0]], 2.0, Box((0.0,), (1.0,)))
    worst = 0.0
    for j, x0 in enumerate((0.2, 0.5, 0.8)):
        firsts = []
        for k in range(4000):
            p = sample_embedded(surv, ([x0], 0), 80, replica_rng(900 + j, k), h=1.0)
            idx = np.nonzero(p.true_switch)[0]
            firsts.append(p.jump_times[idx[0]] if idx.size else math.inf)
        firsts = np.asarray(firsts)
        for t in (0.5, 1.0, 2.0, 4.0):
            worst = max(worst, abs(np.mean(firsts > t) - math.exp(-x0 * t)))
    report(9, ks < 0.01 and worst < 0.02, f"sojourn KS {ks:.4f} (< 0.01), survival max error {worst:.4f} (< 0.02)")


# 10 ------------------------------------------------------------------------

CONFIG = """\
[model]
example = "radulescu"
lambda0 = 1
lambda1 = 2

[simulation]
seed = 2718
horizon = 50
output_dt = 0.25
n_replicas = 3

[analysis]
resolution = 48
reach_mode = "accessible"
n_starts = 8
"""


def test_c10_determinism(report, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(CONFIG)
    runs = {}
    for cmd in ("simulate", "reach"):
        for tag, threads in (("a", "1"), ("b", "3")):
            out = tmp_path / f"{cmd}_{tag}"
            assert main([cmd, str(cfg), "--out", str(out), "--threads", threads]) == 0
            runs[cmd, tag] = {p.name: p.read_bytes() for p in sorted(out.iterdir())}
    same = all(runs[c, "a"] == runs[c, "b"] for c in ("simulate", "reach"))
    n = sum(len(runs[c, "a"]) for c in ("simulate", "reach"))
    hashes = json.loads(runs["reach", "a"]["manifest.json"])["outputs"]
    report(10, same and n > 0 and "reach.csv" in hashes, f"{n} output files byte-identical across repeated runs")
