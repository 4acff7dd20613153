from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats

from switchpdmp.examples import radulescu
from switchpdmp.flow import integrate
from switchpdmp.simulate import (
    EnsembleError,
    embedded_step,
    ensemble,
    replica_rng,
    sample_embedded,
    sample_path,
    sojourn_times,
)
from switchpdmp.system import Box, CallableField, SwitchingSystem

from conftest import twin, two_state


def test_zero_rates_never_switch():
    sys = SwitchingSystem([["-x1"], ["1 - x1"]], [[0, 0], [0, 0]], 1.0, Box((0.0,), (1.0,)))
    path = sample_embedded(sys, ([0.8], 1), 200, 3)
    assert np.all(path.regimes == 1)
    assert not path.true_switch.any()
    # position follows the single flow x' = 1 - x
    t = path.jump_times[-1]
    assert path.positions[-1, 0] == pytest.approx(1 - 0.2 * math.exp(-t), abs=1e-9)


def test_embedded_step_uses_two_uniforms():
    sys = two_state()
    rng = np.random.default_rng(5)
    (x, i), u = embedded_step(sys, ([0.5], 0), rng)
    ref = np.random.default_rng(5)
    u0, u1 = ref.random(2)
    assert u == pytest.approx(-math.log1p(-u0) / sys.lambda_bar, rel=1e-15)
    assert i == (1 if u1 < 1.0 / 5.0 else 0)
    # the generator advanced by exactly two draws
    assert rng.random() == ref.random()


def test_waiting_time_mean():
    sys = two_state(lambda_bar=4.0)
    n = 10**6
    path = sample_embedded(sys, ([0.5], 0), n, 11, h=1.0)
    u = path.interarrivals
    assert np.all(u > 0)
    assert abs(u.mean() - 0.25) <= 3 * 0.25 / math.sqrt(n)


def test_poisson_count_mean():
    sys = two_state(lambda_bar=5.0)
    t, n = 2.0, 10**4
    counts = ensemble(sys, ([0.5], 0), n, lambda s, z, r: sample_embedded(s, z, 40, r, h=1.0).count(t), 99)
    assert abs(np.mean(counts) - 10.0) <= 3 * math.sqrt(10.0 / n)


@pytest.mark.parametrize("l0,l1", [(1.0, 1.0), (1.0, 2.0)])
def test_regime_chain_stationary_fraction(l0, l1):
    path = sample_embedded(two_state(l0, l1), ([0.5], 0), 10**6, 2024, h=1.0)
    frac0 = np.mean(path.regimes[1:] == 0)
    assert frac0 == pytest.approx(l1 / (l0 + l1), abs=0.01)


def test_sample_path_decay():
    sys = twin(["-x1"], lo=(0.0,), hi=(1.0,))
    path = sample_path(sys, ([1.0], 0), 1.0, 0.25, 7)
    x, i = path.state_at(1.0)
    assert x[0] == pytest.approx(math.exp(-1.0), abs=1e-6)


def test_path_before_first_jump():
    sys = SwitchingSystem([["-x1"], ["1 - x1"]], [[0, 1.0], [1.0, 0]], 3.0, Box((0.0,), (1.0,)))
    seed = 314
    u0 = np.random.Generator(np.random.PCG64(seed)).random()
    t1 = -math.log1p(-u0) / 3.0
    path = sample_path(sys, ([0.9], 0), 5.0, 0.01, seed)
    assert path.jump_times[1] == pytest.approx(t1, rel=1e-14)
    before = path.dense_t < t1
    for t, x in zip(path.dense_t[before], path.dense_x[before]):
        assert x[0] == pytest.approx(0.9 * math.exp(-t), abs=1e-9)


def test_dense_rows_follow_the_flow():
    sys = radulescu().system
    path = sample_path(sys, ((2.5, 0.5), 0), 30.0, 0.05, 8, h=1e-3)
    assert np.all(path.interarrivals > 0)
    lo, hi = np.asarray(sys.box.lo), np.asarray(sys.box.hi)
    assert np.all(path.positions >= lo - 1e-6) and np.all(path.positions <= hi + 1e-6)
    checked = 0
    for k in range(len(path.dense_t) - 1):
        if path.dense_jump[k + 1] or path.dense_regime[k] != path.dense_regime[k + 1]:
            continue
        dt = path.dense_t[k + 1] - path.dense_t[k]
        ref = integrate(sys, int(path.dense_regime[k]), path.dense_x[k], dt, h=1e-3).x
        assert np.max(np.abs(ref - path.dense_x[k + 1])) < 1e-8
        checked += 1
    assert checked > 100


def test_jump_rows_hold_new_regime():
    sys = radulescu().system
    path = sample_path(sys, ((2.5, 0.5), 0), 20.0, 0.1, 4)
    for k in np.nonzero(path.dense_jump)[0]:
        j = np.searchsorted(path.jump_times, path.dense_t[k])
        assert path.jump_times[j] == path.dense_t[k]
        assert path.dense_regime[k] == path.regimes[j]


def test_radulescu_wedge_invariant():
    # recurrent rates: the path stays in the open wedge 0 < y < x
    sys = radulescu(alpha=3.0, lambda0=1.0, lambda1=0.05).system
    for seed in range(3):
        path = sample_path(sys, ((2.5, 0.5), 0), 200.0, 0.05, seed)
        x, y = path.dense_x[:, 0], path.dense_x[:, 1]
        assert np.all(y > 0) and np.all(y < x)


def test_radulescu_wedge_closed_when_transient():
    # transient rates: x - y decays below double spacing, so only the closed
    # wedge survives in floating point
    sys = radulescu(alpha=3.0, lambda0=1.0, lambda1=4.0).system
    path = sample_path(sys, ((2.5, 0.5), 0), 200.0, 0.05, 1)
    x, y = path.dense_x[:, 0], path.dense_x[:, 1]
    assert np.all(y > 0) and np.all(y <= x)


# -- ensembles and reproducibility -----------------------------------------


def _op(sys, z0, rng):
    return sample_path(sys, z0, 10.0, 0.1, rng)


def test_ensemble_deterministic():
    sys = radulescu().system
    a = ensemble(sys, ((2.5, 0.5), 0), 4, _op, 77)
    b = ensemble(sys, ((2.5, 0.5), 0), 4, _op, 77, threads=3)
    for p, q in zip(a, b):
        assert p.dense_csv() == q.dense_csv()
        assert p.skeleton_json() == q.skeleton_json()


def test_replica_isolation():
    sys = radulescu().system
    paths = ensemble(sys, ((2.5, 0.5), 0), 5, _op, 21)
    alone = _op(sys, ((2.5, 0.5), 0), replica_rng(21, 3))
    assert alone.dense_csv() == paths[3].dense_csv()


def test_same_seed_same_bytes():
    sys = radulescu().system
    a = sample_path(sys, ((2.5, 0.5), 0), 15.0, 0.1, 5)
    b = sample_path(sys, ((2.5, 0.5), 0), 15.0, 0.1, 5)
    assert a.dense_csv() == b.dense_csv() and a.skeleton_json() == b.skeleton_json()
    c = sample_path(sys, ((2.5, 0.5), 0), 15.0, 0.1, 6)
    assert c.skeleton_json() != a.skeleton_json()


def test_first_waiting_time_ks():
    sys = two_state(lambda_bar=5.0)
    u1 = ensemble(sys, ([0.5], 0), 10**4, lambda s, z, r: sample_embedded(s, z, 1, r, h=1.0).jump_times[1], 1)
    assert stats.kstest(u1, stats.expon(scale=0.2).cdf).statistic < 0.02


def test_ensemble_collects_errors():
    sys = two_state()

    def op(s, z, r):
        if r.random() < 0.5:
            raise RuntimeError("boom")
        return 1

    with pytest.raises(EnsembleError) as info:
        ensemble(sys, ([0.5], 0), 20, op, 3)
    assert info.value.errors


def test_start_sampler_uses_replica_stream():
    sys = two_state()
    starts = ensemble(sys, lambda r: ([r.random()], 0), 3, lambda s, z, r: z, 8)
    assert starts[1][0][0] == replica_rng(8, 1).random()


# -- distributional checks of thinning --------------------------------------


def test_sojourns_exponential():
    sys = two_state(1.0, 2.0, 5.0)
    path = sample_embedded(sys, ([0.5], 0), 4 * 10**5, 17, h=1.0)
    soj = sojourn_times(path, 0)
    assert len(soj) > 3 * 10**4
    assert stats.kstest(soj, stats.expon(scale=1.0).cdf).statistic < 0.02


def test_state_dependent_survival():
    x0 = 0.8
    sys = SwitchingSystem([["0"], ["0"]], [[0, "x1"], [0, 0]], 2.0, Box((0.0,), (1.0,)))
    n = 4000
    firsts = []
    for k in range(n):
        path = sample_embedded(sys, ([x0], 0), 60, replica_rng(5, k), h=1.0)
        idx = np.nonzero(path.true_switch)[0]
        firsts.append(path.jump_times[idx[0]] if idx.size else math.inf)
    firsts = np.asarray(firsts)
    for t in (0.5, 1.0, 2.0):
        assert np.mean(firsts > t) == pytest.approx(math.exp(-x0 * t), abs=0.02)


def test_python_loop_matches_compiled_kernel():
    expr = SwitchingSystem([["-x1"], ["1 - x1"]], [[0, "1 + x1"], [0.5, 0]], 4.0, Box((0.0,), (1.0,)))
    call = SwitchingSystem(
        [CallableField(lambda x: -x, 1), CallableField(lambda x: 1 - x, 1)],
        [[0, lambda x: 1 + x[0]], [0.5, 0]],
        4.0,
        Box((0.0,), (1.0,)),
    )
    a = sample_path(expr, ([0.3], 0), 20.0, 0.1, 9, h=1e-2)
    b = sample_path(call, ([0.3], 0), 20.0, 0.1, 9, h=1e-2)
    np.testing.assert_array_equal(a.regimes, b.regimes)
    np.testing.assert_allclose(a.jump_times, b.jump_times, rtol=0, atol=0)
    np.testing.assert_allclose(a.positions, b.positions, atol=1e-12)
    np.testing.assert_allclose(a.dense_x, b.dense_x, atol=1e-12)


def test_bad_inputs():
    sys = two_state()
    with pytest.raises(ValueError):
        sample_path(sys, ([0.5], 0), 0.0, 0.1, 1)
    with pytest.raises(ValueError):
        sample_path(sys, ([2.0], 0), 1.0, 0.1, 1)
    with pytest.raises(ValueError):
        sample_embedded(sys, ([0.5], 3), 5, 1)
