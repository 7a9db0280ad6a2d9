import itertools
import math

import numpy as np
import pytest
from factories import GOLDEN, KMAP, small_box
from hypothesis import given, settings
from hypothesis import strategies as st

from qtkam.kam import KamSchedule, reduced_spectrum, run_reduction
from qtkam.melnikov import (
    GNViolation,
    MelnikovConfig,
    MelnikovTuple,
    check_C_star,
    embedding_check,
    measure_sweep,
    mel_decay_sup,
    melnikov_value,
    minimal_tau_list,
    sample_frequencies,
    tuple_from_GN,
)
from qtkam.operators import fourier_ball
from qtkam.potentials import random_potential
from qtkam.toeplitz import DiagonalData


@pytest.fixture(scope="module")
def spec():
    box = small_box(6, 8)
    V = random_potential(7, 1e-3, 4, KMAP)
    s, _, status = run_reduction(V, GOLDEN, KamSchedule(0.25, 2, 1e-3, 2.5, 6), 1e-2, box)
    assert status["converged"]
    return s


def _toy_spectrum():
    """Tiny tables so that every admissible sum can be enumerated."""
    box = small_box(3, 3)
    a = np.zeros(box.nf)
    a[box.site_fiber[0]] = 0.031
    a[box.site_fiber[5]] = -0.017
    r1 = np.zeros(box.n)
    r1[2] = 0.011
    r2 = np.zeros(box.n)
    r2[7] = -0.043
    return reduced_spectrum(DiagonalData(box, a, r1, r2), None, GOLDEN)


def test_tau_list_recursion():
    taus = minimal_tau_list(3, 2, 0.4)
    assert taus[:3] == [3.0, 71.5, 1612.75]
    assert len(taus) == 7
    assert minimal_tau_list(2, 2, 0.4, slack=0.0)[1] == 7.5 * 2 * 3 + 3


def test_config_validation():
    with pytest.raises(ValueError, match="N must"):
        MelnikovConfig.standard(1, 1e-2, 2, 0.4, 2, 4)
    with pytest.raises(ValueError, match="tau_0"):
        MelnikovConfig(2, 1e-2, (4, 100, 1e4, 1e6, 1e8), 2, 4)
    with pytest.raises(ValueError, match="must exceed"):
        MelnikovConfig(2, 1e-2, (3, 4, 5, 6, 7), 2, 4)
    cfg = MelnikovConfig.standard(2, 1e-2, 2, 0.4, 2, 4)
    assert cfg.with_gamma(0.5).gamma == 0.5 and cfg.with_gamma(0.5).tau_list == cfg.tau_list


def test_thresholds():
    cfg = MelnikovConfig.standard(2, 1e-2, 2, 0.4, 2, 4)
    assert float(cfg.threshold(1.0, 3)) == pytest.approx(1e-2 * 2 ** -1.5)
    assert float(cfg.threshold(3.0, 1)) == pytest.approx(1e-2 * 10 ** (-cfg.tau_list[1] / 2))
    assert float(cfg.threshold(3.0, 4)) == 0.0  # below double precision


def test_tuple_validation():
    with pytest.raises(ValueError):
        MelnikovTuple((1, 0), 0, ((0, 1),), (0,), (1,), ((0, 0),))
    with pytest.raises(ValueError):
        MelnikovTuple((1, 0), 0, ((0, 1),), (0,), (2, 0), ((0, 0),))
    t = MelnikovTuple((1, 0), 0, ((0, 1), (1, 0)), (0, 0), (1, 0, 0, -1), ((0, 0), (1, 1)))
    assert t.N == 2 and t.level == 2


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(-4, 4), st.integers(-4, 4), st.sampled_from([-1, 1])),
                min_size=1, max_size=3))
def test_gn_tuple_reproduces_omega_combination(spec, items):
    L: dict = {}
    for a, b, m in items:
        L[(a, b)] = L.get((a, b), 0) + m
    L = {j: m for j, m in L.items() if m}
    if not L:
        return
    p = (-sum(j[0] * m for j, m in L.items()), -sum(j[1] * m for j, m in L.items()))
    # identity map: l = -sum j L_j, the gauge needs sum(l) = -sum(L)
    if sum(p) != -sum(L.values()):
        with pytest.raises(GNViolation):
            tuple_from_GN(p, L, spec, 3)
        return
    K = sum((j[0] ** 2 + j[1] ** 2) * m for j, m in L.items())
    if p == (0, 0) and K == 0:
        return
    t = tuple_from_GN(p, L, spec, 3)
    box = spec.box
    ref = float(np.dot(GOLDEN, p)) + sum(m * spec.Omega[box.index[j]] for j, m in L.items())
    assert melnikov_value(spec, GOLDEN, t) == pytest.approx(ref, abs=1e-10)
    assert t.level == 2 * sum(abs(m) for m in L.values())


def test_gn_violations(spec):
    with pytest.raises(GNViolation, match="exceeds"):
        tuple_from_GN((0, 0), {(1, 0): 2, (0, 1): -2}, spec, 3)
    with pytest.raises(GNViolation, match="momentum"):
        tuple_from_GN((1, -1), {(1, 0): 1, (2, 0): -1}, spec, 3)
    with pytest.raises(GNViolation, match="excluded"):
        tuple_from_GN((0, 0), {(1, 0): 1, (-1, 0): 1, (0, 1): -1, (0, -1): -1}, spec, 4)


def test_off_table_terms_read_zero(spec):
    t = MelnikovTuple((1, 0), 3, ((7, 5), (0, 1)), (0, 0), (1, 0, 0, 1), ((0, 0), (40, 0)))
    val, flags = melnikov_value(spec, GOLDEN, t, with_flags=True)
    assert val == pytest.approx(GOLDEN[0] + 3)
    assert ("a", 0) in flags and ("R", 1) in flags


def _brute_pass(spec, omega, gamma, N, L):
    A = sorted({0.0} | {s * abs(x) for x in spec.a_symbol if x for s in (1, -1)})
    R = sorted({0.0} | {s * abs(x) for x in spec.r_total() if x for s in (1, -1)})
    sums = {sum(c) for c in itertools.product(A, repeat=N)}
    sums = sorted({x + y for x in sums for y in {sum(c) for c in itertools.product(R, repeat=N)}})
    for ell in fourier_ball(L, 2):
        if not any(ell):
            continue
        n = math.hypot(*ell)
        thr = gamma * (1 + n * n) ** -1.5
        x = float(np.dot(omega, ell))
        for K in range(-int(2 * n + 1e-12), int(2 * n + 1e-12) + 1):
            if min(abs(x + K + s) for s in sums) < thr:
                return False
    return True


def test_audit_matches_exhaustive_enumeration():
    toy = _toy_spectrum()
    oms = sample_frequencies(60, 2, 3)
    for gamma in (3e-3, 1e-3):
        cfg = MelnikovConfig.standard(2, gamma, 2, toy.box.geom.mu, L_cut=3, L_audit=3)
        got = [check_C_star(toy, om, cfg).passed for om in oms]
        ref = [_brute_pass(toy, om, gamma, 2, 3) for om in oms]
        assert got == ref
        assert 0 < sum(got) < len(got)


def test_check_c_star_examples(spec):
    cfg = MelnikovConfig.standard(3, 1e-4, 2, spec.box.geom.mu, L_cut=4, L_audit=8)
    rep = check_C_star(spec, GOLDEN, cfg)
    assert rep.passed and rep.undecided == 0 and rep.worst_ratio >= 1
    assert rep.audited["n_ell"] == len(fourier_ball(8, 2)) - 1
    assert rep.audited["large_K_lower_bound"] > 0.9
    bad = check_C_star(spec, (0.5, 0.25), cfg)
    assert not bad.passed and bad.witness["level"] == 0 and bad.witness["value"] == 0.0
    assert check_C_star(spec, (0.5, 0.25), cfg.with_gamma(0.0)).passed


def test_sample_frequencies():
    a = sample_frequencies(128, 2, 5)
    assert a.shape == (128, 2) and np.all(np.abs(a) <= 1)
    assert np.array_equal(a, sample_frequencies(128, 2, 5))
    assert not np.array_equal(a, sample_frequencies(128, 2, 6))
    for m in ("halton", "iid"):
        assert sample_frequencies(100, 3, 1, m).shape == (100, 3)
    with pytest.raises(ValueError):
        sample_frequencies(10, 2, 0, "grid")


def test_measure_sweep_monotone(spec):
    cfg = MelnikovConfig.standard(3, 1e-2, 2, spec.box.geom.mu, L_cut=4, L_audit=8)
    rep = measure_sweep(spec, cfg, [3e-2, 1e-2, 3e-3], 256, 0, embedding_samples=5)
    assert rep.monotone
    fr = [r["fraction"] for r in rep.rows]
    assert fr == sorted(fr) and fr[-1] > 0
    for r in rep.rows:
        assert r["ci_low"] <= r["fraction"] <= r["ci_high"] and r["undecided"] == 0
    assert rep.embedding["identity_defect"] <= 1e-12
    assert rep.embedding["violations"] == 0
    with pytest.raises(ValueError):
        measure_sweep(spec, cfg, [1e-2], 50, 0)


def test_embedding_identity(spec):
    cfg = MelnikovConfig.standard(2, 1e-3, 2, spec.box.geom.mu, L_cut=4, L_audit=4)
    e = embedding_check(spec, GOLDEN, cfg, cfg.tau_list[-1], K=3)
    assert e["identity_defect"] <= 1e-12
    assert e["C1"] and e["C2"]


def test_mel_decay_sup(spec):
    assert mel_decay_sup(spec) >= spec.expansion_bound() - np.abs(spec.theta1).max() - np.abs(spec.theta2).max()
    free = reduced_spectrum(DiagonalData.free(spec.box), None, GOLDEN)
    assert mel_decay_sup(free) == 0.0
