import math

import numpy as np
import pytest
from factories import GOLDEN, KMAP, random_diagonal, random_qt, small_box
from hypothesis import given, settings
from hypothesis import strategies as st

from qtkam.operators import MomentumOperator, OrderWeight, commutator, order_norm
from qtkam.potentials import TravelingWavePotential, multiplication_operator, random_potential
from qtkam.toeplitz import DiagonalData, lt_materialize
from qtkam.homological import (
    DivisorContext,
    SmallDivisorError,
    fiber_divisors,
    first_step_solver,
    homological_residual,
    o0_membership,
    resonance_membership,
    site_divisors,
    small_divisor,
    solve_homological,
    toeplitz_divisor,
)


def test_context_validation():
    with pytest.raises(ValueError):
        DivisorContext((0.5, 2.0), 1e-2, 2.5, 4)
    with pytest.raises(ValueError):
        DivisorContext((0.5, 0.2), -1, 2.5, 4)
    assert DivisorContext((0.5, 0.25), 0, 1, 1).om_dot((2, -4)) == 0.0


def test_small_divisor_example():
    box = small_box(5, 4)
    ctx = DivisorContext(GOLDEN, 1e-2, 2.5, 4)
    D = DiagonalData.free(box)
    # |(2,0)|^2 - |(1,0)|^2 = 3
    assert small_divisor(D, ctx, (1, 0), (2, 0)) == pytest.approx(GOLDEN[0] + 3, abs=1e-15)
    assert small_divisor(D, ctx, (1, -1), (0, 0)) == pytest.approx(GOLDEN[0] - GOLDEN[1] - 2, abs=1e-15)
    with pytest.raises(IndexError):
        small_divisor(D, ctx, (1, 0), (-5, 0))


def test_site_divisors_vector():
    box = small_box(5, 4)
    ctx = DivisorContext(GOLDEN, 1e-2, 2.5, 4)
    D = random_diagonal(np.random.default_rng(0), box)
    dv, ok = site_divisors(D, ctx, (2, 1))
    for i in np.flatnonzero(ok)[::7]:
        assert dv[i] == pytest.approx(small_divisor(D, ctx, (2, 1), box.sites[i]), abs=1e-14)
    assert np.all(np.isnan(dv[~ok]))


@settings(max_examples=100)
@given(st.integers(-12, 12), st.integers(-12, 12), st.integers(-3, 3), st.integers(-3, 3))
def test_line_divisor_matches_site_divisor_for_free_frequencies(j1, j2, l1, l2):
    box = small_box(6, 6)
    if (l1, l2) == (0, 0) or not box.contains_site((j1, j2)):
        return
    i = box.index[(j1, j2)]
    v, b = tuple(box.v[i]), int(box.b[i])
    p = (l1, l2)
    if v[0] * p[1] - v[1] * p[0] != 0 or not box.contains_site((j1 - l1, j2 - l2)):
        return
    ctx = DivisorContext(GOLDEN, 1e-2, 2.5, 6)
    D = DiagonalData.free(box)
    assert toeplitz_divisor(D, ctx, p, v, b) == pytest.approx(small_divisor(D, ctx, p, (j1, j2)), abs=1e-12)


def test_line_divisor_signed_multiple():
    box = small_box(5, 6)
    ctx = DivisorContext((0.0, 0.0), 1e-2, 2.5, 6)
    D = DiagonalData.free(box)
    # pi(l) = -2 v: k = -2
    assert toeplitz_divisor(D, ctx, (-2, 0), (1, 0), 3) == -12 - 4
    with pytest.raises(ValueError, match="parallel"):
        toeplitz_divisor(D, ctx, (1, 1), (1, 0), 0)
    with pytest.raises(ValueError):
        toeplitz_divisor(D, ctx, (0, 0), (1, 0), 0)


def test_fiber_divisors_pointwise():
    box = small_box(5, 4)
    ctx = DivisorContext(GOLDEN, 1e-2, 2.5, 4)
    D = random_diagonal(np.random.default_rng(1), box)
    for ell in [(1, 0), (2, -2), (0, -3)]:
        fd, par = fiber_divisors(D, ctx, ell)
        for f in np.flatnonzero(par)[::5]:
            v, b = box.fib_v[f], int(box.fib_b[f])
            assert fd[f] == pytest.approx(toeplitz_divisor(D, ctx, ell, v, b), abs=1e-12)


def test_o0_membership_brute():
    om = GOLDEN
    gamma, K = 1e-2, 5
    rep = o0_membership(om, gamma, K)
    best = math.inf
    for a in range(-5, 6):
        for b in range(-5, 6):
            n = math.hypot(a, b)
            if 0 < n <= K:
                x = a * om[0] + b * om[1]
                val = min(abs(x + k) for k in range(-12, 13))
                best = min(best, val / (2 * gamma * n**-3))
    assert rep.worst_ratio == pytest.approx(best, rel=1e-12)
    assert rep.passed == (best >= 1)
    assert o0_membership((0.5, 0.25), 1e-2, 4).passed is False
    assert o0_membership(om, 0.0, 4).passed


def test_membership_gamma_zero_and_failure():
    box = small_box(5, 4)
    D = DiagonalData.free(box)
    assert resonance_membership(D, DivisorContext(GOLDEN, 0.0, 2.5, 4)).passed
    # omega = 0 makes every divisor with |j|^2 = |j - pi|^2 vanish
    rep = resonance_membership(D, DivisorContext((0.0, 0.0), 1e-3, 2.5, 4), include_o0=False)
    assert not rep.passed
    bad = rep.first_failure()
    assert bad.name == "C1" and bad.worst_value == 0.0


def _certified_context(rng, D, gamma, tau, K):
    while True:
        om = tuple(rng.uniform(-1, 1, 2))
        ctx = DivisorContext(om, gamma, tau, K)
        if resonance_membership(D, ctx).passed:
            return ctx


@pytest.mark.parametrize("seed", range(5))
def test_solve_homological_residual(seed):
    rng = np.random.default_rng(seed)
    box = small_box(6, 8)
    D = random_diagonal(rng, box)
    ctx = _certified_context(rng, D, 1e-3, 2.5, 4)
    P = random_qt(rng, box, 2, n_modes=6, width=0.4)
    S = solve_homological(D, ctx, P)
    res = homological_residual(D, ctx, S.materialize(), P.materialize())
    rel = order_norm(res, 0.2, OrderWeight(0, 0), lower=False).upper
    ref = order_norm(P.materialize(), 0.2, OrderWeight(0, 0), lower=False).upper
    assert rel <= 1e-10 * ref


def test_solve_homological_ignores_zero_and_high_modes():
    rng = np.random.default_rng(9)
    box = small_box(5, 6)
    D = random_diagonal(rng, box)
    ctx = _certified_context(rng, D, 1e-3, 2.5, 2)
    P = random_qt(rng, box, 2, n_modes=10)
    S = solve_homological(D, ctx, P)
    keys = set(S.T.values) | set(S.rem[0].harm) | set(S.rem[1].harm)
    assert all(0 < math.hypot(*e) <= 2 for e in keys)


def test_solve_homological_rejects():
    box = small_box(5, 4)
    D = DiagonalData.free(box)
    P = random_qt(np.random.default_rng(1), box, 2)
    with pytest.raises(SmallDivisorError) as exc:
        solve_homological(D, DivisorContext((0.0, 0.0), 1e-3, 2.5, 4), P)
    assert exc.value.witness[0] == "C1"
    with pytest.raises(ValueError, match="order-2"):
        solve_homological(D, DivisorContext(GOLDEN, 1e-3, 2.5, 4), random_qt(np.random.default_rng(1), box, 1))


def test_residual_of_zero():
    box = small_box(4, 4)
    ctx = DivisorContext(GOLDEN, 1e-2, 2.5, 4)
    D = DiagonalData.free(box)
    P = MomentumOperator.identity(box)
    assert homological_residual(D, ctx, MomentumOperator(box), P).is_zero()


def test_first_step_removes_potential():
    box = small_box(7, 8)
    V = random_potential(3, 1e-3, 4, KMAP)
    ctx = DivisorContext(GOLDEN, 1e-2, 2.5, 8)
    fs = first_step_solver(V, ctx, box)
    MV = multiplication_operator(V, box)
    S = fs.info["S0_op"]
    assert S.allclose(fs.S0.materialize(), 1e-15)
    res = homological_residual(DiagonalData.free(box), ctx, S, MV.scale(-1.0))
    assert res.max_abs() <= 1e-14 * MV.max_abs()
    # the quasi-Töplitz form of the first commutator is exact
    assert fs.info["X1"].materialize().allclose(commutator(MV, S), 1e-17)
    assert fs.info["lie"]["certified"]


def test_first_step_symbol_on_parallel_sites():
    box = small_box(7, 8)
    V = random_potential(4, 1e-3, 4, KMAP)
    ctx = DivisorContext(GOLDEN, 1e-2, 2.5, 8)
    fs = first_step_solver(V, ctx, box)
    T = lt_materialize(fs.S0.T)
    S = fs.info["S0_op"]
    for ell in V.coeffs:
        p = box.pi(ell)
        par = (box.v[:, 0] * p[1] - box.v[:, 1] * p[0]) == 0
        ok = box.row_mask(ell) & par
        assert np.allclose(T.harm[ell][ok], S.harm[ell][ok], rtol=1e-13, atol=0)


def test_first_step_zero_and_o0_failure():
    box = small_box(5, 4)
    ctx = DivisorContext(GOLDEN, 1e-2, 2.5, 4)
    fs = first_step_solver(TravelingWavePotential({}, KMAP), ctx, box)
    assert fs.S0.is_zero() and fs.P0.is_zero()
    V = random_potential(3, 1e-3, 3, KMAP)
    with pytest.raises(SmallDivisorError):
        first_step_solver(V, DivisorContext((0.5, 0.25), 1e-2, 2.5, 4), box)
