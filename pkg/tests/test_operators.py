import math

import numpy as np
import pytest
from factories import random_operator, small_box
from hypothesis import given, settings
from hypothesis import strategies as st

from qtkam.geometry import GeometryParams, MomentumMap
from qtkam.operators import (
    MomentumOperator,
    NormBound,
    OrderWeight,
    TruncationBox,
    bony_split,
    commutator,
    compose,
    decay_kernel_constant,
    fourier_ball,
    lipschitz_norm,
    majorant_matrix,
    majorant_norm,
    order_norm,
    project_band,
    selfadjoint_defect,
    seq_norm,
    site_box,
    smoothing_constant,
)

PHIS = [(0.0, 0.0), (0.7, -1.3), (2.1, 0.4)]


def test_truncation_validation():
    with pytest.raises(ValueError):
        TruncationBox(0, 3)
    with pytest.raises(ValueError):
        TruncationBox(3, -1)


def test_fourier_ball_counts():
    assert len(fourier_ball(1, 2)) == 5
    assert len(fourier_ball(2, 2)) == 13
    assert len(fourier_ball(1, 3)) == 7
    assert all(sum(x * x for x in e) <= 4 for e in fourier_ball(2, 2))


def test_site_box_counts():
    box = small_box(3, 3)
    assert box.n == 29
    assert box.contains_site((3, 0)) and not box.contains_site((3, 1))
    # every site fiber lies on the grid
    assert np.all(box.site_fiber >= 0)
    assert np.all(box.fib_v[box.site_fiber] == box.v)
    assert np.all(box.fib_b[box.site_fiber] == box.b)


def test_entries_roundtrip():
    box = small_box(4, 4)
    M = random_operator(np.random.default_rng(0), box)
    N = MomentumOperator.from_entries(box, M.entries())
    assert (M - N).is_zero()
    for (j, ell), val in list(M.entries().items())[:20]:
        assert M.entry(j, ell) == val


def test_out_of_box_columns_dropped():
    box = small_box(3, 3)
    # the row (3, 0) shifted by pi(1, 0) would need the column (2, 0): inside
    # the row (-3, 0) needs (-4, 0): outside, so it is masked
    M = MomentumOperator.from_entries(box, {((3, 0), (1, 0)): 1.0, ((-3, 0), (1, 0)): 1.0})
    assert M.nnz() == 1


def test_different_boxes_rejected():
    a, b = small_box(3, 3), small_box(4, 3)
    with pytest.raises(ValueError, match="different truncation"):
        MomentumOperator.identity(a) + MomentumOperator.identity(b)
    c = site_box(TruncationBox(3, 3), MomentumMap(((1, 0), (0, 1), (1, 1))), GeometryParams(0.3))
    with pytest.raises(ValueError, match="momentum maps"):
        MomentumOperator.identity(a) + MomentumOperator.identity(c)


@pytest.mark.parametrize("seed", range(4))
def test_compose_matches_dense(seed):
    rng = np.random.default_rng(seed)
    box = small_box(5, 6)
    M = random_operator(rng, box, radius=3)
    N = random_operator(rng, box, radius=3)
    P = compose(M, N)
    assert P.dropped == 0.0
    for phi in PHIS:
        ref = M.to_dense(phi) @ N.to_dense(phi)
        assert np.abs(P.to_dense(phi) - ref).max() <= 1e-12 * max(1.0, np.abs(ref).max())


def test_compose_reports_dropped_mass():
    box = small_box(4, 2)
    M = MomentumOperator.from_entries(box, {((0, 0), (2, 0)): 1.0})
    N = MomentumOperator.from_entries(box, {((-2, 0), (1, 0)): 0.5})
    P = compose(M, N)
    assert P.is_zero() and P.dropped == 0.5


def test_commutator_with_identity_vanishes():
    box = small_box(4, 4)
    M = random_operator(np.random.default_rng(2), box, radius=2)
    assert commutator(M, MomentumOperator.identity(box, 2.5)).max_abs() == 0.0
    assert compose(MomentumOperator.identity(box), M).allclose(M, 0.0)


def test_adjoint_is_conjugate_transpose():
    box = small_box(5, 5)
    M = random_operator(np.random.default_rng(3), box)
    for phi in PHIS:
        assert np.abs(M.adjoint().to_dense(phi) - M.to_dense(phi).conj().T).max() <= 1e-14
    assert M.adjoint().adjoint().allclose(M, 0.0)
    H = M + M.adjoint()
    assert selfadjoint_defect(H) <= 1e-15


def test_time_average_and_diagonal():
    box = small_box(4, 4)
    M = random_operator(np.random.default_rng(5), box, n_modes=13, radius=2)
    z = (0, 0)
    assert set(M.time_average().harm) <= {z}
    assert np.array_equal(M.diagonal_values(), M.harm.get(z, np.zeros(box.n)))


def test_band_and_bony_splits_sum_back():
    box = small_box(6, 6)
    M = random_operator(np.random.default_rng(6), box, n_modes=10)
    for K in (0, 1.5, 3):
        low, high = project_band(M, K, True), project_band(M, K, False)
        assert (low + high).allclose(M, 0.0)
        assert all(math.hypot(*e) <= K for e in low.harm)
    B, R = bony_split(M)
    assert (B + R).allclose(M, 0.0)
    with pytest.raises(ValueError):
        project_band(M, -1, True)


def _lower_reference(M, a, w, p):
    """Coordinate-vector lower bound written out with explicit loops."""
    box = M.box
    mu = box.geom.mu
    best = 0.0
    cols: dict = {}
    for (j, ell), val in M.entries().items():
        col = (j[0] - box.pi(ell)[0], j[1] - box.pi(ell)[1])
        jb = math.sqrt(1 + j[0] ** 2 + j[1] ** 2)
        i = box.index[j]
        rw = 1.0 if w is None else jb ** (mu * w.n) * box.bbr[i] ** w.m
        c = cols.setdefault(col, {})
        c[j] = c.get(j, 0.0) + abs(val) * math.exp(a * math.hypot(*ell)) * rw
    for col, u in cols.items():
        best = max(best, seq_norm(u, p) / (1 + math.sqrt(1 + col[0] ** 2 + col[1] ** 2) ** p))
    return best


@pytest.mark.parametrize("w", [None, OrderWeight(1, 0), OrderWeight(1, 1)])
def test_order_norm_lower_reference(w):
    box = small_box(5, 5)
    M = random_operator(np.random.default_rng(8), box, n_modes=6)
    nb = order_norm(M, 0.3, w, 1.0)
    assert nb.lower == pytest.approx(_lower_reference(M, 0.3, w, 1.0), rel=1e-12)
    assert nb.lower <= nb.upper


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_majorant_upper_bounds_action(seed):
    rng = np.random.default_rng(seed)
    box = small_box(4, 4)
    M = random_operator(rng, box, n_modes=5)
    a = 0.2
    up = majorant_norm(M, a).upper
    A = majorant_matrix(M, a)
    u = np.abs(rng.standard_normal(box.n)) * (rng.random(box.n) < 0.4)
    norm = lambda x: seq_norm({tuple(s): v for s, v in zip(box.sites.tolist(), x)}, 1.0)
    assert norm(A @ u) <= up * norm(u) * (1 + 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3))
def test_norm_triangle_and_homogeneity(seed, c):
    rng = np.random.default_rng(seed)
    box = small_box(4, 4)
    M, N = random_operator(rng, box), random_operator(rng, box)
    a = 0.3
    assert majorant_norm(M + N, a).upper <= (majorant_norm(M, a).upper + majorant_norm(N, a).upper) * (1 + 1e-12)
    assert majorant_norm(M.scale(c), a).upper == pytest.approx(abs(c) * majorant_norm(M, a).upper, rel=1e-12)


def test_norm_monotone_in_width_and_weight():
    box = small_box(5, 5)
    M = random_operator(np.random.default_rng(9), box)
    assert majorant_norm(M, 0.1).upper <= majorant_norm(M, 0.4).upper
    assert order_norm(M, 0.2, None).upper <= order_norm(M, 0.2, OrderWeight(1, 0)).upper
    assert majorant_norm(MomentumOperator.zero(box), 0.3) == NormBound(0.0, 0.0)
    with pytest.raises(ValueError):
        majorant_norm(M, -0.1)


def test_norm_bound_validation():
    with pytest.raises(ValueError):
        NormBound(1.0, 2.0)
    with pytest.raises(ValueError):
        OrderWeight(-1, 0)


def test_seq_norm_example():
    # l^1 part 3, h^1 part sqrt(1 * 1 + 3 * 4)
    assert seq_norm({(0, 0): 1.0, (1, 1): -2.0}, 1.0) == pytest.approx(3 + math.sqrt(13))
    assert seq_norm({}, 1.0) == 0.0


@pytest.mark.parametrize("p,sigma", [(1, 0.5), (2, 0.1), (0.5, 3.0), (3, 1.0)])
def test_smoothing_constant_brute(p, sigma):
    ref = max(math.exp(-sigma * k) * k**p for k in range(1, 2000))
    assert smoothing_constant(p, sigma) == pytest.approx(ref, rel=1e-12)


def test_smoothing_constant_validation():
    assert smoothing_constant(0, 1.0) == 1.0
    with pytest.raises(ValueError):
        smoothing_constant(1, 0)


def test_decay_kernel_constant_dominates():
    theta = 0.8
    kern = {(a, b): math.exp(-theta * math.hypot(a, b)) for a in range(-30, 31) for b in range(-30, 31)}
    assert 8 * seq_norm(kern, 1.0) <= decay_kernel_constant(1.0, theta) * (1 + 1e-12)


def test_lipschitz_norm():
    box = small_box(4, 4)
    M = random_operator(np.random.default_rng(1), box)
    const = lipschitz_norm([((0.1, 0.2), M), ((0.3, 0.2), M)], 0.2, 1.0)
    assert const.upper == pytest.approx(majorant_norm(M, 0.2).upper)
    lin = lipschitz_norm([((0.0, 0.0), M.scale(0)), ((0.5, 0.0), M)], 0.2, 0.1)
    assert lin.upper == pytest.approx(majorant_norm(M, 0.2).upper * (1 + 0.1 / 0.5))
    with pytest.raises(ValueError):
        lipschitz_norm([((0, 0), M)], 0.2, 1.0)
    with pytest.raises(ValueError):
        lipschitz_norm([((0, 0), M), ((0, 0), M)], 0.2, 1.0)


def test_identity_three_dimensional_map():
    km = MomentumMap(((1, 0), (0, 1), (1, 1)))
    box = site_box(TruncationBox(4, 3), km, GeometryParams(0.3))
    M = random_operator(np.random.default_rng(2), box, radius=2)
    N = random_operator(np.random.default_rng(3), box, radius=1)
    P = compose(M, N)
    for phi in [(0.3, -0.2, 1.1), (2.0, 0.5, -0.7)]:
        ref = M.to_dense(phi) @ N.to_dense(phi)
        assert np.abs(P.to_dense(phi) - ref).max() <= 1e-12 * max(1.0, np.abs(ref).max())
