import math

import numpy as np
import pytest
from factories import KMAP, small_box

from qtkam.geometry import MomentumMap
from qtkam.operators import majorant_norm, selfadjoint_defect
from qtkam.potentials import (
    TravelingWavePotential,
    admissible_modes,
    covariance_check,
    multiplication_bound,
    multiplication_operator,
    potential_norm,
    random_potential,
    tail_bound,
)


def test_zero_potential_norm():
    assert potential_norm(TravelingWavePotential({}, KMAP)) == 0.0


def test_single_pair_norm():
    c = 0.3 - 0.4j
    V = TravelingWavePotential({(2, -2): c, (-2, 2): c.conjugate()}, KMAP, 1.0, 2.0)
    n = math.sqrt(8)
    assert potential_norm(V) == pytest.approx(math.sqrt(2) * abs(c) * math.exp(n) * (1 + n * n), rel=1e-14)


def test_norm_resummation():
    V = random_potential(3, 0.7, 6, KMAP, 0.8, 1.5)
    tot = 0.0
    for ell, c in V.coeffs.items():
        n2 = sum(x * x for x in ell)
        tot += math.exp(2 * 0.8 * math.sqrt(n2)) * abs(c) ** 2 * (1 + n2) ** 1.5
    assert potential_norm(V) == pytest.approx(math.sqrt(tot), rel=1e-12)


def test_invariants_rejected():
    with pytest.raises(ValueError, match="gauge"):
        TravelingWavePotential({(1, 0): 1.0, (-1, 0): 1.0}, KMAP)
    with pytest.raises(ValueError, match="reality"):
        TravelingWavePotential({(1, -1): 1j, (-1, 1): 1j}, KMAP)
    with pytest.raises(ValueError):
        TravelingWavePotential({}, KMAP, smoothness_p=0.5)
    with pytest.raises(ValueError):
        TravelingWavePotential({}, KMAP, width_a=0.0)


def test_random_potential_examples():
    assert random_potential(1, 0.0, 6, KMAP).is_zero()
    V = random_potential(7, 1e-3, 6, KMAP)
    assert potential_norm(V) == pytest.approx(1e-3, rel=1e-12)
    assert V == random_potential(7, 1e-3, 6, KMAP)
    for ell in V.coeffs:
        assert sum(ell) == 0 and KMAP.pi(ell) != (0, 0)


def test_random_potential_empty_support():
    # with rows (1,1),(1,1) every gauge mode (l, -l) has pi = 0
    km = MomentumMap(((1, 1), (1, 1)))
    assert admissible_modes(5, km) == []
    with pytest.raises(ValueError, match="empty admissible support"):
        random_potential(0, 1.0, 5, km)


def test_multiplication_operator_readout():
    box = small_box(5, 5)
    assert multiplication_operator(TravelingWavePotential({}, KMAP), box).is_zero()
    c = 0.2 + 0.1j
    V = TravelingWavePotential({(1, -1): c, (-1, 1): c.conjugate()}, KMAP)
    M = multiplication_operator(V, box)
    for (j, ell), val in M.entries().items():
        assert val == (c if ell == (1, -1) else c.conjugate())
        p = KMAP.pi(ell)
        assert box.contains_site((j[0] - p[0], j[1] - p[1]))


def test_multiplication_selfadjoint_and_gauge():
    box = small_box(6, 6)
    V = random_potential(11, 1.0, 4, KMAP)
    M = multiplication_operator(V, box)
    assert selfadjoint_defect(M) == 0.0
    assert selfadjoint_defect(M.scale(1j)) > 0
    assert all(sum(ell) == 0 for ell in M.harm)


def test_multiplication_commutes_with_enlargement():
    V = random_potential(5, 1.0, 4, KMAP)
    small, big = small_box(4, 6), small_box(7, 6)
    Ms = multiplication_operator(V, small).entries()
    Mb = multiplication_operator(V, big).entries()
    for key, val in Ms.items():
        assert Mb[key] == val


def test_multiplication_bound():
    box = small_box(6, 8)
    V = random_potential(2, 1.0, 5, KMAP)
    M = multiplication_operator(V, box)
    for a in (0.1, 0.5, 0.8):
        assert majorant_norm(M, a).upper <= multiplication_bound(V, a) * (1 + 1e-12)


def test_tail_bound_decreases():
    V = random_potential(2, 1.0, 5, KMAP)
    assert tail_bound(V, 0.2) < tail_bound(V, 0.6) <= potential_norm(V)


def test_covariance_trivial_cases():
    box = small_box(4, 4)
    V = random_potential(9, 0.5, 4, KMAP)
    assert covariance_check(V, (0.3, 0.1), (0.0, 0.0), 0.0, box) == 0.0
    assert covariance_check(TravelingWavePotential({}, KMAP), (1, 2), (0.5, 0.1), 0.3, box) == 0.0


def test_covariance_random():
    box = small_box(5, 5)
    rng = np.random.default_rng(4)
    worst = 0.0
    for k in range(10):
        V = random_potential(int(rng.integers(1 << 30)), 1.0, 4, KMAP)
        phi, zeta = rng.uniform(-np.pi, np.pi, 2), rng.uniform(-np.pi, np.pi, 2)
        worst = max(worst, covariance_check(V, phi, zeta, float(rng.uniform(-3, 3)), box))
    assert worst <= 1e-12
