"""Gauge invariant traveling-wave potentials and their multiplication operators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import MomentumMap
from .operators import MomentumOperator, SiteBox, fourier_ball

__all__ = [
    "TravelingWavePotential",
    "admissible_modes",
    "potential_norm",
    "random_potential",
    "multiplication_operator",
    "multiplication_bound",
    "tail_bound",
    "covariance_check",
]


def _is_admissible(ell, kmap: MomentumMap) -> bool:
    return sum(ell) == 0 and kmap.pi(ell) != (0, 0)


@dataclass(frozen=True)
class TravelingWavePotential:
    coeffs: dict
    kmap: MomentumMap
    width_a: float = 1.0
    smoothness_p: float = 2.0
    support_radius: float = field(default=0.0)

    def __post_init__(self):
        if self.width_a <= 0:
            raise ValueError("analyticity width must be positive")
        if self.smoothness_p <= self.kmap.d / 2:
            raise ValueError("smoothness must exceed d/2")
        clean = {}
        for ell, c in self.coeffs.items():
            ell = tuple(int(x) for x in ell)
            if len(ell) != self.kmap.d:
                raise ValueError("Fourier index of wrong dimension")
            c = complex(c)
            if c == 0:
                continue
            if not _is_admissible(ell, self.kmap):
                raise ValueError(f"mode {ell} violates the gauge/momentum constraint")
            clean[ell] = c
        for ell, c in clean.items():
            neg = tuple(-x for x in ell)
            if clean.get(neg, 0j) != c.conjugate():
                raise ValueError(f"reality condition fails at {ell}")
        object.__setattr__(self, "coeffs", dict(sorted(clean.items())))
        rad = max((math.sqrt(sum(x * x for x in e)) for e in clean), default=0.0)
        object.__setattr__(self, "support_radius", max(float(self.support_radius), rad))

    @property
    def d(self) -> int:
        return self.kmap.d

    def is_zero(self) -> bool:
        return not self.coeffs

    def scaled(self, factor: float) -> "TravelingWavePotential":
        return TravelingWavePotential({k: factor * v for k, v in self.coeffs.items()},
                                      self.kmap, self.width_a, self.smoothness_p,
                                      self.support_radius)


def admissible_modes(radius: float, kmap: MomentumMap) -> list[tuple[int, ...]]:
    return [e for e in fourier_ball(radius, kmap.d) if _is_admissible(e, kmap)]


def potential_norm(V: TravelingWavePotential) -> float:
    a, p = V.width_a, V.smoothness_p
    tot = 0.0
    for ell, c in V.coeffs.items():
        n2 = sum(x * x for x in ell)
        tot += math.exp(2 * a * math.sqrt(n2)) * abs(c) ** 2 * (1.0 + n2) ** p
    return math.sqrt(tot)


def random_potential(seed: int, epsilon: float, support_radius: float, kmap: MomentumMap,
                     width_a: float = 1.0, smoothness_p: float = 2.0) -> TravelingWavePotential:
    """Gaussian modes shaped by e^{-a|l|}<l>^{-p}, symmetrized and rescaled to norm epsilon."""
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    modes = admissible_modes(support_radius, kmap)
    if not modes:
        raise ValueError("empty admissible support")
    if epsilon == 0:
        return TravelingWavePotential({}, kmap, width_a, smoothness_p, support_radius)
    rng = np.random.default_rng(seed)
    half = [e for e in modes if e > tuple(-x for x in e)]
    coeffs = {}
    for ell in half:
        n = math.sqrt(sum(x * x for x in ell))
        shape = math.exp(-width_a * n) * (1.0 + n * n) ** (-smoothness_p / 2)
        z = complex(rng.standard_normal(), rng.standard_normal()) * shape
        coeffs[ell] = z
        coeffs[tuple(-x for x in ell)] = z.conjugate()
    V = TravelingWavePotential(coeffs, kmap, width_a, smoothness_p, support_radius)
    return V.scaled(epsilon / potential_norm(V))


def multiplication_operator(V: TravelingWavePotential, box: SiteBox) -> MomentumOperator:
    if V.kmap != box.kmap:
        raise ValueError("potential and box carry different momentum maps")
    harm = {ell: np.full(box.n, c, dtype=complex) for ell, c in V.coeffs.items()}
    return MomentumOperator(box, harm)


def tail_bound(V: TravelingWavePotential, a: float) -> float:
    """Size of the neglected modes beyond the support radius at width a < width_a."""
    return math.exp(-(V.width_a - a) * V.support_radius) * potential_norm(V)


def multiplication_bound(V: TravelingWavePotential, a: float, p: float = 1.0,
                         radius: int = 60) -> float:
    """Upper bound for |M_V|_a in terms of ||V||: every coefficient obeys
    |V(l)| <= ||V|| e^{-A|l|}<l>^{-P}, and each mode contributes one shifted delta."""
    if not a < V.width_a:
        raise ValueError("need a < width of the potential")
    theta = V.width_a - a
    c = V.kmap.c_const
    tot = 0.0
    for ell in fourier_ball(radius, V.d):
        n = math.sqrt(sum(x * x for x in ell))
        w = math.exp(-theta * n) * (1.0 + n * n) ** (-V.smoothness_p / 2)
        tot += w * (1.0 + (1.0 + (n / c) ** 2) ** (p / 2))
    return 2.0 ** (2 * p + 1) * tot * potential_norm(V)


def covariance_check(V: TravelingWavePotential, phi, zeta, t: float, box: SiteBox) -> float:
    """Largest defect of the translation and gauge covariance identities of M_V."""
    phi = np.asarray(phi, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    M = multiplication_operator(V, box)
    Kz = box.kmap.matrix.astype(float) @ zeta
    tau = np.exp(1j * (box.sites.astype(float) @ zeta))
    A0 = M.to_dense(phi)
    A1 = M.to_dense(phi + Kz)
    d1 = np.abs(A1 * tau[None, :] - tau[:, None] * A0).max(initial=0.0)
    A2 = M.to_dense(phi + t * np.ones(V.d))
    d2 = np.abs(A2 * np.exp(1j * t) - np.exp(1j * t) * A0).max(initial=0.0)
    return float(max(d1, d2))
