"""Lattice geometry: momentum map, lattice generators, site data and the
two arithmetic lemmas (a two-direction Cramer bound and uniqueness of the
almost-orthogonal generator) that drive the Töplitz bookkeeping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "MomentumMap",
    "GeometryParams",
    "SiteData",
    "TraviataReport",
    "bracket",
    "is_generator",
    "enumerate_generators",
    "site_data",
    "cramer_bound_holds",
    "traviata_check",
]


def bracket(x) -> float:
    """Japanese bracket sqrt(1 + |x|^2) for a scalar or vector."""
    a = np.asarray(x, dtype=float)
    return float(math.sqrt(1.0 + float(np.dot(a.ravel(), a.ravel()))))


@dataclass(frozen=True)
class MomentumMap:
    """Integer matrix whose rows k_1..k_d in Z^2 send a Fourier index to a site shift."""

    rows: tuple[tuple[int, int], ...]

    def __post_init__(self):
        rows = tuple(tuple(int(c) for c in r) for r in self.rows)
        if len(rows) == 0 or any(len(r) != 2 for r in rows):
            raise ValueError("momentum map rows must be a non-empty list of integer 2-vectors")
        if all(r == (0, 0) for r in rows):
            raise ValueError("momentum map is identically zero")
        object.__setattr__(self, "rows", rows)

    @classmethod
    def identity(cls, d: int = 2) -> "MomentumMap":
        if d != 2:
            raise ValueError("identity map is only defined for d = 2")
        return cls(((1, 0), (0, 1)))

    @property
    def d(self) -> int:
        return len(self.rows)

    @property
    def matrix(self) -> np.ndarray:
        """d x 2 integer matrix K; pi(l) = l @ K."""
        return np.array(self.rows, dtype=np.int64)

    def pi(self, ell) -> tuple[int, int]:
        e = tuple(int(x) for x in ell)
        if len(e) != self.d:
            raise ValueError(f"Fourier index has length {len(e)}, expected {self.d}")
        return (
            sum(e[i] * self.rows[i][0] for i in range(self.d)),
            sum(e[i] * self.rows[i][1] for i in range(self.d)),
        )

    def pi_array(self, ells: np.ndarray) -> np.ndarray:
        return np.asarray(ells, dtype=np.int64) @ self.matrix

    @property
    def c_const(self) -> float:
        """Constant c with |pi(l)| <= |l| / c for every l.

        Uses the largest singular value of K, which bounds the lattice supremum
        from above, so the inequality is certified."""
        return 1.0 / float(np.linalg.norm(self.matrix.astype(float), 2))


@dataclass(frozen=True)
class GeometryParams:
    delta: float
    threshold: int | None = None

    def __post_init__(self):
        if not (0.0 < self.delta < 0.5):
            raise ValueError("delta must lie in (0, 1/2)")
        if self.threshold is not None and self.threshold < 1:
            raise ValueError("threshold must be a positive integer")

    @property
    def mu(self) -> float:
        return 1.0 - 2.0 * self.delta

    @property
    def j_threshold(self) -> int:
        """Site threshold J_delta; defaults to ceil(4^(1/delta))."""
        if self.threshold is not None:
            return int(self.threshold)
        return int(math.ceil(4.0 ** (1.0 / self.delta) - 1e-9))

    @property
    def j_min(self) -> float:
        return 2.0 ** (1.0 / (2.0 * self.delta))


def is_generator(v) -> bool:
    v1, v2 = int(v[0]), int(v[1])
    if (v1, v2) == (0, 1):
        return True
    return v1 > 0 and math.gcd(v1, v2) == 1


@lru_cache(maxsize=256)
def _generators_upto(n2: int) -> tuple[tuple[int, int], ...]:
    # all generators with |v|^2 <= n2, lexicographic order
    r = int(math.isqrt(n2))
    out = []
    for v1 in range(0, r + 1):
        for v2 in range(-r, r + 1):
            if v1 * v1 + v2 * v2 <= n2 and is_generator((v1, v2)):
                out.append((v1, v2))
    out.sort()
    return tuple(out)


def enumerate_generators(radius: float) -> list[tuple[int, int]]:
    """Generators v with |v| <= radius, sorted lexicographically on (v1, v2)."""
    if radius < 1.0:
        return []
    n2 = int(math.floor(radius * radius + 1e-12))
    gens = _generators_upto(n2)
    r2 = radius * radius
    return [v for v in gens if v[0] * v[0] + v[1] * v[1] <= r2 * (1 + 1e-14)]


@dataclass(frozen=True)
class SiteData:
    j: tuple[int, int]
    v: tuple[int, int]
    b: int

    @property
    def bracket_j(self) -> float:
        return bracket(self.j)

    @property
    def bracket_b(self) -> float:
        return bracket(self.b)


@lru_cache(maxsize=200_000)
def _site_data(delta: float, j1: int, j2: int) -> SiteData:
    if j1 == 0 and j2 == 0:
        return SiteData((0, 0), (0, 1), 0)
    radius = math.hypot(j1, j2) ** delta
    best = None
    for v in enumerate_generators(radius):
        b = v[0] * j1 + v[1] * j2
        if best is None or abs(b) < abs(best[1]):
            best = (v, b)
    return SiteData((j1, j2), best[0], best[1])


def site_data(params: GeometryParams, j) -> SiteData:
    """Almost-orthogonal generator v(j) and b(j) = j . v(j).

    v(j) is the lexicographically first generator of norm <= |j|^delta
    minimising |v . j|."""
    return _site_data(float(params.delta), int(j[0]), int(j[1]))


def cramer_bound_holds(v, w, x, A: float, R: float) -> bool:
    """Check the two-direction bound: if |v|,|w| < R and both |x.v|, |x.w| < A
    then |x| < 2AR.  Returns True when the implication holds for this x."""
    v = (int(v[0]), int(v[1]))
    w = (int(w[0]), int(w[1]))
    if v == w:
        raise ValueError("directions must be distinct")
    if math.hypot(*v) >= R or math.hypot(*w) >= R:
        return True
    if max(abs(x[0] * v[0] + x[1] * v[1]), abs(x[0] * w[0] + x[1] * w[1])) >= A:
        return True
    return math.hypot(x[0], x[1]) < 2.0 * A * R


@dataclass
class TraviataReport:
    j: tuple[int, int]
    status: str  # "pass", "fail" or "not applicable"
    v: tuple[int, int]
    b: int
    witness: tuple | None = None
    detail: str = ""


def traviata_check(params: GeometryParams, j) -> TraviataReport:
    """Verify uniqueness of the almost-orthogonal direction at site j.

    Applicable when |j| > J_delta and |b(j)| < 2 |j|^mu.  Checks that every
    other generator w with |w| <= |j|^delta has |w.j| >= 2 <j>^mu, and that any
    nearby site h with a different direction forces |v(j)| > |j|^delta / 2."""
    j = (int(j[0]), int(j[1]))
    sd = site_data(params, j)
    nj = math.hypot(*j)
    mu = params.mu
    dl = params.delta
    if nj <= params.j_threshold or abs(sd.b) >= 2.0 * nj**mu:
        return TraviataReport(j, "not applicable", sd.v, sd.b)
    bound = 2.0 * bracket(j) ** mu
    for w in enumerate_generators(nj**dl):
        if w == sd.v:
            continue
        if abs(w[0] * j[0] + w[1] * j[1]) < bound:
            return TraviataReport(j, "fail", sd.v, sd.b, witness=("direction", w),
                                  detail="second generator with small product")
    vnorm = math.hypot(*sd.v)
    if vnorm > nj**dl / 2.0:
        return TraviataReport(j, "pass", sd.v, sd.b)
    # |j-h| < 2 max(|j|,|h|)^delta with |h| <= |j| + |j-h| gives a finite search radius
    r = 1.0
    while r < 2.0 * (nj + r) ** dl:
        r += 1.0
    ri = int(math.ceil(r))
    for d1 in range(-ri, ri + 1):
        for d2 in range(-ri, ri + 1):
            if d1 == 0 and d2 == 0:
                continue
            h = (j[0] + d1, j[1] + d2)
            nh = math.hypot(*h)
            if math.hypot(d1, d2) >= 2.0 * max(nj, nh) ** dl:
                continue
            if site_data(params, h).v != sd.v:
                return TraviataReport(j, "fail", sd.v, sd.b, witness=("neighbour", h),
                                      detail="direction changes nearby while |v(j)| is small")
    return TraviataReport(j, "pass", sd.v, sd.b)
