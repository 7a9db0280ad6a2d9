"""Small divisors, resonance membership and the two homological solvers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .operators import MomentumOperator, SiteBox, fourier_ball, commutator
from .potentials import TravelingWavePotential, multiplication_operator
from .toeplitz import (
    DiagonalData,
    LineToeplitzSymbol,
    QuasiToeplitzOperator,
    ad_series,
    lt_materialize,
)

__all__ = [
    "DivisorContext",
    "DiagonalData",
    "SmallDivisorError",
    "SetReport",
    "MembershipReport",
    "small_divisor",
    "site_divisors",
    "toeplitz_divisor",
    "fiber_divisors",
    "resonance_membership",
    "o0_membership",
    "solve_homological",
    "homological_residual",
    "first_step_solver",
    "FirstStep",
]


class SmallDivisorError(ValueError):
    def __init__(self, msg, witness=None):
        super().__init__(msg)
        self.witness = witness


@dataclass(frozen=True)
class DivisorContext:
    omega: tuple
    gamma: float
    tau: float
    K: float

    def __post_init__(self):
        om = tuple(float(x) for x in self.omega)
        object.__setattr__(self, "omega", om)
        if self.gamma < 0 or self.tau <= 0 or self.K <= 0:
            raise ValueError("need gamma >= 0, tau > 0, K > 0")
        if any(abs(x) > 1 for x in om):
            raise ValueError("omega must lie in [-1, 1]^d")

    def om_dot(self, ell) -> float:
        return float(sum(o * e for o, e in zip(self.omega, ell)))


def _lnorm(ell) -> float:
    return math.sqrt(sum(x * x for x in ell))


def _cross(v, p) -> int:
    return int(v[0]) * int(p[1]) - int(v[1]) * int(p[0])


def site_divisors(D: DiagonalData, ctx: DivisorContext, ell) -> tuple[np.ndarray, np.ndarray]:
    """Vector of d(l, j) over the box and the mask of sites with j - pi(l) inside."""
    box = D.box
    sh = box.shift_sites(box.pi(ell))
    ok = sh >= 0
    Om = D.omega()
    out = np.full(box.n, np.nan)
    out[ok] = ctx.om_dot(ell) + Om[ok] - Om[sh[ok]]
    return out, ok


def small_divisor(D: DiagonalData, ctx: DivisorContext, ell, j) -> float:
    box = D.box
    j = (int(j[0]), int(j[1]))
    p = box.pi(ell)
    i = box.index.get(j)
    i2 = box.index.get((j[0] - p[0], j[1] - p[1]))
    if i is None or i2 is None:
        raise IndexError(f"site {j} or {(j[0] - p[0], j[1] - p[1])} outside the box")
    Om = D.omega()
    return ctx.om_dot(ell) + float(Om[i] - Om[i2])


def _parallel_ratio(v, p) -> int:
    vv = int(v[0]) ** 2 + int(v[1]) ** 2
    num = int(v[0]) * int(p[0]) + int(v[1]) * int(p[1])
    if num % vv != 0:
        raise AssertionError("pi(l)/v is not an integer multiple")
    return num // vv


def toeplitz_divisor(D: DiagonalData, ctx: DivisorContext, ell, v, b) -> float:
    """frak d(l, v, b) with the signed integer k = pi(l)/v."""
    box = D.box
    p = box.pi(ell)
    if p == (0, 0):
        raise ValueError("pi(l) = 0 has no line divisor")
    if _cross(v, p) != 0:
        raise ValueError("pi(l) is not parallel to v")
    k = _parallel_ratio(v, p)
    vp = int(v[0]) * p[0] + int(v[1]) * p[1]
    return (ctx.om_dot(ell) + 2 * k * int(b) - (p[0] ** 2 + p[1] ** 2)
            + D.a_at(v, b) - D.a_at(v, int(b) - vp))


def fiber_divisors(D: DiagonalData, ctx: DivisorContext, ell) -> tuple[np.ndarray, np.ndarray]:
    """frak d(l, v, b) over the fiber grid and the mask of fibers with v parallel to pi(l)."""
    box = D.box
    p = box.pi(ell)
    fv = box.fib_v
    par = (fv[:, 0] * p[1] - fv[:, 1] * p[0]) == 0
    vv = (fv**2).sum(axis=1)
    k = (fv[:, 0] * p[0] + fv[:, 1] * p[1]) // vv
    sh = box.shift_fibers(p)
    a = D.a_symbol
    a_sh = np.where(sh >= 0, a[np.where(sh >= 0, sh, 0)], 0.0)
    out = ctx.om_dot(ell) + 2.0 * k * box.fib_b - float(p[0] ** 2 + p[1] ** 2) + a - a_sh
    return np.where(par, out, np.nan), par


@dataclass
class SetReport:
    name: str
    passed: bool
    worst_ratio: float  # min |divisor| / threshold (inf when nothing checked)
    witness: tuple | None
    worst_value: float
    checked: int


@dataclass
class MembershipReport:
    sets: dict = field(default_factory=dict)
    K: float = 0.0
    box: str = ""

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.sets.values())

    def first_failure(self):
        for s in self.sets.values():
            if not s.passed:
                return s
        return None


def _update(state, ratio_vec, values, witness_fn):
    if ratio_vec.size == 0:
        return
    i = int(np.nanargmin(ratio_vec))
    r = float(ratio_vec[i])
    state["checked"] += int(np.count_nonzero(~np.isnan(ratio_vec)))
    if r < state["ratio"]:
        state["ratio"] = r
        state["witness"] = witness_fn(i)
        state["value"] = float(values[i])


def o0_membership(omega, gamma: float, K: float, d: int | None = None) -> SetReport:
    """|omega.l + k| >= 2 gamma |l|^{-(d+1)} for 0 < |l| <= K and all integers k;
    the nearest integer realizes the minimum over k."""
    om = np.asarray(omega, dtype=float)
    d = om.size if d is None else d
    ells = np.array([e for e in fourier_ball(K, om.size) if any(e)], dtype=np.int64)
    if ells.size == 0 or gamma == 0:
        return SetReport("O0", True, float("inf"), None, float("nan"), 0)
    x = ells @ om
    k = -np.round(x)
    val = np.abs(x + k)
    thr = 2.0 * gamma * np.sqrt((ells**2).sum(axis=1)) ** (-(d + 1))
    ratio = val / thr
    i = int(np.argmin(ratio))
    return SetReport("O0", bool(ratio[i] >= 1.0), float(ratio[i]),
                     (tuple(int(t) for t in ells[i]), int(k[i])), float(val[i]), int(ells.shape[0]))


def resonance_membership(D: DiagonalData, ctx: DivisorContext, include_o0: bool = True) -> MembershipReport:
    box = D.box
    K = min(ctx.K, box.trunc.fourier_radius)
    rep = MembershipReport(K=K, box=repr(box))
    if include_o0:
        rep.sets["O0"] = o0_membership(ctx.omega, ctx.gamma, K, box.d)
    if ctx.gamma == 0:
        for name in ("C1", "C2"):
            rep.sets[name] = SetReport(name, True, float("inf"), None, float("nan"), 0)
        return rep
    s1 = {"ratio": float("inf"), "witness": None, "value": float("nan"), "checked": 0}
    s2 = {"ratio": float("inf"), "witness": None, "value": float("nan"), "checked": 0}
    for ell in fourier_ball(K, box.d):
        if not any(ell):
            continue
        ln = _lnorm(ell)
        thr1 = ctx.gamma * ln ** (-ctx.tau)
        dv, ok = site_divisors(D, ctx, ell)
        r1 = np.where(ok, np.abs(dv) / thr1, np.nan)
        if ok.any():
            _update(s1, r1, dv, lambda i, ell=ell: (ell, tuple(int(x) for x in box.sites[i])))
        if box.pi(ell) != (0, 0):
            fd, par = fiber_divisors(D, ctx, ell)
            if par.any():
                r2 = np.where(par, np.abs(fd) / (2.0 * thr1), np.nan)
                _update(s2, r2, fd, lambda i, ell=ell: (ell, tuple(int(x) for x in box.fib_v[i]),
                                                        int(box.fib_b[i])))
    for name, s in (("C1", s1), ("C2", s2)):
        rep.sets[name] = SetReport(name, s["ratio"] >= 1.0, s["ratio"], s["witness"], s["value"],
                                   s["checked"])
    return rep


def _require(rep: MembershipReport):
    bad = rep.first_failure()
    if bad is not None:
        raise SmallDivisorError(f"small divisor violation in {bad.name}: witness {bad.witness}, "
                                f"ratio {bad.worst_ratio:.3e}", (bad.name, bad.witness))


def solve_homological(D: DiagonalData, ctx: DivisorContext, P: QuasiToeplitzOperator,
                      check: bool = True) -> QuasiToeplitzOperator:
    """S with -i dS/dt + [D, S] = Pi_{0<|l|<=K} P, kept in quasi-Töplitz form.

    Symbol part: regions with pi(l) = 0 (divide by omega.l) or v parallel to
    pi(l) (divide by the line divisor).  Class (1,1): the line/site divisor
    mismatch on parallel sites, non-parallel short modes, and P^(1)/d.
    Class (2,0): non-parallel long modes and P^(2)/d."""
    if P.order != 2:
        raise ValueError("homological equation expects an order-2 operator")
    box = P.box
    if D.box is not box:
        raise ValueError("diagonal data lives on a different box")
    if check:
        _require(resonance_membership(D, ctx, include_o0=False))
    K = ctx.K
    keys = set(P.T.values) | set(P.rem[0].harm) | set(P.rem[1].harm)
    sym, s1, s2 = {}, {}, {}
    c = box.c
    thr_site = c * box.jbr**box.geom.delta
    for ell in sorted(keys):
        ln = _lnorm(ell)
        if ln == 0 or ln > K * (1 + 1e-14):
            continue
        p = box.pi(ell)
        dv, ok = site_divisors(D, ctx, ell)
        dsafe = np.where(ok, dv, 1.0)
        if ok.any() and np.any(dsafe[ok] == 0):
            raise SmallDivisorError("vanishing divisor", (ell,))
        PT = P.T.values.get(ell)
        p1 = P.rem[0].harm.get(ell)
        p2 = P.rem[1].harm.get(ell)
        r1 = np.zeros(box.n, dtype=complex)
        r2 = np.zeros(box.n, dtype=complex)
        if p1 is not None:
            r1 += np.where(ok, p1 / dsafe, 0.0)
        if p2 is not None:
            r2 += np.where(ok, p2 / dsafe, 0.0)
        if PT is not None:
            PTs = np.where(ok, PT[box.site_fiber], 0.0)
            if p == (0, 0):
                sym[ell] = PT / ctx.om_dot(ell)
            else:
                fd, par = fiber_divisors(D, ctx, ell)
                if np.any(fd[par] == 0):
                    raise SmallDivisorError("vanishing line divisor", (ell,))
                fsafe = np.where(par, fd, 1.0)
                sym[ell] = np.where(par, PT / fsafe, 0.0)
                vs = box.v
                par_site = (vs[:, 0] * p[1] - vs[:, 1] * p[0]) == 0
                a1 = par_site & ok
                a2 = (~par_site) & ok & (ln < thr_site)
                a3 = (~par_site) & ok & ~(ln < thr_site)
                fs = fsafe[box.site_fiber]
                r1 += np.where(a1, PTs / dsafe - PTs / fs, 0.0)
                r1 += np.where(a2, PTs / dsafe, 0.0)
                r2 += np.where(a3, PTs / dsafe, 0.0)
        if np.any(r1 != 0):
            s1[ell] = r1
        if np.any(r2 != 0):
            s2[ell] = r2
    T = LineToeplitzSymbol(box, sym, P.width)
    return QuasiToeplitzOperator(T, [MomentumOperator(box, s1), MomentumOperator(box, s2)], 2,
                                 P.width)


def homological_residual(D: DiagonalData, ctx: DivisorContext, S: MomentumOperator,
                         P: MomentumOperator) -> MomentumOperator:
    """-i dS/dt + [D, S] - Pi_{0<|l|<=K} P, with [D, S] formed by operator products."""
    box = S.box
    dt = {ell: ctx.om_dot(ell) * vec for ell, vec in S.harm.items()}
    out = MomentumOperator(box, dt) + commutator(D.as_operator(), S)
    low = {ell: v for ell, v in P.harm.items() if 0 < _lnorm(ell) <= ctx.K * (1 + 1e-14)}
    return out - MomentumOperator(box, low)


@dataclass
class FirstStep:
    S0: QuasiToeplitzOperator
    P0: QuasiToeplitzOperator
    info: dict


def _first_step_symbol(box: SiteBox, ctx: DivisorContext, V: TravelingWavePotential) -> dict:
    """Symbol of S0 on fibers with v parallel to pi(l): -V(l) / (omega.l + 2kb - |pi|^2)."""
    sym = {}
    fv = box.fib_v
    vv = (fv**2).sum(axis=1)
    for ell, c in V.coeffs.items():
        p = box.pi(ell)
        par = (fv[:, 0] * p[1] - fv[:, 1] * p[0]) == 0
        if not par.any():
            continue
        k = (fv[:, 0] * p[0] + fv[:, 1] * p[1]) // vv
        den = ctx.om_dot(ell) + 2.0 * k * box.fib_b - (p[0] ** 2 + p[1] ** 2)
        sym[ell] = np.where(par, -c / np.where(par, den, 1.0), 0.0)
    return sym


def _commutator_symbol(box: SiteBox, ctx: DivisorContext, V: TravelingWavePotential) -> dict:
    """Symbol part of [S0, M_V]: the chains whose second mode pi(l2) is parallel to v.

    sum 2 (pi1.pi2) V(l1) V(l2) / ((omega.l2 + 2 k2 b - |pi2|^2)(omega.l2 + 2 k2 b - 2 pi1.pi2 - |pi2|^2))."""
    L = box.trunc.fourier_radius
    fv = box.fib_v
    vv = (fv**2).sum(axis=1)
    out: dict = {}
    for l2, c2 in V.coeffs.items():
        p2 = box.pi(l2)
        par = (fv[:, 0] * p2[1] - fv[:, 1] * p2[0]) == 0
        if not par.any():
            continue
        k2 = (fv[:, 0] * p2[0] + fv[:, 1] * p2[1]) // vv
        base = ctx.om_dot(l2) + 2.0 * k2 * box.fib_b - (p2[0] ** 2 + p2[1] ** 2)
        for l1, c1 in V.coeffs.items():
            ell = tuple(a + b for a, b in zip(l1, l2))
            if _lnorm(ell) > L * (1 + 1e-14):
                continue
            p1 = box.pi(l1)
            dot = p1[0] * p2[0] + p1[1] * p2[1]
            if dot == 0:
                continue
            den = base * (base - 2.0 * dot)
            term = np.where(par, 2.0 * dot * c1 * c2 / np.where(par, den, 1.0), 0.0)
            out[ell] = out[ell] + term if ell in out else term
    return out


def first_step_solver(V: TravelingWavePotential, ctx: DivisorContext, box: SiteBox,
                      max_terms: int = 12, force: bool = False) -> FirstStep:
    """Remove the potential at first order: S0 = -V / (omega.l + |j|^2 - |j - pi(l)|^2),
    then P0 = sum_{h>=1} h (ad S0)^h M_V / (h+1)!."""
    a_pot = V.width_a
    a0 = a_pot / 4.0
    aS = a_pot / 3.0
    o0 = o0_membership(ctx.omega, ctx.gamma, min(ctx.K, box.trunc.fourier_radius), box.d)
    if not o0.passed:
        raise SmallDivisorError(f"omega outside O0: witness {o0.witness}", ("O0", o0.witness))
    if V.is_zero():
        z = QuasiToeplitzOperator.zero(box, 1, aS)
        return FirstStep(z, QuasiToeplitzOperator.zero(box, 2, a0),
                         {"o0": o0, "lie": None, "dropped": 0.0})
    MV = multiplication_operator(V, box)
    free = DiagonalData.free(box)
    harm = {}
    for ell, c in V.coeffs.items():
        dv, ok = site_divisors(free, ctx, ell)
        harm[ell] = np.where(ok, -c / np.where(ok, dv, 1.0), 0.0)
    S0op = MomentumOperator(box, harm)
    T0 = LineToeplitzSymbol(box, _first_step_symbol(box, ctx, V), aS)
    rest = S0op - lt_materialize(T0)
    # split the non-symbol entries into the long-mode/small-site part and the rest
    thr = box.c * box.jbr**box.geom.delta
    small_site = box.jbr <= box.geom.j_min
    Rh, Ph = {}, {}
    for ell, vec in rest.harm.items():
        long = (_lnorm(ell) >= thr) | small_site
        Rh[ell] = np.where(long, vec, 0.0)
        Ph[ell] = np.where(long, 0.0, vec)
    R = MomentumOperator(box, Rh)
    Pp = MomentumOperator(box, Ph)
    S0 = QuasiToeplitzOperator(T0, [R + Pp], 1, aS)
    # (ad S0) M_V = [M_V, S0] = -[S0, M_V]
    comm = commutator(MV, S0op)
    Tc = LineToeplitzSymbol(box, _commutator_symbol(box, ctx, V), a0).scale(-1.0)
    Tc.width = a0
    remc = comm - lt_materialize(Tc)
    X1 = QuasiToeplitzOperator(Tc, [MomentumOperator(box), remc], 2, a0)
    P0, lie = ad_series(X1, S0, lambda k: (k + 1) / math.factorial(k + 2), max_terms,
                        force=force)
    P0 = P0.with_width(a0)
    info = {"o0": o0, "lie": lie, "dropped": comm.dropped + lie.get("dropped", 0.0),
            "S0_R": R, "S0_P": Pp, "S0_op": S0op, "X1": X1}
    return FirstStep(S0, P0, info)
