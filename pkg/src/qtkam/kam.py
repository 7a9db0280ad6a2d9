"""KAM iteration: repeated homological steps on D + P until P is negligible."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .homological import (
    DivisorContext,
    SmallDivisorError,
    first_step_solver,
    resonance_membership,
    solve_homological,
)
from .operators import SiteBox
from .potentials import TravelingWavePotential, potential_norm
from .toeplitz import (
    DiagonalData,
    LieSeriesError,
    QuasiToeplitzOperator,
    ad_series,
    diagonal_decompose,
    qt_commutator,
    qt_norm,
)

__all__ = [
    "KamSchedule",
    "KamState",
    "KamAbort",
    "ReducedSpectrum",
    "kam_step",
    "run_reduction",
    "reduced_spectrum",
    "contraction_exponents",
    "fitted_contraction_exponent",
]


class KamAbort(RuntimeError):
    def __init__(self, msg, step=None, reason=None, witness=None):
        super().__init__(msg)
        self.step = step
        self.reason = reason
        self.witness = witness


@dataclass(frozen=True)
class KamSchedule:
    a0: float
    K0: float
    eps0: float
    tau: float
    n_max: int = 6

    def __post_init__(self):
        if self.a0 <= 0 or self.K0 < 1 or self.eps0 <= 0 or self.tau <= 0 or self.n_max < 0:
            raise ValueError("invalid schedule parameters")
        if not self.eps0 < self.K0 ** (-3 * self.tau - 2):
            raise ValueError(f"eps0={self.eps0} must be below K0^(-3tau-2)="
                             f"{self.K0 ** (-3 * self.tau - 2):.3e}")

    def a(self, n: int) -> float:
        return self.a0 * (1.0 - sum(2.0 ** (-k - 2) for k in range(n)))

    def K(self, n: int) -> float:
        return self.K0 * 4.0**n

    def eps(self, n: int) -> float:
        return self.eps0 * math.exp(-(1.5**n) + 1.0)


@dataclass
class KamState:
    n: int
    D: DiagonalData
    P: QuasiToeplitzOperator
    omega: tuple
    transforms: list = field(default_factory=list)
    log: list = field(default_factory=list)


def kam_step(state: KamState, schedule: KamSchedule, gamma: float, p: float = 1.0,
             max_terms: int = 12) -> KamState:
    """One conjugation by e^S with S solving the homological equation for -P."""
    n = state.n + 1
    K = schedule.K(n - 1)
    a = schedule.a(n - 1)
    a_new = schedule.a(n)
    D, P = state.D, state.P.with_width(a)
    box = P.box
    ctx = DivisorContext(state.omega, gamma, schedule.tau, K)
    om_norm = qt_norm(D.as_qt(a), p)
    p_norm = qt_norm(P, p)
    entry = {"n": n, "K": K, "a": a, "a_next": a_new, "qt_P_in": p_norm, "qt_Omega": om_norm,
             "omega_small": 16 * om_norm <= gamma,
             "step_small": 16 * p_norm <= gamma * K ** (-3 * schedule.tau - 1)}
    if not entry["omega_small"]:
        raise KamAbort(f"step {n}: 16|Omega~| = {16 * om_norm:.3e} exceeds gamma", n, "smallness")
    rep = resonance_membership(D, ctx, include_o0=False)
    entry["membership"] = {k: (s.passed, s.worst_ratio) for k, s in rep.sets.items()}
    bad = rep.first_failure()
    if bad is not None:
        raise KamAbort(f"step {n}: small divisor violation in {bad.name} at {bad.witness}", n,
                       "membership", (bad.name, bad.witness))
    if P.is_zero():
        entry.update(qt_S=0.0, qt_P=0.0, drift=0.0, lie=None)
        log = state.log + [entry]
        return KamState(n, D, QuasiToeplitzOperator.zero(box, 2, a_new), state.omega,
                        state.transforms + [QuasiToeplitzOperator.zero(box, 2, a)], log)
    S = solve_homological(D, ctx, -P, check=False)
    PS = qt_commutator(P, S)
    Y = PS - P.project(K, keep_low=True, exclude_zero=True)
    try:
        series, lie = ad_series(Y, S, lambda k: 0.0 if k == 0 else 1.0 / math.factorial(k + 1),
                                max_terms, p=p)
    except LieSeriesError as exc:
        raise KamAbort(f"step {n}: {exc}", n, "lie") from exc
    P_new = (P.project(K, keep_low=False) + PS + series).with_width(a_new)
    dD = diagonal_decompose(P.project(0.0, keep_low=True))
    D_new = D.plus(dD)
    drift = float(np.abs(D_new.omega_tilde() - D.omega_tilde()).max(initial=0.0))
    entry.update(qt_S=qt_norm(S, p), qt_P=qt_norm(P_new, p), drift=drift,
                 drift_ok=drift <= p_norm * (1 + 1e-12),
                 lie={k: v for k, v in lie.items() if k != "dropped"},
                 dropped=PS.info.get("dropped", 0.0) + lie.get("dropped", 0.0))
    return KamState(n, D_new, P_new, state.omega, state.transforms + [S], state.log + [entry])


@dataclass
class ReducedSpectrum:
    box: SiteBox
    D: DiagonalData
    kappa: float
    omega: tuple

    @property
    def Omega(self) -> np.ndarray:
        return self.D.omega()

    @property
    def a_symbol(self) -> np.ndarray:
        return self.D.a_symbol

    @property
    def r1(self) -> np.ndarray:
        return self.D.r1

    @property
    def r2(self) -> np.ndarray:
        return self.D.r2

    @property
    def varpi(self) -> np.ndarray:
        box = self.box
        return self.D.a_symbol * box.fib_bbr**2 * np.exp(self.kappa * box.fib_vnorm)

    @property
    def theta1(self) -> np.ndarray:
        return self.D.r1 * self.box.bbr * self.box.jbr**self.box.geom.mu

    @property
    def theta2(self) -> np.ndarray:
        return self.D.r2 * self.box.jbr ** (2 * self.box.geom.mu)

    def reconstruct(self) -> np.ndarray:
        box = self.box
        f = box.site_fiber
        mu = box.geom.mu
        return (box.jsq + self.varpi[f] * np.exp(-self.kappa * box.vnorm) / box.bbr**2
                + self.theta1 / (box.bbr * box.jbr**mu) + self.theta2 / box.jbr ** (2 * mu))

    def expansion_bound(self) -> float:
        return float(np.abs(self.varpi).max(initial=0.0) + np.abs(self.theta1).max(initial=0.0)
                     + np.abs(self.theta2).max(initial=0.0))

    def r_total(self) -> np.ndarray:
        return self.D.r1 + self.D.r2


def reduced_spectrum(D: DiagonalData, V: TravelingWavePotential | None, omega) -> ReducedSpectrum:
    a_pot = V.width_a if V is not None else 1.0
    kappa = (a_pot / 8.0) * D.box.c
    return ReducedSpectrum(D.box, D, kappa, tuple(float(x) for x in omega))


def contraction_exponents(eps_hat: list, floor: float = 0.0) -> list:
    out = []
    for x, y in zip(eps_hat[:-1], eps_hat[1:]):
        if 0 < x < 1 and 0 < y < 1 and y > floor:
            out.append(math.log(y) / math.log(x))
    return out


def fitted_contraction_exponent(eps_hat: list, floor: float = 0.0) -> float | None:
    """Least-squares slope through the origin of log eps_{n+1} against log eps_n."""
    xs, ys = [], []
    for x, y in zip(eps_hat[:-1], eps_hat[1:]):
        if 0 < x < 1 and 0 < y < 1 and y > floor:
            xs.append(math.log(x))
            ys.append(math.log(y))
    if not xs:
        return None
    xs, ys = np.array(xs), np.array(ys)
    return float(xs @ ys / (xs @ xs))


def _negligible(x: float, floor: float, gamma: float) -> bool:
    return x == 0.0 or x < floor * gamma


def run_reduction(V: TravelingWavePotential, omega, schedule: KamSchedule, gamma: float,
                  box: SiteBox, floor: float = 1e-13, p: float = 1.0):
    """First step plus KAM steps; returns (spectrum, state, status)."""
    omega = tuple(float(x) for x in omega)
    status = {"converged": False, "aborted": False, "abort_step": None, "reason": None,
              "witness": None, "steps": 0, "V_norm": potential_norm(V)}
    ctx0 = DivisorContext(omega, gamma, schedule.tau, box.trunc.fourier_radius)
    D0 = DiagonalData.free(box)
    try:
        fs = first_step_solver(V, ctx0, box)
    except SmallDivisorError as exc:
        status.update(aborted=True, abort_step=0, reason="O0", witness=exc.witness)
        state = KamState(0, D0, QuasiToeplitzOperator.zero(box, 2, schedule.a0), omega)
        return reduced_spectrum(D0, V, omega), state, status
    except LieSeriesError as exc:
        status.update(aborted=True, abort_step=0, reason="lie", witness=str(exc))
        state = KamState(0, D0, QuasiToeplitzOperator.zero(box, 2, schedule.a0), omega)
        return reduced_spectrum(D0, V, omega), state, status
    P0 = fs.P0.with_width(schedule.a0)
    q0 = qt_norm(P0, p)
    state = KamState(0, D0, P0, omega, [fs.S0],
                     [{"n": 0, "qt_P": q0, "qt_S": qt_norm(fs.S0, p), "a": schedule.a0,
                       "eps_hat": q0 / gamma if gamma > 0 else float("inf"),
                       "o0_ratio": fs.info["o0"].worst_ratio}])
    status["eps0_hat"] = q0 / gamma if gamma > 0 else float("inf")
    status["eps0_ok"] = status["eps0_hat"] <= schedule.eps0
    while state.n < schedule.n_max and not _negligible(qt_norm(state.P, p), floor, gamma):
        try:
            state = kam_step(state, schedule, gamma, p)
        except KamAbort as exc:
            status.update(aborted=True, abort_step=exc.step, reason=exc.reason, witness=exc.witness)
            break
    status["steps"] = state.n
    final = qt_norm(state.P, p)
    status["final_qt_P"] = final
    status["converged"] = (not status["aborted"]) and _negligible(final, floor, gamma)
    eps_hat = [e["qt_P"] / gamma for e in state.log] if gamma > 0 else []
    status["eps_hat"] = eps_hat
    status["contraction"] = contraction_exponents(eps_hat, floor)
    status["fitted_exponent"] = fitted_contraction_exponent(eps_hat, floor)
    return reduced_spectrum(state.D, V, omega), state, status
