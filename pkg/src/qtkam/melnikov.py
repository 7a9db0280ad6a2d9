"""Melnikov-type non-resonance audits on a reduced spectrum and measure sweeps over omega.

A tuple (l, K, v, b, eta, j) evaluates to

    omega.l + K + sum_h eta_1h a(v_h, b_h) + sum_k eta_2k R(j_k),   R = r1 + r2.

The audit is organised by the number n of nonzero signs: a tuple with n
active terms must stay at least gamma <l>^{-tau_n} away from zero, and for
|l| <= L_cut the stronger threshold gamma <l>^{-(d+1)} applies.  Terms that
refer to fibers or sites outside the computed tables read zero.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest, qmc

from .geometry import site_data
from .homological import DivisorContext, small_divisor, toeplitz_divisor
from .kam import ReducedSpectrum
from .operators import fourier_ball

__all__ = [
    "MelnikovTuple",
    "MelnikovConfig",
    "GNViolation",
    "melnikov_value",
    "tuple_from_GN",
    "check_C_star",
    "CStarReport",
    "MeasureReport",
    "measure_sweep",
    "sample_frequencies",
    "embedding_check",
    "mel_decay_sup",
    "minimal_tau_list",
]


class GNViolation(ValueError):
    pass


@dataclass(frozen=True)
class MelnikovTuple:
    ell: tuple
    Kint: int
    v_list: tuple
    b_list: tuple
    eta: tuple
    j_list: tuple

    def __post_init__(self):
        N = len(self.v_list)
        if len(self.b_list) != N or len(self.j_list) != N or len(self.eta) != 2 * N:
            raise ValueError("inconsistent tuple lengths")
        if any(e not in (-1, 0, 1) for e in self.eta):
            raise ValueError("signs must lie in {-1, 0, 1}")

    @property
    def N(self) -> int:
        return len(self.v_list)

    @property
    def level(self) -> int:
        return sum(1 for e in self.eta if e != 0)


def minimal_tau_list(N: int, d: int, mu: float, slack: float = 1.0) -> list:
    taus = [float(d + 1)]
    for _ in range(2 * N):
        taus.append((2.5 + 2.0 / mu) * N * taus[-1] + d + 1 + slack)
    return taus


@dataclass(frozen=True)
class MelnikovConfig:
    N: int
    gamma: float
    tau_list: tuple
    L_cut: float
    L_audit: float
    d: int = 2
    mu: float = 0.4
    c_aprime: float = 0.125
    search_cap: int = 2_000_000

    def __post_init__(self):
        errs = []
        if self.N < 2:
            errs.append("N must be at least 2")
        if self.gamma < 0:
            errs.append("gamma must be nonnegative")
        taus = tuple(float(t) for t in self.tau_list)
        object.__setattr__(self, "tau_list", taus)
        if len(taus) != 2 * self.N + 1:
            errs.append(f"need {2 * self.N + 1} exponents tau_0..tau_2N")
        elif taus[0] != self.d + 1:
            errs.append("tau_0 must equal d + 1")
        else:
            for n in range(2 * self.N):
                need = (2.5 + 2.0 / self.mu) * self.N * taus[n] + self.d + 1
                if not taus[n + 1] > need:
                    errs.append(f"tau_{n + 1}={taus[n + 1]} must exceed {need}")
        if self.L_audit <= 0 or self.L_cut < 0:
            errs.append("audit radii must be positive")
        if errs:
            raise ValueError("; ".join(errs))

    @classmethod
    def standard(cls, N: int, gamma: float, d: int, mu: float, L_cut: float, L_audit: float,
                 **kw) -> "MelnikovConfig":
        return cls(N, gamma, tuple(minimal_tau_list(N, d, mu)), L_cut, L_audit, d, mu, **kw)

    def with_gamma(self, gamma: float) -> "MelnikovConfig":
        return MelnikovConfig(self.N, gamma, self.tau_list, self.L_cut, self.L_audit, self.d,
                              self.mu, self.c_aprime, self.search_cap)

    def threshold(self, ell_norm, level: int):
        br = np.sqrt(1.0 + np.asarray(ell_norm, dtype=float) ** 2)
        tau = np.where(np.asarray(ell_norm) <= self.L_cut, self.d + 1.0, self.tau_list[level])
        return self.gamma * br ** (-tau)


def _site_R(spec: ReducedSpectrum, j):
    i = spec.box.index.get((int(j[0]), int(j[1])))
    if i is None:
        return 0.0, False
    return float(spec.r1[i] + spec.r2[i]), True


def melnikov_value(spec: ReducedSpectrum, omega, t: MelnikovTuple, with_flags: bool = False):
    om = np.asarray(omega, dtype=float)
    val = float(np.dot(om, t.ell)) + t.Kint
    flags = []
    N = t.N
    for h in range(N):
        if t.eta[h]:
            f = spec.box.fiber_index(t.v_list[h], t.b_list[h])
            if f < 0:
                flags.append(("a", h))
            else:
                val += t.eta[h] * float(spec.a_symbol[f])
        if t.eta[N + h]:
            r, ok = _site_R(spec, t.j_list[h])
            if not ok:
                flags.append(("R", h))
            val += t.eta[N + h] * r
    return (val, flags) if with_flags else val


def tuple_from_GN(ell, L: dict, spec: ReducedSpectrum, N: int) -> MelnikovTuple:
    """Tuple realizing omega.l + Omega.L for an admissible pair (l, L)."""
    ell = tuple(int(x) for x in ell)
    box = spec.box
    L = {(int(j[0]), int(j[1])): int(m) for j, m in L.items() if int(m) != 0}
    size = sum(abs(m) for m in L.values())
    if size > N:
        raise GNViolation(f"|L| = {size} exceeds N = {N}")
    if sum(ell) + sum(L.values()) != 0:
        raise GNViolation("gauge condition sum(l) + sum(L) = 0 fails")
    p = box.kmap.pi(ell)
    mom = (p[0] + sum(j[0] * m for j, m in L.items()), p[1] + sum(j[1] * m for j, m in L.items()))
    if mom != (0, 0):
        raise GNViolation("momentum condition pi(l) + sum j L_j = 0 fails")
    K = sum((j[0] ** 2 + j[1] ** 2) * m for j, m in L.items())
    if not any(ell) and K == 0:
        raise GNViolation("(l, K) = (0, 0) is excluded")
    vs, bs, js, e1, e2 = [], [], [], [], []
    for j in sorted(L):
        m = L[j]
        sd = site_data(box.geom, j)
        for _ in range(abs(m)):
            vs.append(sd.v)
            bs.append(sd.b)
            js.append(j)
            e1.append(1 if m > 0 else -1)
            e2.append(1 if m > 0 else -1)
    while len(vs) < N:
        vs.append((0, 1))
        bs.append(0)
        js.append((0, 0))
        e1.append(0)
        e2.append(0)
    return MelnikovTuple(ell, K, tuple(vs), tuple(bs), tuple(e1 + e2), tuple(js))


@dataclass
class CStarReport:
    passed: bool
    worst_ratio: float
    witness: dict | None
    levels: dict
    audited: dict
    undecided: int = 0
    case_counts: dict = field(default_factory=dict)


def _tables(spec: ReducedSpectrum):
    a = np.unique(np.abs(spec.a_symbol[spec.a_symbol != 0]))
    R = spec.r_total()
    r = np.unique(np.abs(R[R != 0]))
    A = np.unique(np.concatenate([[0.0], a, -a]))
    Rs = np.unique(np.concatenate([[0.0], r, -r]))
    return A, Rs


def _sumset(base: np.ndarray, k: int, cap: int):
    out = np.array([0.0])
    for _ in range(k):
        out = np.unique((out[:, None] + base[None, :]).ravel())
        if out.size > cap:
            return None
    return out


def _closest_sum(y: float, A, Rs, n: int, N: int, cap: int):
    """min over s with n active terms (<= N from each table) of |s - y|; None when capped."""
    best = float("inf")
    for n1 in range(max(0, n - N), min(N, n) + 1):
        n2 = n - n1
        left = _sumset(A, n1, cap)
        right = _sumset(Rs, n2, cap)
        if left is None or right is None:
            return None
        right = np.sort(right)
        tgt = y - left
        pos = np.clip(np.searchsorted(right, tgt), 1, right.size - 1) if right.size > 1 else np.zeros(tgt.size, dtype=int)
        cand = np.abs(right[pos] - tgt)
        if right.size > 1:
            cand = np.minimum(cand, np.abs(right[pos - 1] - tgt))
        best = min(best, float(cand.min()))
    return best


def _level_radius(A, Rs, n: int, N: int) -> float:
    am = float(np.abs(A).max(initial=0.0))
    rm = float(np.abs(Rs).max(initial=0.0))
    return max(n1 * am + (n - n1) * rm for n1 in range(max(0, n - N), min(N, n) + 1))


def _audit(spec: ReducedSpectrum, omegas: np.ndarray, cfg: MelnikovConfig):
    """Vectorized audit over many frequencies; returns per-sample pass flags and details."""
    d = omegas.shape[1]
    ells = np.array([e for e in fourier_ball(cfg.L_audit, d) if any(e)], dtype=np.int64)
    S = omegas.shape[0]
    ok = np.ones(S, dtype=bool)
    worst = np.full(S, np.inf)
    wit = [None] * S
    undecided = 0
    if cfg.gamma == 0 or ells.size == 0:
        return ok, worst, wit, undecided, ells
    ln = np.sqrt((ells**2).sum(axis=1))
    X = omegas @ ells.T  # (S, nl)
    Kbound = np.floor(2 * ln + 1e-12)
    Kn = np.clip(-np.round(X), -Kbound[None, :], Kbound[None, :])
    dist = np.abs(X + Kn)
    A, Rs = _tables(spec)
    for n in range(0, 2 * cfg.N + 1):
        thr = cfg.threshold(ln, n)[None, :]
        rho = _level_radius(A, Rs, n, cfg.N) if n > 0 else 0.0
        sure_pass = dist >= rho + thr
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(thr > 0, (dist - rho) / np.where(thr > 0, thr, 1.0), np.inf)
        cand = np.flatnonzero(~sure_pass.all(axis=1))
        for s in cand:
            for li in np.flatnonzero(~sure_pass[s]):
                if thr[0, li] == 0.0:
                    continue  # threshold below double precision: nothing to test
                if n == 0 or dist[s, li] < thr[0, li] - rho:
                    # zero is always an admissible sum (terms off the tables read 0)
                    val = dist[s, li]
                else:
                    # exact search over both neighbouring K values
                    val = float("inf")
                    for K in {Kn[s, li], Kn[s, li] + 1, Kn[s, li] - 1}:
                        if abs(K) > Kbound[li]:
                            continue
                        res = _closest_sum(-(X[s, li] + K), A, Rs, n, cfg.N, cfg.search_cap)
                        if res is None:
                            val = -1.0
                            undecided += 1
                            break
                        val = min(val, res)
                r = val / thr[0, li] if val >= 0 else -1.0
                if r < worst[s]:
                    worst[s] = r
                    wit[s] = {"ell": tuple(int(x) for x in ells[li]), "K": int(Kn[s, li]),
                              "level": n, "value": float(val), "threshold": float(thr[0, li])}
                if val < thr[0, li]:
                    ok[s] = False
        # record margins of sure passes as well
        sp_ratio = np.where(sure_pass, ratio, np.inf).min(axis=1)
        upd = sp_ratio < worst
        for s in np.flatnonzero(upd):
            li = int(np.argmin(np.where(sure_pass[s], ratio[s], np.inf)))
            worst[s] = sp_ratio[s]
            wit[s] = {"ell": tuple(int(x) for x in ells[li]), "K": int(Kn[s, li]), "level": n,
                      "value": float(dist[s, li]), "threshold": float(thr[0, li])}
    return ok, worst, wit, undecided, ells


def check_C_star(spec: ReducedSpectrum, omega, cfg: MelnikovConfig) -> CStarReport:
    om = np.asarray(omega, dtype=float)[None, :]
    ok, worst, wit, undecided, ells = _audit(spec, om, cfg)
    A, Rs = _tables(spec)
    levels = {n: _level_radius(A, Rs, n, cfg.N) for n in range(2 * cfg.N + 1)}
    # Case II window sizes at the audit radius (informational)
    box = spec.box
    Lr = cfg.L_audit
    counts = {}
    for n in range(2 * cfg.N):
        tau = cfg.tau_list[n]
        logL = math.log(Lr)
        with np.errstate(divide="ignore"):
            win_a = int(np.count_nonzero((cfg.c_aprime * box.fib_vnorm < Lr)
                                         & (np.log(np.abs(box.fib_b)) < logL * tau / 2)))
            win_r = int(np.count_nonzero(np.log(box.jbr) < logL * tau / cfg.mu))
        counts[n] = {"fibers_in_window": win_a, "fibers_total": box.nf,
                     "sites_in_window": win_r, "sites_total": box.n}
    large_K = 1.0 - 2 * cfg.N * max(float(np.abs(A).max(initial=0)), float(np.abs(Rs).max(initial=0)))
    audited = {"L_audit": cfg.L_audit, "L_cut": cfg.L_cut, "n_ell": int(ells.shape[0]),
               "K_range": "|K| <= 2|l|", "large_K_lower_bound": large_K}
    # largest radius on which the strong small-|l| threshold holds for every level
    ells_arr = np.array([e for e in fourier_ball(cfg.L_audit, cfg.d) if any(e)], dtype=float)
    largest = float(cfg.L_audit)
    if cfg.gamma > 0 and ells_arr.size:
        ln = np.sqrt((ells_arr**2).sum(axis=1))
        x = ells_arr @ np.asarray(omega, dtype=float)
        kb = np.floor(2 * ln + 1e-12)
        dist = np.abs(x + np.clip(-np.round(x), -kb, kb))
        bad = dist - levels[2 * cfg.N] < cfg.gamma * (1 + ln**2) ** (-(cfg.d + 1) / 2)
        if bad.any():
            r0 = ln[bad].min()
            below = ln[ln < r0]
            largest = float(below.max()) if below.size else 0.0
    audited["largest_L_cut"] = largest
    return CStarReport(bool(ok[0]), float(worst[0]), wit[0], levels, audited, undecided, counts)


def sample_frequencies(samples: int, d: int, seed: int, method: str = "sobol") -> np.ndarray:
    if method == "sobol":
        eng = qmc.Sobol(d, scramble=True, seed=seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            u = eng.random(samples)
    elif method == "halton":
        u = qmc.Halton(d, scramble=True, seed=seed).random(samples)
    elif method == "iid":
        u = np.random.default_rng(seed).random((samples, d))
    else:
        raise ValueError(f"unknown sampling method {method}")
    return 2.0 * u - 1.0


@dataclass
class MeasureReport:
    rows: list
    monotone: bool
    witnesses: dict
    samples: int
    method: str
    embedding: dict | None = None


def embedding_check(spec: ReducedSpectrum, omega, cfg: MelnikovConfig, tau: float,
                    K: float | None = None) -> dict:
    """Compare the line/site divisors with the tuples that realize them and test them
    at the audit threshold.  Returns the largest identity defect and pass flags."""
    box = spec.box
    om = np.asarray(omega, dtype=float)
    K = cfg.L_audit if K is None else K
    ctx = DivisorContext(tuple(om), max(cfg.gamma, 1e-300), tau, K)
    N2 = 2
    defect = 0.0
    c1 = c2 = True
    worst1 = worst2 = float("inf")
    n_top = 2 * N2
    for ell in fourier_ball(min(K, box.trunc.fourier_radius), box.d):
        if not any(ell):
            continue
        ln = math.sqrt(sum(x * x for x in ell))
        thr = float(cfg.threshold(ln, n_top))
        p = box.pi(ell)
        for i in range(box.n):
            j = tuple(int(x) for x in box.sites[i])
            j2 = (j[0] - p[0], j[1] - p[1])
            if j2 not in box.index:
                continue
            dval = small_divisor(spec.D, ctx, ell, j)
            s1, s2 = site_data(box.geom, j), site_data(box.geom, j2)
            t = MelnikovTuple(ell, j[0] ** 2 + j[1] ** 2 - j2[0] ** 2 - j2[1] ** 2,
                              (s1.v, s2.v), (s1.b, s2.b), (1, -1, 1, -1), (j, j2))
            tv = melnikov_value(spec, om, t)
            defect = max(defect, abs(tv - dval))
            worst1 = min(worst1, abs(dval) / thr if thr > 0 else float("inf"))
            if abs(dval) < thr:
                c1 = False
        if p == (0, 0):
            continue
        for v in {tuple(int(x) for x in w) for w in box.fib_v.tolist()}:
            if v[0] * p[1] - v[1] * p[0] != 0:
                continue
            kk = (v[0] * p[0] + v[1] * p[1]) // (v[0] ** 2 + v[1] ** 2)
            vp = v[0] * p[0] + v[1] * p[1]
            for f in np.flatnonzero((box.fib_v[:, 0] == v[0]) & (box.fib_v[:, 1] == v[1])):
                b = int(box.fib_b[f])
                dval = toeplitz_divisor(spec.D, ctx, ell, v, b)
                t = MelnikovTuple(ell, 2 * kk * b - (p[0] ** 2 + p[1] ** 2), (v, v), (b, b - vp),
                                  (1, -1, 0, 0), ((0, 0), (0, 0)))
                tv = melnikov_value(spec, om, t)
                defect = max(defect, abs(tv - dval))
                worst2 = min(worst2, abs(dval) / thr if thr > 0 else float("inf"))
                if abs(dval) < thr:
                    c2 = False
    return {"identity_defect": defect, "C1": c1, "C2": c2, "C1_ratio": worst1, "C2_ratio": worst2}


def measure_sweep(spec: ReducedSpectrum, cfg: MelnikovConfig, gammas, samples: int, seed: int,
                  method: str = "sobol", embedding_samples: int = 0) -> MeasureReport:
    if samples < 100:
        raise ValueError("need at least 100 samples")
    om = sample_frequencies(samples, cfg.d, seed, method)
    rows = []
    fails = {}
    witnesses = {}
    for g in sorted(gammas):
        c = cfg.with_gamma(g)
        ok, worst, wit, undecided, _ = _audit(spec, om, c)
        k = int((~ok).sum())
        if k > 0 and g > 0:
            ci = binomtest(k, samples).proportion_ci(confidence_level=0.95, method="exact")
            lo, hi = float(ci.low), float(ci.high)
        else:
            lo, hi = 0.0, float(1 - 0.05 ** (1 / samples)) if g > 0 else 0.0
        rows.append({"gamma": g, "samples": samples, "excluded_count": k, "fraction": k / samples,
                     "ci_low": lo, "ci_high": hi, "undecided": undecided})
        fails[g] = ~ok
        witnesses[g] = [(tuple(float(x) for x in om[s]), wit[s]) for s in np.flatnonzero(~ok)]
    gs = sorted(fails)
    monotone = all(not np.any(fails[a] & ~fails[b]) for a, b in zip(gs[:-1], gs[1:]))
    emb = None
    if embedding_samples > 0:
        c2 = MelnikovConfig.standard(2, cfg.gamma, cfg.d, cfg.mu, cfg.L_cut, cfg.L_audit,
                                     c_aprime=cfg.c_aprime)
        ok2, *_ = _audit(spec, om[:embedding_samples], c2)
        defect, viol, tested = 0.0, 0, 0
        for s in np.flatnonzero(ok2):
            e = embedding_check(spec, om[s], c2, tau=c2.tau_list[-1], K=min(cfg.L_audit, 4.0))
            defect = max(defect, e["identity_defect"])
            tested += 1
            viol += int(not (e["C1"] and e["C2"]))
        emb = {"tested": tested, "violations": viol, "identity_defect": defect}
    return MeasureReport(rows, monotone, witnesses, samples, method, emb)


def mel_decay_sup(spec: ReducedSpectrum) -> float:
    """sup e^{kappa|v|}<b>^2|a(v,b)| + sup |R(j)|<j>^mu over the tables."""
    box = spec.box
    a_part = float(np.abs(spec.varpi).max(initial=0.0))
    r_part = float((np.abs(spec.r_total()) * box.jbr**box.geom.mu).max(initial=0.0))
    return a_part + r_part
