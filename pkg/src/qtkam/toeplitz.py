"""Line-Töplitz symbols and quasi-Töplitz operators.

A symbol lives on the fiber grid of a SiteBox: for every Fourier index l it
stores one complex value per fiber (v, b).  A quasi-Töplitz operator of order m
is a symbol plus remainders M^(1..m), the i-th carrying the order weight
(i, m - i); the remainders are measured at half the width of the symbol.

The decomposition stored here is always exact: materialize(T) + sum M^(i)
equals the represented operator entry by entry.  Products keep it exact by
routing every cross term and the symbol mismatch into a remainder class.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .operators import (
    MomentumOperator,
    OrderWeight,
    SiteBox,
    compose,
    compose_split,
    order_norm,
)

__all__ = [
    "LineToeplitzSymbol",
    "QuasiToeplitzOperator",
    "DiagonalData",
    "LieSeriesError",
    "lt_norm",
    "lt_materialize",
    "symbol_product",
    "qt_norm",
    "qt_product",
    "qt_commutator",
    "as_order",
    "diagonal_decompose",
    "ad_series",
    "lie_conjugate",
    "smallness_threshold",
    "CHIAVETTA_C",
    "CHIAVETTA_Q0",
]

# constants of the product estimate |Q1 Q2| <= C a^{-q0} |Q1| |Q2| (calibrated, see tests)
CHIAVETTA_C = 4.0
CHIAVETTA_Q0 = 1.0


class LieSeriesError(RuntimeError):
    pass


def _lnorm(ell) -> float:
    return math.sqrt(sum(x * x for x in ell))


class LineToeplitzSymbol:
    __slots__ = ("box", "values", "width")

    def __init__(self, box: SiteBox, values: dict | None = None, width: float = 0.0):
        self.box = box
        self.width = float(width)
        self.values = {}
        L = box.trunc.fourier_radius
        for ell, vec in (values or {}).items():
            ell = tuple(int(x) for x in ell)
            if _lnorm(ell) > L * (1 + 1e-14):
                continue
            vec = np.asarray(vec, dtype=complex)
            if vec.shape != (box.nf,):
                raise ValueError("symbol vector has wrong length")
            if np.any(vec != 0):
                self.values[ell] = vec

    @classmethod
    def from_triples(cls, box: SiteBox, triples: dict, width: float = 0.0) -> "LineToeplitzSymbol":
        vals: dict = {}
        for (ell, v, b), c in triples.items():
            f = box.fiber_index(v, b)
            if f < 0:
                raise ValueError(f"fiber {(tuple(v), b)} outside the symbol grid")
            ell = tuple(int(x) for x in ell)
            vec = vals.setdefault(ell, np.zeros(box.nf, dtype=complex))
            vec[f] += c
        return cls(box, vals, width)

    @classmethod
    def constant(cls, box: SiteBox, c: complex = 1.0, width: float = 0.0) -> "LineToeplitzSymbol":
        return cls(box, {(0,) * box.d: np.full(box.nf, c, dtype=complex)}, width)

    def triples(self) -> dict:
        out = {}
        box = self.box
        for ell in sorted(self.values):
            vec = self.values[ell]
            for f in np.flatnonzero(vec):
                out[(ell, tuple(int(x) for x in box.fib_v[f]), int(box.fib_b[f]))] = complex(vec[f])
        return out

    def value(self, ell, v, b) -> complex:
        f = self.box.fiber_index(v, b)
        vec = self.values.get(tuple(ell))
        if f < 0 or vec is None:
            return 0j
        return complex(vec[f])

    def is_zero(self) -> bool:
        return not self.values

    def _combine(self, other, sign):
        out = {k: v.copy() for k, v in self.values.items()}
        for k, v in other.values.items():
            out[k] = out[k] + sign * v if k in out else sign * v
        return LineToeplitzSymbol(self.box, out, min(self.width, other.width))

    def __add__(self, other):
        return self._combine(other, 1.0)

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def scale(self, c: complex) -> "LineToeplitzSymbol":
        return LineToeplitzSymbol(self.box, {k: c * v for k, v in self.values.items()}, self.width)

    def max_abs(self) -> float:
        return float(max((np.abs(v).max() for v in self.values.values()), default=0.0))


def lt_norm(S: LineToeplitzSymbol, a: float, m: int, c: float | None = None) -> float:
    """sup over fibers (v, b) of sum_l e^{a c|v| + a|l|} |S(l, v, b)| <b>^m."""
    if not S.values:
        return 0.0
    box = S.box
    c = box.c if c is None else c
    acc = np.zeros(box.nf)
    for ell, vec in S.values.items():
        acc += math.exp(a * _lnorm(ell)) * np.abs(vec)
    acc *= np.exp(a * c * box.fib_vnorm) * box.fib_bbr**m
    return float(acc.max())


def lt_materialize(S: LineToeplitzSymbol) -> MomentumOperator:
    box = S.box
    return MomentumOperator(box, {ell: vec[box.site_fiber] for ell, vec in S.values.items()})


def symbol_product(T1: LineToeplitzSymbol, T2: LineToeplitzSymbol) -> LineToeplitzSymbol:
    """(T1 T2)(l, v, b) = sum_{l1+l2=l} T1(l1, v, b) T2(l2, v, b - v.pi(l1))."""
    box = T1.box
    if T2.box is not box:
        raise ValueError("symbols live on different boxes")
    L = box.trunc.fourier_radius
    out: dict = {}
    for l1 in sorted(T1.values):
        t1 = T1.values[l1]
        sh = box.shift_fibers(box.pi(l1))
        ok = sh >= 0
        for l2 in sorted(T2.values):
            ell = tuple(a + b for a, b in zip(l1, l2))
            if _lnorm(ell) > L * (1 + 1e-14):
                continue
            t2 = T2.values[l2]
            prod = np.where(ok, t1 * t2[np.where(ok, sh, 0)], 0.0)
            if ell in out:
                out[ell] += prod
            else:
                out[ell] = prod
    return LineToeplitzSymbol(box, out, min(T1.width, T2.width))


class QuasiToeplitzOperator:
    """Symbol part plus graded remainders; ``info`` carries diagnostics."""

    __slots__ = ("box", "T", "rem", "order", "width", "info")

    def __init__(self, T: LineToeplitzSymbol, rem: list | None, order: int, width: float,
                 info: dict | None = None):
        if order < 0:
            raise ValueError("order must be nonnegative")
        box = T.box
        rem = list(rem) if rem is not None else []
        if not rem:
            rem = [MomentumOperator(box) for _ in range(order)]
        if len(rem) != order:
            raise ValueError("need exactly one remainder per class 1..m")
        for r in rem:
            if r.box is not box:
                raise ValueError("remainder lives on a different box")
        self.box = box
        self.T = T
        self.rem = rem
        self.order = int(order)
        self.width = float(width)
        self.info = dict(info or {})

    @classmethod
    def zero(cls, box: SiteBox, order: int, width: float) -> "QuasiToeplitzOperator":
        return cls(LineToeplitzSymbol(box, {}, width), None, order, width)

    @classmethod
    def identity(cls, box: SiteBox, order: int, width: float) -> "QuasiToeplitzOperator":
        return cls(LineToeplitzSymbol.constant(box, 1.0, width), None, order, width)

    @classmethod
    def from_operator(cls, M: MomentumOperator, order: int, width: float,
                      cls_index: int | None = None) -> "QuasiToeplitzOperator":
        """Wrap a plain operator as a single remainder (class ``order`` by default)."""
        if order == 0:
            if not M.is_zero():
                raise ValueError("order-0 operators have no remainder slot")
            return cls.zero(M.box, 0, width)
        i = order if cls_index is None else cls_index
        rem = [MomentumOperator(M.box) for _ in range(order)]
        rem[i - 1] = M
        return cls(LineToeplitzSymbol(M.box, {}, width), rem, order, width)

    def materialize(self) -> MomentumOperator:
        out = lt_materialize(self.T)
        for r in self.rem:
            out = out + r
        return out

    def remainder_sum(self) -> MomentumOperator:
        out = MomentumOperator(self.box)
        for r in self.rem:
            out = out + r
        return out

    def is_zero(self) -> bool:
        return self.T.is_zero() and all(r.is_zero() for r in self.rem)

    def map_parts(self, sym_fn, op_fn) -> "QuasiToeplitzOperator":
        return QuasiToeplitzOperator(sym_fn(self.T), [op_fn(r) for r in self.rem], self.order,
                                     self.width)

    def scale(self, c: complex) -> "QuasiToeplitzOperator":
        return self.map_parts(lambda s: s.scale(c), lambda r: r.scale(c))

    def __neg__(self):
        return self.scale(-1.0)

    def __add__(self, other: "QuasiToeplitzOperator") -> "QuasiToeplitzOperator":
        m = min(self.order, other.order)
        a = as_order(self, m)
        b = as_order(other, m)
        return QuasiToeplitzOperator(a.T + b.T, [x + y for x, y in zip(a.rem, b.rem)], m,
                                     min(self.width, other.width))

    def __sub__(self, other):
        return self + (-other)

    def project(self, K: float, keep_low: bool, exclude_zero: bool = False) -> "QuasiToeplitzOperator":
        """Fourier band projection applied part by part."""
        def keep(ell):
            n = _lnorm(ell)
            if exclude_zero and n == 0:
                return False
            low = n <= K * (1 + 1e-14)
            return low == keep_low

        def sym(s):
            return LineToeplitzSymbol(s.box, {k: v for k, v in s.values.items() if keep(k)}, s.width)

        def op(r):
            return MomentumOperator(r.box, {k: v for k, v in r.harm.items() if keep(k)})

        return self.map_parts(sym, op)

    def with_width(self, width: float) -> "QuasiToeplitzOperator":
        return QuasiToeplitzOperator(self.T, self.rem, self.order, width, self.info)

    def dropped(self) -> float:
        return float(sum(r.dropped for r in self.rem))


def as_order(Q: QuasiToeplitzOperator, m: int) -> QuasiToeplitzOperator:
    """View Q as an operator of lower order m (class i goes to class min(i, m))."""
    if m > Q.order:
        raise ValueError("cannot raise the order of a quasi-Töplitz operator")
    if m == Q.order:
        return Q
    box = Q.box
    rem = [MomentumOperator(box) for _ in range(m)]
    extra = MomentumOperator(box)
    for i, r in enumerate(Q.rem, start=1):
        if m == 0:
            extra = extra + r
        else:
            k = min(i, m)
            rem[k - 1] = rem[k - 1] + r
    if m == 0 and not extra.is_zero():
        raise ValueError("order-0 view would lose nonzero remainders")
    return QuasiToeplitzOperator(Q.T, rem, m, Q.width, Q.info)


def qt_norm(Q: QuasiToeplitzOperator, p: float = 1.0, a: float | None = None) -> float:
    a = Q.width if a is None else a
    tot = lt_norm(Q.T, a, Q.order)
    for i, r in enumerate(Q.rem, start=1):
        if not r.is_zero():
            tot += order_norm(r, a / 2, OrderWeight(i, Q.order - i), p, lower=False).upper
    return tot


def _mamano_classifier(box: SiteBox):
    """Class per (row j, l1) for a chain M1^(1)(l1) M2^T in an order-one product:
    class 1 exactly when j1 = j - pi(l1) is far out, l1 is short, v(j1) is short
    and b(j1) is small; class 2 otherwise."""
    geom = box.geom
    Jd = geom.j_threshold
    dl = geom.delta
    mu = geom.mu
    c = box.c

    def classify(l1, rows):
        sh = box.shift_sites(box.pi(l1))
        j1 = np.where(sh >= 0, sh, 0)
        br1 = box.jbr[j1]
        far = br1 > Jd
        short = _lnorm(l1) <= c * box.jbr**dl
        vshort = box.vnorm[j1] <= 0.5 * br1**dl
        bsmall = np.abs(box.b[j1]) <= br1**mu
        region_d = far & short & vshort & bsmall
        return np.where(region_d, 0, 1)

    return classify


def qt_product(Q1: QuasiToeplitzOperator, Q2: QuasiToeplitzOperator,
               a_out: float | None = None) -> QuasiToeplitzOperator:
    if Q1.box is not Q2.box:
        if Q1.box.kmap != Q2.box.kmap:
            raise ValueError("operators carry different momentum maps")
        raise ValueError("operators live on different truncation boxes")
    box = Q1.box
    m1, m2 = Q1.order, Q2.order
    special = m1 == 1 and m2 == 1
    m = 2 if special else min(m1, m2)
    width = min(Q1.width, Q2.width) if a_out is None else a_out
    T = symbol_product(Q1.T, Q2.T)
    rem = [MomentumOperator(box) for _ in range(m)]
    dropped = 0.0

    def put(k, op):
        nonlocal dropped
        if op.is_zero():
            dropped += op.dropped
            return
        if m == 0:
            raise ValueError("order-0 product produced a remainder")
        dropped += op.dropped
        rem[k - 1] = rem[k - 1] + op

    M1T = lt_materialize(Q1.T)
    M2T = lt_materialize(Q2.T)
    # symbol mismatch
    if not (M1T.is_zero() or M2T.is_zero()) or not T.is_zero():
        full = compose(M1T, M2T)
        mis = full - lt_materialize(T)
        mis.dropped = full.dropped
        if m == 0:
            if mis.max_abs() > 1e-13 * max(1.0, full.max_abs()):
                raise ValueError("order-0 product does not close on symbols")
            dropped += full.dropped
        else:
            put(m, mis)
    for i, r2 in enumerate(Q2.rem, start=1):
        if not r2.is_zero() and not M1T.is_zero():
            put(min(i, m), compose(M1T, r2))
    for i, r1 in enumerate(Q1.rem, start=1):
        if r1.is_zero():
            continue
        if not M2T.is_zero():
            if special:
                c1, c2 = compose_split(r1, M2T, _mamano_classifier(box), 2)
                c1.dropped, c2.dropped = c1.dropped + c2.dropped, 0.0
                put(1, c1)
                put(2, c2)
            else:
                put(min(i, m), compose(r1, M2T))
        for k, r2 in enumerate(Q2.rem, start=1):
            if r2.is_zero():
                continue
            put(2 if special else min(i, m), compose(r1, r2))
    if rem:
        rem[0].dropped = dropped
    T.width = width
    out = QuasiToeplitzOperator(T, rem, m, width)
    out.info["dropped"] = dropped
    return out


def qt_commutator(Q1: QuasiToeplitzOperator, Q2: QuasiToeplitzOperator,
                  a_out: float | None = None) -> QuasiToeplitzOperator:
    """[Q1, Q2] = Q1 Q2 - Q2 Q1 with both orders first brought to a common value."""
    m = min(Q1.order, Q2.order)
    A = as_order(Q1, m)
    B = as_order(Q2, m)
    left = qt_product(A, B, a_out)
    right = qt_product(B, A, a_out)
    out = left - right
    out.info["dropped"] = left.info.get("dropped", 0.0) + right.info.get("dropped", 0.0)
    return out


@dataclass
class DiagonalData:
    """Frequencies Omega_j = |j|^2 + a(v(j), b(j)) + r1_j + r2_j on a SiteBox."""

    box: SiteBox
    a_symbol: np.ndarray = field(default=None)
    r1: np.ndarray = field(default=None)
    r2: np.ndarray = field(default=None)

    def __post_init__(self):
        box = self.box
        self.a_symbol = np.zeros(box.nf) if self.a_symbol is None else np.asarray(self.a_symbol, dtype=float)
        self.r1 = np.zeros(box.n) if self.r1 is None else np.asarray(self.r1, dtype=float)
        self.r2 = np.zeros(box.n) if self.r2 is None else np.asarray(self.r2, dtype=float)
        if self.a_symbol.shape != (box.nf,) or self.r1.shape != (box.n,) or self.r2.shape != (box.n,):
            raise ValueError("diagonal data has wrong shape")

    @classmethod
    def free(cls, box: SiteBox) -> "DiagonalData":
        return cls(box)

    def omega_tilde(self) -> np.ndarray:
        return self.a_symbol[self.box.site_fiber] + self.r1 + self.r2

    def omega(self) -> np.ndarray:
        return self.box.jsq + self.omega_tilde()

    def a_at(self, v, b) -> float:
        f = self.box.fiber_index(v, b)
        return 0.0 if f < 0 else float(self.a_symbol[f])

    def plus(self, other: "DiagonalData") -> "DiagonalData":
        return DiagonalData(self.box, self.a_symbol + other.a_symbol, self.r1 + other.r1,
                            self.r2 + other.r2)

    def as_qt(self, width: float) -> QuasiToeplitzOperator:
        """The correction Omega~ as an order-2 quasi-Töplitz operator."""
        box = self.box
        z = (0,) * box.d
        T = LineToeplitzSymbol(box, {z: self.a_symbol.astype(complex)}, width)
        return QuasiToeplitzOperator(T, [MomentumOperator.diagonal(box, self.r1),
                                         MomentumOperator.diagonal(box, self.r2)], 2, width)

    def as_operator(self) -> MomentumOperator:
        return MomentumOperator.diagonal(self.box, self.omega())


def diagonal_decompose(A: QuasiToeplitzOperator) -> DiagonalData:
    if A.order != 2:
        raise ValueError("diagonal decomposition expects an order-2 operator")
    z = (0,) * A.box.d
    if any(k != z for k in A.T.values) or any(k != z for r in A.rem for k in r.harm):
        raise ValueError("not time independent")
    box = A.box
    a = np.real(A.T.values.get(z, np.zeros(box.nf)))
    r1 = np.real(A.rem[0].harm.get(z, np.zeros(box.n)))
    r2 = np.real(A.rem[1].harm.get(z, np.zeros(box.n)))
    return DiagonalData(box, a.copy(), r1.copy(), r2.copy())


def smallness_threshold(a: float) -> float:
    return a**CHIAVETTA_Q0 / (4.0 * CHIAVETTA_C)


def ad_series(Y: QuasiToeplitzOperator, S: QuasiToeplitzOperator, coeff, max_terms: int = 12,
              tail_tol: float | None = None, force: bool = False, p: float = 1.0):
    """sum_{k>=0} coeff(k) (ad S)^k Y with (ad S) X = [X, S].

    Returns (result, info).  The tail after n terms is bounded by
    2 sup_{k>=n} |coeff(k)| (|S| / 2 delta)^n |Y| with delta the smallness threshold."""
    nS = qt_norm(S, p)
    nY = qt_norm(Y, p)
    thr = smallness_threshold(S.width if S.width > 0 else Y.width)
    certified = nS <= thr
    if not certified and not force:
        raise LieSeriesError(f"Lie series not certified: |S|={nS:.3e} > {thr:.3e}")
    if tail_tol is None:
        tail_tol = 1e-14 * nY
    total = Y.scale(coeff(0))
    Z = Y
    dropped = 0.0
    tail = float("inf")
    used = 1
    ratio = nS / (2.0 * thr)
    for k in range(1, max_terms + 1):
        if nS == 0.0 or Z.is_zero():
            tail = 0.0
            break
        tail = 2.0 * max(abs(coeff(i)) for i in range(k, k + 40)) * ratio**k * nY
        if tail <= tail_tol:
            break
        Z = qt_commutator(Z, S)
        dropped += Z.info.get("dropped", 0.0)
        total = total + Z.scale(coeff(k))
        used = k + 1
    else:
        k = max_terms + 1
        tail = 2.0 * max(abs(coeff(i)) for i in range(k, k + 40)) * ratio**k * nY
    info = {"terms": used, "tail_bound": float(tail), "certified": bool(certified),
            "forced": bool(force and not certified), "S_norm": nS, "threshold": thr,
            "dropped": dropped}
    total.info.update(info)
    return total, info


def lie_conjugate(Q: QuasiToeplitzOperator, S: QuasiToeplitzOperator, max_terms: int = 12,
                  tail_tol: float | None = None, force: bool = False, p: float = 1.0):
    """e^{ad S} Q = e^{-S} Q e^{S} as a Lie series."""
    out, _ = ad_series(Q, S, lambda k: 1.0 / math.factorial(k), max_terms, tail_tol, force, p)
    return out
