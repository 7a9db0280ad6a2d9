"""Sparse momentum-preserving operators on a finite box of Z^2 x Z^d.

An operator M is stored harmonic by harmonic: for every Fourier index l the
vector ``harm[l]`` holds the entries M_j^{j-pi(l)}(l) over the sites j of the
box (zero where the column j - pi(l) leaves the box).  Momentum preservation is
therefore structural.

Norms are certified brackets: the upper bound uses the convolution kernel of
the majorant and the algebra constant of l^1 cap h^p, the lower bound tests the
majorant on normalized coordinate vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .geometry import GeometryParams, MomentumMap, site_data

__all__ = [
    "TruncationBox",
    "SiteBox",
    "site_box",
    "fourier_ball",
    "MomentumOperator",
    "OrderWeight",
    "NormBound",
    "seq_norm",
    "kernel_norm",
    "majorant_matrix",
    "majorant_norm",
    "order_norm",
    "compose",
    "compose_split",
    "commutator",
    "project_band",
    "bony_split",
    "smoothing_constant",
    "selfadjoint_defect",
    "lipschitz_norm",
    "decay_kernel_constant",
]


@dataclass(frozen=True)
class TruncationBox:
    site_radius: float
    fourier_radius: float

    def __post_init__(self):
        if not (self.site_radius > 0 and self.fourier_radius > 0):
            raise ValueError("truncation radii must be positive")


@lru_cache(maxsize=64)
def fourier_ball(radius: float, d: int) -> tuple[tuple[int, ...], ...]:
    """All l in Z^d with |l| <= radius, sorted."""
    r = int(math.floor(radius + 1e-12))
    grids = np.meshgrid(*[np.arange(-r, r + 1)] * d, indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    keep = (pts**2).sum(axis=1) <= radius * radius * (1 + 1e-14)
    return tuple(sorted(tuple(int(x) for x in p) for p in pts[keep]))


def _norm(ell) -> float:
    return math.sqrt(sum(x * x for x in ell))


class SiteBox:
    """Sites |j| <= J with their (v(j), b(j)) data, plus the fiber grid on which
    line-Töplitz symbols live.

    The fiber grid holds, for every generator v used by some site, a contiguous
    range of b values wide enough that shifting a site fiber by v.pi(l) twice
    (|l| <= L) stays inside it."""

    def __init__(self, trunc: TruncationBox, kmap: MomentumMap, geom: GeometryParams):
        self.trunc = trunc
        self.kmap = kmap
        self.geom = geom
        J = trunc.site_radius
        r = int(math.floor(J + 1e-12))
        sites = [(a, b) for a in range(-r, r + 1) for b in range(-r, r + 1)
                 if a * a + b * b <= J * J * (1 + 1e-14)]
        sites.sort()
        self.sites = np.array(sites, dtype=np.int64).reshape(-1, 2)
        self.n = len(sites)
        self.index = {s: i for i, s in enumerate(sites)}
        data = [site_data(geom, s) for s in sites]
        self.v = np.array([sd.v for sd in data], dtype=np.int64).reshape(-1, 2)
        self.b = np.array([sd.b for sd in data], dtype=np.int64)
        self.jnorm = np.sqrt((self.sites**2).sum(axis=1).astype(float))
        self.jbr = np.sqrt(1.0 + self.jnorm**2)
        self.bbr = np.sqrt(1.0 + self.b.astype(float) ** 2)
        self.vnorm = np.sqrt((self.v**2).sum(axis=1).astype(float))
        self.jsq = (self.sites**2).sum(axis=1).astype(float)
        self.c = kmap.c_const
        # fiber grid
        gens = sorted({tuple(x) for x in self.v.tolist()})
        self.gens = gens
        shift_max = 2.0 * trunc.fourier_radius / self.c
        self._gen_start = {}
        self._gen_lo = {}
        self._gen_len = {}
        fv, fb, fg = [], [], []
        start = 0
        for g, v in enumerate(gens):
            mask = (self.v[:, 0] == v[0]) & (self.v[:, 1] == v[1])
            bs = self.b[mask]
            marg = int(math.ceil(_norm(v) * shift_max))
            lo, hi = int(bs.min()) - marg, int(bs.max()) + marg
            self._gen_start[v] = start
            self._gen_lo[v] = lo
            self._gen_len[v] = hi - lo + 1
            for bb in range(lo, hi + 1):
                fv.append(v)
                fb.append(bb)
                fg.append(g)
            start += hi - lo + 1
        self.fib_v = np.array(fv, dtype=np.int64).reshape(-1, 2)
        self.fib_b = np.array(fb, dtype=np.int64)
        self.fib_gen = np.array(fg, dtype=np.int64)
        self.nf = len(fb)
        self.fib_vnorm = np.sqrt((self.fib_v**2).sum(axis=1).astype(float))
        self.fib_bbr = np.sqrt(1.0 + self.fib_b.astype(float) ** 2)
        self.gen_start = np.array([self._gen_start[v] for v in gens], dtype=np.int64)
        self.gen_lo = np.array([self._gen_lo[v] for v in gens], dtype=np.int64)
        self.gen_len = np.array([self._gen_len[v] for v in gens], dtype=np.int64)
        self.site_fiber = np.array(
            [self._gen_start[tuple(v)] + int(bb) - self._gen_lo[tuple(v)]
             for v, bb in zip(self.v.tolist(), self.b.tolist())], dtype=np.int64)
        self._site_shift: dict = {}
        self._fib_shift: dict = {}
        self._pi: dict = {}

    def __repr__(self):
        return f"SiteBox(J={self.trunc.site_radius}, L={self.trunc.fourier_radius}, n={self.n}, nf={self.nf})"

    @property
    def d(self) -> int:
        return self.kmap.d

    def pi(self, ell) -> tuple[int, int]:
        p = self._pi.get(ell)
        if p is None:
            p = self.kmap.pi(ell)
            self._pi[ell] = p
        return p

    def fiber_index(self, v, b) -> int:
        v = (int(v[0]), int(v[1]))
        if v not in self._gen_start:
            return -1
        off = int(b) - self._gen_lo[v]
        if 0 <= off < self._gen_len[v]:
            return self._gen_start[v] + off
        return -1

    def shift_sites(self, p) -> np.ndarray:
        """Index of site j - p for every site j, -1 when outside the box."""
        p = (int(p[0]), int(p[1]))
        out = self._site_shift.get(p)
        if out is None:
            out = np.array([self.index.get((int(a) - p[0], int(b) - p[1]), -1)
                            for a, b in self.sites], dtype=np.int64)
            self._site_shift[p] = out
        return out

    def shift_fibers(self, p) -> np.ndarray:
        """Index of fiber (v, b - v.p) for every fiber (v, b), -1 outside the grid."""
        p = (int(p[0]), int(p[1]))
        out = self._fib_shift.get(p)
        if out is None:
            vp = self.fib_v[:, 0] * p[0] + self.fib_v[:, 1] * p[1]
            nb = self.fib_b - vp
            off = nb - self.gen_lo[self.fib_gen]
            ok = (off >= 0) & (off < self.gen_len[self.fib_gen])
            out = np.where(ok, self.gen_start[self.fib_gen] + off, -1).astype(np.int64)
            self._fib_shift[p] = out
        return out

    def row_mask(self, ell) -> np.ndarray:
        return self.shift_sites(self.pi(ell)) >= 0

    def contains_site(self, j) -> bool:
        return (int(j[0]), int(j[1])) in self.index


@lru_cache(maxsize=32)
def site_box(trunc: TruncationBox, kmap: MomentumMap, geom: GeometryParams) -> SiteBox:
    return SiteBox(trunc, kmap, geom)


class MomentumOperator:
    """Momentum-preserving operator on a SiteBox.

    ``dropped`` records the l^1 mass of product terms that fell outside the
    Fourier box when this operator was produced by ``compose``."""

    __slots__ = ("box", "harm", "dropped")

    def __init__(self, box: SiteBox, harm: dict | None = None, dropped: float = 0.0):
        self.box = box
        self.harm = {}
        self.dropped = float(dropped)
        if harm:
            L = box.trunc.fourier_radius
            for ell, vec in harm.items():
                ell = tuple(int(x) for x in ell)
                if len(ell) != box.d:
                    raise ValueError("Fourier index of wrong dimension")
                if _norm(ell) > L * (1 + 1e-14):
                    continue
                vec = np.asarray(vec, dtype=complex)
                vec = np.where(box.row_mask(ell), vec, 0.0)
                if np.any(vec != 0):
                    self.harm[ell] = vec

    # construction helpers
    @property
    def trunc(self) -> TruncationBox:
        return self.box.trunc

    @property
    def map(self) -> MomentumMap:
        return self.box.kmap

    @classmethod
    def zero(cls, box: SiteBox) -> "MomentumOperator":
        return cls(box)

    @classmethod
    def identity(cls, box: SiteBox, c: complex = 1.0) -> "MomentumOperator":
        return cls(box, {(0,) * box.d: np.full(box.n, c, dtype=complex)})

    @classmethod
    def diagonal(cls, box: SiteBox, values) -> "MomentumOperator":
        return cls(box, {(0,) * box.d: np.asarray(values, dtype=complex)})

    @classmethod
    def from_entries(cls, box: SiteBox, entries: dict) -> "MomentumOperator":
        harm: dict = {}
        for (j, ell), val in entries.items():
            ell = tuple(int(x) for x in ell)
            j = (int(j[0]), int(j[1]))
            i = box.index.get(j)
            if i is None:
                continue
            vec = harm.setdefault(ell, np.zeros(box.n, dtype=complex))
            vec[i] += val
        return cls(box, harm)

    def entries(self) -> dict:
        out = {}
        for ell in sorted(self.harm):
            vec = self.harm[ell]
            for i in np.flatnonzero(vec):
                out[(tuple(int(x) for x in self.box.sites[i]), ell)] = complex(vec[i])
        return out

    def entry(self, j, ell) -> complex:
        vec = self.harm.get(tuple(ell))
        i = self.box.index.get((int(j[0]), int(j[1])))
        if vec is None or i is None:
            return 0.0j
        return complex(vec[i])

    def nnz(self) -> int:
        return int(sum(np.count_nonzero(v) for v in self.harm.values()))

    def is_zero(self) -> bool:
        return not self.harm

    def copy(self) -> "MomentumOperator":
        out = MomentumOperator(self.box)
        out.harm = {k: v.copy() for k, v in self.harm.items()}
        out.dropped = self.dropped
        return out

    def _check(self, other: "MomentumOperator"):
        if other.box is not self.box:
            if other.box.kmap != self.box.kmap:
                raise ValueError("operators carry different momentum maps")
            raise ValueError("operators live on different truncation boxes")

    def __add__(self, other: "MomentumOperator") -> "MomentumOperator":
        self._check(other)
        out = {k: v.copy() for k, v in self.harm.items()}
        for k, v in other.harm.items():
            if k in out:
                out[k] = out[k] + v
            else:
                out[k] = v.copy()
        res = MomentumOperator(self.box)
        res.harm = {k: v for k, v in out.items() if np.any(v != 0)}
        res.dropped = self.dropped + other.dropped
        return res

    def __neg__(self) -> "MomentumOperator":
        res = MomentumOperator(self.box)
        res.harm = {k: -v for k, v in self.harm.items()}
        res.dropped = self.dropped
        return res

    def __sub__(self, other: "MomentumOperator") -> "MomentumOperator":
        return self + (-other)

    def scale(self, c: complex) -> "MomentumOperator":
        res = MomentumOperator(self.box)
        if c != 0:
            res.harm = {k: c * v for k, v in self.harm.items()}
        res.dropped = abs(c) * self.dropped
        return res

    __rmul__ = scale

    def __mul__(self, c):
        return self.scale(c)

    def map_entries(self, fn) -> "MomentumOperator":
        """Apply fn(ell, vec) -> vec harmonic by harmonic."""
        return MomentumOperator(self.box, {k: fn(k, v) for k, v in self.harm.items()})

    def max_abs(self) -> float:
        if not self.harm:
            return 0.0
        return float(max(np.abs(v).max() for v in self.harm.values()))

    def l1_mass(self) -> float:
        return float(sum(np.abs(v).sum() for v in self.harm.values()))

    def adjoint(self) -> "MomentumOperator":
        """Adjoint in the sense (M*)_j^{j-pi(l)}(l) = conj M_{j-pi(l)}^j(-l)."""
        box = self.box
        out = {}
        for ell, vec in self.harm.items():
            neg = tuple(-x for x in ell)
            sh = box.shift_sites(box.pi(ell))
            # entry of M at (row j', harmonic l) maps to M* at (row j'-pi(l), harmonic -l)
            new = np.zeros(box.n, dtype=complex)
            ok = sh >= 0
            new[sh[ok]] = np.conj(vec[ok])
            out[neg] = new
        return MomentumOperator(box, out)

    def time_average(self) -> "MomentumOperator":
        z = (0,) * self.box.d
        return MomentumOperator(self.box, {z: self.harm[z]} if z in self.harm else {})

    def diagonal_values(self) -> np.ndarray:
        z = (0,) * self.box.d
        return self.harm.get(z, np.zeros(self.box.n, dtype=complex)).copy()

    def to_dense(self, phi=None) -> np.ndarray:
        """Dense site matrix of sum_l M(l) e^{i l.phi} (phi = 0 by default)."""
        box = self.box
        A = np.zeros((box.n, box.n), dtype=complex)
        for ell, vec in self.harm.items():
            ph = 1.0 if phi is None else np.exp(1j * float(np.dot(ell, phi)))
            sh = box.shift_sites(box.pi(ell))
            ok = np.flatnonzero(sh >= 0)
            A[ok, sh[ok]] += vec[ok] * ph
        return A

    def allclose(self, other: "MomentumOperator", atol: float = 1e-12) -> bool:
        return (self - other).max_abs() <= atol


@dataclass(frozen=True)
class OrderWeight:
    n: int
    m: int

    def __post_init__(self):
        if self.n < 0 or self.m < 0:
            raise ValueError("order weights must be nonnegative")


@dataclass(frozen=True)
class NormBound:
    upper: float
    lower: float

    def __post_init__(self):
        if not (0.0 <= self.lower <= self.upper * (1 + 1e-12) + 1e-300):
            raise ValueError(f"invalid bracket lower={self.lower} upper={self.upper}")


def seq_norm(u, p: float) -> float:
    """Norm ||u||_1 + ||u||_{h^p} of a sequence on Z^2.

    ``u`` is a dict site -> value."""
    vals = np.array([abs(x) for x in u.values()], dtype=float)
    if vals.size == 0:
        return 0.0
    br = np.array([math.sqrt(1.0 + k[0] ** 2 + k[1] ** 2) for k in u.keys()])
    return float(vals.sum() + math.sqrt(float(np.sum(br ** (2 * p) * vals**2))))


def kernel_norm(kernel: dict, p: float) -> float:
    return seq_norm(kernel, p)


def _row_weight(box: SiteBox, w: OrderWeight | None) -> np.ndarray | None:
    if w is None or (w.n == 0 and w.m == 0):
        return None
    mu = box.geom.mu
    return box.jbr ** (mu * w.n) * box.bbr ** w.m


def _weighted_groups(M: MomentumOperator, a: float, rw) -> dict:
    """Per momentum shift k = pi(l): row vector of sum_l e^{a|l|}|M(l)| (times row weight)."""
    box = M.box
    groups: dict = {}
    for ell, vec in M.harm.items():
        w = np.abs(vec) * math.exp(a * _norm(ell))
        if rw is not None:
            w = w * rw
        k = box.pi(ell)
        if k in groups:
            groups[k] = groups[k] + w
        else:
            groups[k] = w
    return groups


def majorant_matrix(M: MomentumOperator, a: float, w: OrderWeight | None = None) -> np.ndarray:
    box = M.box
    rw = _row_weight(box, w)
    A = np.zeros((box.n, box.n))
    for k, vec in _weighted_groups(M, a, rw).items():
        sh = box.shift_sites(k)
        ok = np.flatnonzero(sh >= 0)
        A[ok, sh[ok]] += vec[ok]
    return A


def _upper_from_groups(groups: dict, p: float) -> float:
    kern = {k: float(v.max()) for k, v in groups.items() if v.size and v.max() > 0}
    return 2.0 ** (2 * p + 1) * kernel_norm(kern, p)


def order_norm(M: MomentumOperator, a: float, w: OrderWeight | None, p: float = 1.0,
               lower: bool = True) -> NormBound:
    """Bracket of |M|_{a,-N}: kernel Young bound above, coordinate vectors below."""
    if a < 0:
        raise ValueError("width a must be nonnegative")
    box = M.box
    rw = _row_weight(box, w)
    groups = _weighted_groups(M, a, rw)
    up = _upper_from_groups(groups, p)
    if not lower or up == 0.0:
        return NormBound(up, 0.0)
    A = np.zeros((box.n, box.n))
    for k, vec in groups.items():
        sh = box.shift_sites(k)
        ok = np.flatnonzero(sh >= 0)
        A[ok, sh[ok]] += vec[ok]
    brp = box.jbr**p
    col_l1 = A.sum(axis=0)
    col_hp = np.sqrt(((brp[:, None] * A) ** 2).sum(axis=0))
    lo = float(np.max((col_l1 + col_hp) / (1.0 + brp)))
    return NormBound(up, min(lo, up))


def majorant_norm(M: MomentumOperator, a: float, p: float = 1.0, lower: bool = True) -> NormBound:
    return order_norm(M, a, None, p, lower)


def compose_split(M: MomentumOperator, N: MomentumOperator, classify=None, n_classes: int = 1):
    """Product MN with each chain term routed to a class.

    ``classify(l1, rows)`` returns an integer class per row j for the chain
    j -> j - pi(l1); rows is the boolean mask of rows whose intermediate site is
    in the box.  Returns a list of n_classes operators; terms whose total
    harmonic leaves the Fourier box are dropped and their l^1 mass recorded."""
    M._check(N)
    box = M.box
    L = box.trunc.fourier_radius
    outs = [dict() for _ in range(n_classes)]
    dropped = 0.0
    if not M.harm or not N.harm:
        return [MomentumOperator(box) for _ in range(n_classes)]
    n_keys = list(N.harm.keys())
    n_stack = np.stack([N.harm[k] for k in n_keys])
    n_arr = np.array(n_keys, dtype=np.int64)
    for l1 in sorted(M.harm):
        m1 = M.harm[l1]
        sh = box.shift_sites(box.pi(l1))
        ok = sh >= 0
        rows = np.flatnonzero(ok & (m1 != 0))
        if rows.size == 0:
            continue
        gathered = n_stack[:, sh[rows]] * m1[rows][None, :]
        tot = n_arr + np.array(l1, dtype=np.int64)[None, :]
        inside = (tot**2).sum(axis=1) <= L * L * (1 + 1e-14)
        if not inside.all():
            dropped += float(np.abs(gathered[~inside]).sum())
        cls = None
        if classify is not None:
            cls_full = np.asarray(classify(l1, ok))
            cls = cls_full[rows]
        for t in np.flatnonzero(inside):
            ell = tuple(int(x) for x in tot[t])
            vals = gathered[t]
            if cls is None:
                tgt = outs[0].get(ell)
                if tgt is None:
                    tgt = np.zeros(box.n, dtype=complex)
                    outs[0][ell] = tgt
                tgt[rows] += vals
            else:
                for c in range(n_classes):
                    sel = cls == c
                    if not sel.any():
                        continue
                    tgt = outs[c].get(ell)
                    if tgt is None:
                        tgt = np.zeros(box.n, dtype=complex)
                        outs[c][ell] = tgt
                    tgt[rows[sel]] += vals[sel]
    res = [MomentumOperator(box, o) for o in outs]
    res[0].dropped = dropped
    return res


def compose(M: MomentumOperator, N: MomentumOperator) -> MomentumOperator:
    """(MN)_j^{j-pi(l)}(l) = sum_{l1+l2=l} M_j^{j-pi(l1)}(l1) N_{j-pi(l1)}^{j-pi(l)}(l2).

    Intermediate sites are always inside the box because M has no entries with
    columns outside it; the reported drop mass counts terms with |l1+l2| > L."""
    return compose_split(M, N)[0]


def commutator(M: MomentumOperator, N: MomentumOperator) -> MomentumOperator:
    a = compose(M, N)
    b = compose(N, M)
    out = a - b
    out.dropped = a.dropped + b.dropped
    return out


def project_band(M: MomentumOperator, K: float, keep_low: bool) -> MomentumOperator:
    if K < 0:
        raise ValueError("K must be nonnegative")
    keep = {}
    for ell, vec in M.harm.items():
        low = _norm(ell) <= K * (1 + 1e-14)
        if low == keep_low:
            keep[ell] = vec.copy()
    return MomentumOperator(M.box, keep)


def bony_split(M: MomentumOperator, a: float | None = None, delta: float | None = None,
               c: float | None = None):
    """Split M = M^B + M^R with M^B keeping entries |l| <= c <j>^delta."""
    box = M.box
    delta = box.geom.delta if delta is None else delta
    c = box.c if c is None else c
    thr = c * box.jbr**delta
    B, R = {}, {}
    for ell, vec in M.harm.items():
        low = _norm(ell) <= thr
        B[ell] = np.where(low, vec, 0.0)
        R[ell] = np.where(low, 0.0, vec)
    return MomentumOperator(box, B), MomentumOperator(box, R)


def smoothing_constant(p: float, sigma: float) -> float:
    """C(p, sigma) = sup_{k in N} e^{-sigma k} k^p."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if p <= 0:
        return 1.0
    kstar = p / sigma
    cands = {1, max(1, int(math.floor(kstar))), int(math.ceil(kstar))}
    return max(math.exp(-sigma * k + p * math.log(k)) for k in cands if k >= 1)


def selfadjoint_defect(M: MomentumOperator) -> float:
    return (M - M.adjoint()).max_abs()


def lipschitz_norm(samples, a: float, gamma: float, p: float = 1.0,
                   w: OrderWeight | None = None) -> NormBound:
    """sup_omega |M(omega)| + gamma * max pairwise |M(omega) - M(omega')| / |omega - omega'|."""
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    oms = [np.asarray(o, dtype=float) for o, _ in samples]
    sup_u = sup_l = 0.0
    for _, M in samples:
        nb = order_norm(M, a, w, p)
        sup_u = max(sup_u, nb.upper)
        sup_l = max(sup_l, nb.lower)
    lip_u = lip_l = 0.0
    for i in range(len(samples)):
        for k in range(i + 1, len(samples)):
            dist = float(np.linalg.norm(oms[i] - oms[k]))
            if dist == 0:
                raise ValueError("samples must have distinct frequencies")
            nb = order_norm(samples[i][1] - samples[k][1], a, w, p)
            lip_u = max(lip_u, nb.upper / dist)
            lip_l = max(lip_l, nb.lower / dist)
    return NormBound(sup_u + gamma * lip_u, sup_l + gamma * lip_l)


def decay_kernel_constant(p: float, theta: float, radius: int = 400) -> float:
    """Upper-bound factor for kernels f_k <= A e^{-theta |k|}: returns
    2^{2p+1} (sum_k e^{-theta|k|} + sqrt(sum_k <k>^{2p} e^{-2 theta |k|})) summed over Z^2."""
    r = np.arange(-radius, radius + 1)
    k1, k2 = np.meshgrid(r, r, indexing="ij")
    kn = np.sqrt(k1**2 + k2**2)
    e = np.exp(-theta * kn)
    br = 1.0 + kn**2
    return 2.0 ** (2 * p + 1) * float(e.sum() + math.sqrt(float((br**p * e**2).sum())))
