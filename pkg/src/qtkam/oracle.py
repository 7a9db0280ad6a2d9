"""Independent check of the reduction: eigenvalues of the truncated quasi-energy matrix.

H_{(l,j),(l',j')} = (omega.l + |j|^2) delta + V(l - l') [j - j' = pi(l - l')]

The matrix is assembled sparse, split into connected components (the
potential only couples indices along its modes) and each component is
diagonalized densely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .operators import SiteBox, fourier_ball
from .potentials import TravelingWavePotential

__all__ = ["OracleSpectrum", "OracleTooLarge", "spectrum_oracle", "compare_to_oracle",
           "ComparisonReport"]


class OracleTooLarge(ValueError):
    pass


@dataclass
class OracleSpectrum:
    ells: np.ndarray        # (nl, d) Fourier indices
    sites: np.ndarray       # (n, 2) sites
    eigenvalues: np.ndarray  # one per basis index, grouped by component
    eig_comp: np.ndarray    # component of every eigenvalue
    eig_label: np.ndarray   # basis index carrying the largest eigenvector weight
    comp: np.ndarray        # component of every basis index
    omega: tuple

    @property
    def n_sites(self) -> int:
        return self.sites.shape[0]

    def basis(self, b: int):
        li, si = divmod(int(b), self.n_sites)
        return tuple(int(x) for x in self.ells[li]), tuple(int(x) for x in self.sites[si])

    def as_map(self) -> dict:
        """(l, j) -> eigenvalue, labelling each eigenvector by its dominant basis index."""
        out = {}
        for lam, b in zip(self.eigenvalues, self.eig_label):
            out[self.basis(b)] = float(lam)
        return out


def spectrum_oracle(V: TravelingWavePotential, omega, box: SiteBox,
                    fourier_radius: float | None = None, max_block: int = 4000) -> OracleSpectrum:
    om = np.asarray(omega, dtype=float)
    L = box.trunc.fourier_radius if fourier_radius is None else fourier_radius
    ells = np.array(fourier_ball(L, box.d), dtype=np.int64).reshape(-1, box.d)
    nl, n = ells.shape[0], box.n
    N = nl * n
    lindex = {tuple(int(x) for x in e): i for i, e in enumerate(ells)}
    diag = (ells @ om)[:, None] + box.jsq[None, :]
    rows, cols, vals = [], [], []
    for m, c in V.coeffs.items():
        p = box.pi(m)
        sh = box.shift_sites(p)  # index of j - pi(m)
        okj = np.flatnonzero(sh >= 0)
        src = np.array([lindex.get(tuple(int(a - b) for a, b in zip(e, m)), -1) for e in ells])
        okl = np.flatnonzero(src >= 0)
        if okj.size == 0 or okl.size == 0:
            continue
        r = (okl[:, None] * n + okj[None, :]).ravel()
        cc = (src[okl][:, None] * n + sh[okj][None, :]).ravel()
        rows.append(r)
        cols.append(cc)
        vals.append(np.full(r.size, c, dtype=complex))
    if rows:
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0, dtype=complex)
    pattern = coo_matrix((np.ones(rows.size), (rows, cols)), shape=(N, N)).tocsr()
    ncomp, comp = connected_components(pattern, directed=False)
    sizes = np.bincount(comp, minlength=ncomp)
    biggest = int(sizes.max(initial=0))
    if biggest > max_block:
        raise OracleTooLarge(f"largest coupled block has {biggest} indices (limit {max_block}); "
                             f"total size {N}")
    # position of every index inside its block, blocks of equal size batched together
    order = np.lexsort((np.arange(N), comp))
    first = np.zeros(ncomp + 1, dtype=np.int64)
    first[1:] = np.cumsum(sizes)
    loc = np.empty(N, dtype=np.int64)
    loc[order] = np.arange(N) - first[comp[order]]
    dflat = diag.ravel()
    eigs = np.empty(N)
    lab = np.empty(N, dtype=np.int64)
    ecomp = np.empty(N, dtype=np.int64)
    pos = 0
    for k in np.unique(sizes):
        cs = np.flatnonzero(sizes == k)
        slot = np.full(ncomp, -1, dtype=np.int64)
        slot[cs] = np.arange(cs.size)
        members = np.empty((cs.size, k), dtype=np.int64)
        sel = np.flatnonzero(slot[comp] >= 0)
        members[slot[comp[sel]], loc[sel]] = sel
        A = np.zeros((cs.size, k, k), dtype=complex)
        A[:, np.arange(k), np.arange(k)] = dflat[members]
        ent = np.flatnonzero(slot[comp[rows]] >= 0)
        np.add.at(A, (slot[comp[rows[ent]]], loc[rows[ent]], loc[cols[ent]]), vals[ent])
        A = 0.5 * (A + np.conj(np.swapaxes(A, 1, 2)))
        w, U = np.linalg.eigh(A)
        best = np.argmax(np.abs(U) ** 2, axis=1)
        cnt = cs.size * k
        eigs[pos:pos + cnt] = w.ravel()
        lab[pos:pos + cnt] = np.take_along_axis(members, best, axis=1).ravel()
        ecomp[pos:pos + cnt] = np.repeat(cs, k)
        pos += cnt
    return OracleSpectrum(ells, box.sites.copy(), eigs, ecomp, lab, comp,
                          tuple(float(x) for x in om))


@dataclass
class ComparisonReport:
    max_mismatch: float
    mean_mismatch: float
    count: int
    collisions: int
    worst: tuple | None
    interior_margin: float
    rows: list


def compare_to_oracle(spec, oracle: OracleSpectrum, interior_margin: float,
                      box: SiteBox | None = None, keep_rows: bool = False) -> ComparisonReport:
    """Greedy nearest-eigenvalue matching of omega.l + Omega_j inside each coupled block.

    ``spec`` is a ReducedSpectrum or a plain array of Omega_j (then ``box`` is required)."""
    if hasattr(spec, "Omega"):
        Omega, box = spec.Omega, spec.box
    else:
        Omega = spec
    om = np.asarray(oracle.omega)
    L = float(np.sqrt((oracle.ells**2).sum(axis=1)).max(initial=0.0))
    J = box.trunc.site_radius
    n = box.n
    lin = np.sqrt((oracle.ells**2).sum(axis=1)) <= L - interior_margin + 1e-12
    jin = box.jnorm <= J - interior_margin + 1e-12
    interior = (lin[:, None] & jin[None, :]).ravel()
    pred_all = ((oracle.ells @ om)[:, None] + np.asarray(Omega)[None, :]).ravel()
    # eigenvalues per component
    e_order = np.argsort(oracle.eig_comp, kind="stable")
    e_comp_sorted = oracle.eig_comp[e_order]
    b_idx = np.flatnonzero(interior)
    b_order = b_idx[np.argsort(oracle.comp[b_idx], kind="stable")]
    b_comp = oracle.comp[b_order]
    starts = np.searchsorted(e_comp_sorted, b_comp, side="left")
    ends = np.searchsorted(e_comp_sorted, b_comp, side="right")
    mism = np.zeros(b_order.size)
    collisions = 0
    rows = []
    i = 0
    while i < b_order.size:
        c = b_comp[i]
        k = i
        while k < b_order.size and b_comp[k] == c:
            k += 1
        preds = pred_all[b_order[i:k]]
        ev = oracle.eigenvalues[e_order[starts[i]:ends[i]]]
        dist = np.abs(preds[:, None] - ev[None, :])
        nearest = dist.argmin(axis=1)
        pairs = sorted((dist[a, b], a, b) for a in range(k - i) for b in range(ev.size))
        used_p, used_e = set(), set()
        got = np.full(k - i, np.inf)
        for dd, a, b in pairs:
            if a in used_p or b in used_e:
                continue
            used_p.add(a)
            used_e.add(b)
            got[a] = dd
            if b != nearest[a]:
                collisions += 1
        mism[i:k] = got
        i = k
    if b_order.size == 0:
        return ComparisonReport(0.0, 0.0, 0, 0, None, interior_margin, [])
    w = int(np.argmax(mism))
    worst_b = int(b_order[w])
    if keep_rows:
        for t, b in enumerate(b_order):
            ell, j = oracle.basis(b)
            rows.append((ell, j, float(pred_all[b]), float(mism[t])))
        rows.sort()
    return ComparisonReport(float(mism.max()), float(mism.mean()), int(b_order.size), collisions,
                            oracle.basis(worst_b), interior_margin, rows)
