"""Conquering stage: eigendecompositions of the divided blocks, merged bottom-up.

At a nonleaf node ``p`` with children ``c1, c2`` and local update ``Z_p``
(``r`` columns) the block is ``diag(Q1 L1 Q1^T, Q2 L2 Q2^T) + Z Z^T``.  With
``Zh = diag(Q1, Q2)^T Z`` and the merged eigenvalues sorted by ``P`` it
becomes ``diag(d) + Zh Zh^T``, which is diagonalized by ``r`` rank-one steps.
Step ``j`` deflates, solves the secular equation, rebuilds ``v_hat`` with
Loewner's formula and stores a Cauchy-like factor

    Q_hat = diag(v_hat) (1 / (d_i - lambda_j)) diag(b)

as five vectors.  The eigenmatrix of ``p`` is
``diag(Q1, Q2) P E_1 ... E_r`` where each ``E_j`` wraps ``Q_hat`` with its
deflation rotations and the permutation that re-sorts the spectrum.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np

from . import flops, trifmm
from .dense import symmetric_eig
from .errors import DensifyCapError, InvalidDimensionError, InvalidInputError, PoleError
from .hss import HssTree
from .secular import SolverConfig, deflate, loewner_vhat, normalization_b, solve_secular

DENSIFY_CAP = 4096


@dataclass(frozen=True, eq=False)
class CauchyEigFactor:
    """One rank-one step: ``E = G^T [Q_hat, 0; 0, I] M`` (``M`` the merge permutation).

    ``anchor`` is the per-root shift side: ``lam = d[anchor] + eta``.
    """

    vhat: np.ndarray
    b: np.ndarray
    d: np.ndarray
    lam: np.ndarray
    eta: np.ndarray
    anchor: np.ndarray
    deflation: object
    order: int = trifmm.DEFAULT_ORDER
    leaf: int = trifmm.DEFAULT_LEAF

    @property
    def size(self):
        return self.deflation.n

    @property
    def kept(self):
        return self.d.size

    def storage(self):
        rec = self.deflation
        return (6 * self.d.size + 4 * rec.rot_i.size + rec.kept_idx.size
                + rec.deflated_idx.size + rec.d_deflated.size + rec.n)

    def qhat_apply(self, X, transpose=False):
        """``Q_hat X`` or ``Q_hat^T X`` through the Cauchy FMM with local shifting."""
        if self.d.size == 0:
            return X.copy()
        if np.isnan(self.b).any():
            return np.full_like(X, np.nan)
        if transpose:
            shift = trifmm.ShiftData(self.d, self.eta, self.anchor)
            fp = trifmm.plan_for_shift(shift, self.leaf, self.order)
            W = self.vhat[:, None] * X
            return self.b[:, None] * trifmm.matvec(fp, shift, W, "full", "inverse")
        shift = trifmm.ShiftData(self.d, self.eta, self.anchor, roots_are_sources=True)
        fp = trifmm.plan_for_shift(shift, self.leaf, self.order)
        W = self.b[:, None] * X
        return -self.vhat[:, None] * trifmm.matvec(fp, shift, W, "full", "inverse")

    def apply(self, X, transpose=False):
        """``E X`` or ``E^T X`` for an ``(n, k)`` block."""
        rec = self.deflation
        nk = self.d.size
        if transpose:
            Y = rec.rotate(X)
            top = self.qhat_apply(Y[rec.kept_idx], transpose=True)
            return np.vstack([top, Y[rec.deflated_idx]])[rec.merge_perm]
        T = np.empty_like(X)
        T[rec.merge_perm] = X
        Y = np.empty_like(X)
        Y[rec.kept_idx] = self.qhat_apply(T[:nk])
        Y[rec.deflated_idx] = T[nk:]
        return rec.rotate(Y, transpose=True)

    def dense_qhat(self):
        """Dense ``Q_hat`` from the stored vectors (test helper)."""
        diff = (self.d[:, None] - self.d[None, self.anchor]) - self.eta[None, :]
        return self.vhat[:, None] / diff * self.b[None, :]


@dataclass(frozen=True, eq=False)
class StructuredEigenmatrix:
    tree: HssTree
    leaf_Q: list
    node_perm: list
    node_factors: list

    @property
    def n(self):
        return self.tree.n

    def storage(self):
        """Number of stored scalars (floats and indices)."""
        total = 0
        for k in range(self.tree.node_count):
            if self.leaf_Q[k] is not None:
                total += self.leaf_Q[k].size
            if self.node_perm[k] is not None:
                total += self.node_perm[k].size
            total += sum(f.storage() for f in self.node_factors[k] or ())
        return total


@dataclass(frozen=True, eq=False)
class EigResult:
    lam: np.ndarray
    Q: StructuredEigenmatrix
    stats: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.lam.size


def _leaf_eig(A):
    e = symmetric_eig(A)
    flops.add("leaf_eig", 9 * A.shape[0] ** 3)
    return e.values, e.vectors


def _rank_one_step(d, z, cfg):
    """Diagonalize ``diag(d) + z z^T``; returns the factor, the new spectrum and solver info."""
    dk, vk, rec = deflate(d, z, cfg.tau)
    res = solve_secular(dk, vk, cfg)
    lam_k = res.lam
    failed = False
    if dk.size:
        try:
            vabs = loewner_vhat(dk, lam_k, res.eta, res.anchor, cfg.fmm_order, cfg.fmm_leaf)
            b = normalization_b(dk, lam_k, res.eta, vabs, res.anchor, cfg.fmm_order, cfg.fmm_leaf)
        except (InvalidInputError, PoleError):
            if cfg.use_local_shifting:
                raise
            # the unshifted ablation can land roots on poles; keep going with NaN factors
            failed = True
            vabs = b = np.full(dk.size, np.nan)
        vhat = np.where(vk < 0, -vabs, vabs)
    else:
        vhat = b = np.zeros(0)
    merged = np.concatenate([lam_k, rec.d_deflated])
    perm = np.argsort(merged, kind="stable")
    rec = replace(rec, merge_perm=perm)
    fac = CauchyEigFactor(vhat, b, dk, lam_k, res.eta, res.anchor, rec, cfg.fmm_order, cfg.fmm_leaf)
    flops.add("secular", 30 * dk.size * max(1, int(res.iterations.max(initial=0))))
    return fac, merged[perm], res, failed


def conquer_stage(div, cfg=None):
    """Eigenvalues and structured eigenmatrix of the matrix behind ``div``.

    ``stats`` holds per-node records (``node``, ``size``, ``rank``,
    ``deflated``, ``iterations``, ``unconverged``, ``mu``) plus totals and
    ``mu_root``, the largest fraction of roots at the root node that needed
    more than five iterations (or failed) in any of its rank-one steps.
    """
    cfg = cfg or SolverConfig()
    t = div.tree
    N = t.node_count
    leaf_Q = [None] * N
    perms = [None] * N
    factors = [None] * N
    lam = [None] * N
    Qs = StructuredEigenmatrix(t, leaf_Q, perms, factors)
    node_stats = []
    hist = Counter()
    unconverged = 0
    interlacing_ok = True
    failed_steps = 0
    for k in range(N):
        if t.is_leaf(k):
            lam[k], leaf_Q[k] = _leaf_eig(div.D_hat[k])
            continue
        c1, c2 = t.children[k]
        Z = div.Z[k]
        n1 = t.size(c1)
        Zh = np.vstack([eigmat_apply(Qs, c1, Z[:n1], transpose=True),
                        eigmat_apply(Qs, c2, Z[n1:], transpose=True)])
        merged = np.concatenate([lam[c1], lam[c2]])
        perm = np.argsort(merged, kind="stable")
        perms[k] = perm
        d = merged[perm]
        Zh = Zh[perm]
        lam[c1] = lam[c2] = None
        facs = []
        rec = {"node": k, "size": t.size(k), "rank": Z.shape[1], "deflated": 0,
               "iterations": 0, "unconverged": 0, "mu": 0.0}
        for j in range(Z.shape[1]):
            fac, d, res, failed = _rank_one_step(d, Zh[:, j].copy(), cfg)
            failed_steps += failed
            facs.append(fac)
            if j + 1 < Z.shape[1]:
                Zh[:, j + 1:] = fac.apply(Zh[:, j + 1:], transpose=True)
            rec["deflated"] += fac.size - fac.kept
            rec["iterations"] = max(rec["iterations"], int(res.iterations.max(initial=0)))
            bad = int((~res.converged).sum())
            rec["unconverged"] += bad
            rec["mu"] = max(rec["mu"], res.fraction_unconverged_after(5))
            hist.update(res.iterations.tolist())
            unconverged += bad
            interlacing_ok &= res.interlacing_ok
        factors[k] = facs
        lam[k] = d
        node_stats.append(rec)
    root_rec = node_stats[-1] if node_stats else {"mu": 0.0}
    stats = {
        "nodes": node_stats,
        "iteration_hist": dict(sorted(hist.items())),
        "unconverged": unconverged,
        "interlacing_ok": bool(interlacing_ok),
        "mu_root": float(root_rec["mu"]),
        "deflated": sum(r["deflated"] for r in node_stats),
        "failed_steps": failed_steps,
    }
    return EigResult(lam[t.root], Qs, stats)


def eigmat_apply(Q, node, x, transpose=False):
    """``Q_node x`` (or ``Q_node^T x``) for the eigenmatrix of the subtree at ``node``."""
    t = Q.tree
    x = np.asarray(x, dtype=float)
    vec = x.ndim == 1
    X = x[:, None] if vec else x
    if X.shape[0] != t.size(node):
        raise InvalidDimensionError(
            f"block has {X.shape[0]} rows, node {node} has size {t.size(node)}")
    Y = _apply(Q, node, X, transpose)
    return Y[:, 0] if vec else Y


def _apply(Q, k, X, transpose):
    t = Q.tree
    if t.is_leaf(k):
        Qk = Q.leaf_Q[k]
        flops.add("leaf_apply", 2 * Qk.size * X.shape[1])
        return Qk.T @ X if transpose else Qk @ X
    c1, c2 = t.children[k]
    n1 = t.size(c1)
    perm = Q.node_perm[k]
    if transpose:
        Y = np.vstack([_apply(Q, c1, X[:n1], True), _apply(Q, c2, X[n1:], True)])[perm]
        for fac in Q.node_factors[k]:
            Y = fac.apply(Y, transpose=True)
        return Y
    Y = X
    for fac in reversed(Q.node_factors[k]):
        Y = fac.apply(Y)
    T = np.empty_like(Y)
    T[perm] = Y
    return np.vstack([_apply(Q, c1, T[:n1], False), _apply(Q, c2, T[n1:], False)])


def densify(Q, cap=DENSIFY_CAP):
    """Dense eigenmatrix (``Q`` applied to the identity); refuses ``n > cap``."""
    n = Q.n
    if n > cap:
        raise DensifyCapError(f"n = {n} exceeds the densification cap {cap}")
    return eigmat_apply(Q, Q.tree.root, np.eye(n))


def eigendecompose(H, cfg=None, balanced=True):
    """Divide and conquer ``H``; returns ``(EigResult, DividedForm)``."""
    from .divide import divide_stage

    div = divide_stage(H, balanced=balanced)
    return conquer_stage(div, cfg), div
