"""Dividing stage: split an HSS matrix into block-diagonal pieces plus low-rank updates.

At a nonleaf node ``p`` with children ``i, j`` the block

    D_p = [[D_i, U_i B U_j^T], [U_j B^T U_i^T, D_j]]

is written as ``diag(D_i - U_i H_i U_i^T, D_j - U_j H_j U_j^T) + Z_p Z_p^T``.
The child corrections ``H`` are pushed down the tree lazily with the
generator-update rule (only ``D`` and ``B`` change; ``U``, ``R`` are reused).
The balanced variant scales the two corrections by ``1/||B||`` and ``||B||``
so that the generator norms grow at most linearly with the tree depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidDimensionError
from .hss import HssMatrix, HssTree

# below this ||B||_2 the balancing scale is not applied
NORM_FLOOR = 1e-300


@dataclass(frozen=True, eq=False)
class DividedForm:
    tree: HssTree
    hss: HssMatrix
    D_hat: list
    B_hat: list
    Z: list
    updates: list
    balanced: bool

    @property
    def overflow(self):
        parts = [x for x in self.D_hat + self.B_hat + self.Z if x is not None]
        return not all(np.all(np.isfinite(x)) for x in parts)


@dataclass(frozen=True)
class NormGrowthReport:
    rho_B: float
    rho_D: float
    rho_B_tilde: float
    rho_D_tilde: float
    levels: int
    overflow: bool = False

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _norm2(M):
    if M is None or M.size == 0:
        return 0.0
    if not np.all(np.isfinite(M)):
        return float("inf")
    return float(np.linalg.norm(M, 2))


def _add(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def update_hss_block(H, node, Hmat):
    """Return a copy of ``H`` whose diagonal block at ``node`` is ``D_node - U H U^T``.

    Only the ``D`` and ``B`` generators inside the subtree of ``node`` change;
    the bases are shared with the input.
    """
    t = H.tree
    Hmat = np.asarray(Hmat, dtype=float)
    r = H.rank_of(node) if node != t.root else 0
    if Hmat.shape != (r, r):
        raise InvalidDimensionError(f"update must be {r}x{r}, got {Hmat.shape}")
    D, B = list(H.D), list(H.B)
    pending = {node: Hmat}
    for k in reversed(t.subtree(node)):
        acc = pending.pop(k, None)
        if acc is None:
            continue
        if t.is_leaf(k):
            D[k] = D[k] - H.U[k] @ acc @ H.U[k].T
            continue
        c1, c2 = t.children[k]
        B[c1] = B[c1] - H.R[c1] @ acc @ H.R[c2].T
        pending[c1] = H.R[c1] @ acc @ H.R[c1].T
        pending[c2] = H.R[c2] @ acc @ H.R[c2].T
    return HssMatrix(t, D, list(H.U), list(H.R), B)


def divide_stage(H, balanced=True):
    """Top-down dividing of every nonleaf node.

    With ``balanced=True`` and ``b = ||B_i||_2`` the left child receives
    ``B B^T / b`` and the right child ``b I`` (or the transposed arrangement
    when B has more columns than rows), so the update rank is
    ``min(rowsize(B), colsize(B))``.  ``balanced=False`` is the original
    unscaled scheme ``B B^T`` / ``I`` kept for comparison.
    """
    t = H.tree
    N = t.node_count
    D = list(H.D)
    B = [None if b is None else b.copy() for b in H.B]
    Z = [None] * N
    pending = [None] * N
    applied = [None] * N
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(N - 1, -1, -1):
            acc = pending[k]
            applied[k] = acc
            if t.is_leaf(k):
                if acc is not None:
                    D[k] = D[k] - H.U[k] @ acc @ H.U[k].T
                continue
            c1, c2 = t.children[k]
            if acc is not None:
                B[c1] = B[c1] - H.R[c1] @ acc @ H.R[c2].T
                pending[c1] = _add(pending[c1], H.R[c1] @ acc @ H.R[c1].T)
                pending[c2] = _add(pending[c2], H.R[c2] @ acc @ H.R[c2].T)
            Bk = B[c1]
            r1, r2 = Bk.shape
            U1, U2 = H.basis(c1), H.basis(c2)
            b = _norm2(Bk)
            if b == 0.0:
                Z[k] = np.zeros((t.size(k), 0))
                continue
            scale = b if (balanced and b > NORM_FLOOR and np.isfinite(b)) else 1.0
            root_s = np.sqrt(scale)
            if r2 <= r1:
                h1, h2 = Bk @ Bk.T / scale, scale * np.eye(r2)
                Z[k] = np.vstack([U1 @ (Bk / root_s), root_s * U2])
            else:
                h1, h2 = scale * np.eye(r1), Bk.T @ Bk / scale
                Z[k] = np.vstack([root_s * U1, U2 @ (Bk.T / root_s)])
            pending[c1] = _add(pending[c1], h1)
            pending[c2] = _add(pending[c2], h2)
    D_hat = [D[k] if t.is_leaf(k) else None for k in range(N)]
    return DividedForm(t, H, D_hat, B, Z, applied, balanced)


def divided_block(div, k):
    """Dense block of node ``k`` rebuilt from the divided form (small ``n`` only)."""
    t = div.tree
    if t.is_leaf(k):
        return div.D_hat[k].copy()
    c1, c2 = t.children[k]
    A1, A2 = divided_block(div, c1), divided_block(div, c2)
    out = np.zeros((t.size(k), t.size(k)))
    n1 = A1.shape[0]
    out[:n1, :n1] = A1
    out[n1:, n1:] = A2
    return out + div.Z[k] @ div.Z[k].T


def norm_growth(before, after):
    t = before.tree
    leaves = t.leaves
    nonroot = [k for k in range(t.node_count) if before.B[k] is not None]
    with np.errstate(over="ignore", invalid="ignore"):
        rho_B = max((_norm2(before.B[k]) for k in nonroot), default=0.0)
        rho_D = max(_norm2(before.D[k]) for k in leaves)
        rho_Bt = max((_norm2(after.B_hat[k]) for k in nonroot), default=0.0)
        rho_Dt = max(_norm2(after.D_hat[k]) for k in leaves)
    return NormGrowthReport(rho_B, rho_D, rho_Bt, rho_Dt, t.levels,
                            overflow=not np.isfinite(rho_Bt) or not np.isfinite(rho_Dt))
