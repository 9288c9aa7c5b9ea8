"""Symmetric hierarchically semiseparable (HSS) matrices.

A symmetric HSS matrix is stored over a postordered full binary tree.  Every
leaf ``k`` owns a dense diagonal block ``D[k]`` and (unless it is the root) an
orthonormal basis ``U[k]``; every node whose parent is not the root owns a
translation block ``R[k]`` so that the parent basis is
``U_p = [U_c1 R_c1; U_c2 R_c2]``; every left child ``c1`` owns the coupling
block ``B[c1]`` with ``A[I_c1, I_c2] = U_c1 B_c1 U_c2^T``.

Node ids are 0-based postorder positions, so the root is ``node_count - 1``
and the subtree of ``k`` is the contiguous id range ``[k - size + 1, k]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidDimensionError, InvalidInputError, UnsupportedBandwidthError


@dataclass(frozen=True, eq=False)
class HssTree:
    children: tuple
    parent: np.ndarray
    level: np.ndarray
    start: np.ndarray
    stop: np.ndarray
    postordered: bool = True

    @classmethod
    def from_leaf_sizes(cls, sizes):
        sizes = [int(s) for s in sizes]
        if not sizes or min(sizes) < 1:
            raise InvalidDimensionError("leaf sizes must be positive")
        children, start, stop, level = [], [], [], []
        offsets = np.concatenate([[0], np.cumsum(sizes)])

        def build(lo, hi, lev):
            if hi - lo == 1:
                kids = None
            else:
                mid = lo + (hi - lo + 1) // 2
                kids = (build(lo, mid, lev + 1), build(mid, hi, lev + 1))
            children.append(kids)
            start.append(offsets[lo])
            stop.append(offsets[hi])
            level.append(lev)
            return len(children) - 1

        build(0, len(sizes), 0)
        parent = np.full(len(children), -1, dtype=np.int64)
        for k, kids in enumerate(children):
            if kids is not None:
                parent[kids[0]] = k
                parent[kids[1]] = k
        return cls(
            children=tuple(children),
            parent=parent,
            level=np.asarray(level, dtype=np.int64),
            start=np.asarray(start, dtype=np.int64),
            stop=np.asarray(stop, dtype=np.int64),
        )

    @classmethod
    def uniform(cls, n, leaf_size):
        """Equal contiguous leaves of ``leaf_size`` rows; the last leaf absorbs the remainder."""
        n, leaf_size = int(n), int(leaf_size)
        if leaf_size < 2:
            raise InvalidDimensionError("leaf_size must be at least 2")
        if n < 1:
            raise InvalidDimensionError("n must be positive")
        m = max(1, n // leaf_size)
        sizes = [leaf_size] * (m - 1) + [n - leaf_size * (m - 1)]
        return cls.from_leaf_sizes(sizes)

    @property
    def node_count(self):
        return len(self.children)

    @property
    def root(self):
        return len(self.children) - 1

    @property
    def n(self):
        return int(self.stop[self.root])

    @property
    def depth(self):
        return int(self.level.max())

    @property
    def levels(self):
        """Number of tree levels, counting the root level."""
        return self.depth + 1

    def is_leaf(self, k):
        return self.children[k] is None

    @property
    def leaves(self):
        return [k for k in range(self.node_count) if self.children[k] is None]

    def size(self, k):
        return int(self.stop[k] - self.start[k])

    def rows(self, k):
        return np.arange(self.start[k], self.stop[k])

    def subtree(self, k):
        """Node ids of the subtree rooted at ``k`` in postorder."""
        out = []

        def walk(j):
            if self.children[j] is not None:
                walk(self.children[j][0])
                walk(self.children[j][1])
            out.append(j)

        walk(k)
        return out


@dataclass(frozen=True)
class CompressionConfig:
    leaf_size: int = 256
    tol: float = 1e-10
    max_rank: int | None = None

    def __post_init__(self):
        if self.leaf_size < 2:
            raise InvalidInputError("leaf_size must be >= 2")
        if self.tol < 0:
            raise InvalidInputError("tol must be nonnegative")


@dataclass(frozen=True, eq=False)
class HssMatrix:
    tree: HssTree
    D: list
    U: list
    R: list
    B: list
    _basis_cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self):
        return self.tree.n

    def rank_of(self, k):
        """Column count of the (implicit) basis ``U_k``."""
        t = self.tree
        if t.is_leaf(k):
            return self.U[k].shape[1]
        c1 = t.children[k][0]
        if self.R[c1] is not None:
            return self.R[c1].shape[1]
        # children of the root carry no R: read the width off the coupling block
        p = int(t.parent[k])
        c1p, c2p = t.children[p]
        return self.B[c1p].shape[0] if k == c1p else self.B[c1p].shape[1]

    @property
    def hss_rank(self):
        shapes = [b.shape for b in self.B if b is not None]
        return max((max(s) for s in shapes), default=0)

    def basis(self, k):
        """Explicit ``U_k`` assembled from the nested generators."""
        if k in self._basis_cache:
            return self._basis_cache[k]
        t = self.tree
        if t.is_leaf(k):
            u = self.U[k]
        else:
            c1, c2 = t.children[k]
            u = np.vstack([self.basis(c1) @ self.R[c1], self.basis(c2) @ self.R[c2]])
        self._basis_cache[k] = u
        return u


def _tree_for(n, leaf_size):
    if n < 2:
        raise InvalidDimensionError(f"matrix dimension must be >= 2, got {n}")
    return HssTree.uniform(n, leaf_size)


def _truncated_range(M, tol, max_rank):
    """Orthonormal basis of the dominant left singular subspace of ``M``."""
    if M.shape[0] == 0 or M.shape[1] == 0:
        return np.zeros((M.shape[0], 0))
    u, s, _ = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((M.shape[0], 0))
    keep = int(np.count_nonzero(s > tol * s[0])) if tol > 0 else int(np.count_nonzero(s > 0))
    if max_rank is not None:
        keep = min(keep, int(max_rank))
    return u[:, :keep]


def check_symmetric(A, rtol=None):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got shape {A.shape}")
    scale = np.linalg.norm(A, ord="fro")
    if rtol is None:
        rtol = 1e3 * np.finfo(float).eps
    if scale > 0 and np.linalg.norm(A - A.T, ord="fro") > rtol * scale:
        raise InvalidInputError("matrix is not symmetric")
    return A


def build_from_dense(A, cfg=None):
    """Compress a dense symmetric matrix into HSS form.

    Off-diagonal block rows are compressed bottom-up with truncated SVDs at
    relative threshold ``cfg.tol``; nonleaf bases are obtained by compressing
    the children's projected block rows, which makes every ``U`` leaf block
    and every stacked ``(R_c1; R_c2)`` orthonormal.
    """
    cfg = cfg or CompressionConfig()
    A = check_symmetric(A)
    n = A.shape[0]
    tree = _tree_for(n, cfg.leaf_size)
    N, root = tree.node_count, tree.root
    D, U, R, B = [None] * N, [None] * N, [None] * N, [None] * N
    proj = [None] * N  # U_k^T A[I_k, complement(I_k)] in the coordinates of comp(k)
    basis = [None] * N

    for k in range(N):
        if tree.is_leaf(k):
            D[k] = A[tree.start[k]:tree.stop[k], tree.start[k]:tree.stop[k]].copy()
        if k == root:
            break
        comp = np.r_[0:tree.start[k], tree.stop[k]:n]
        if tree.is_leaf(k):
            rows = A[tree.start[k]:tree.stop[k]][:, comp]
            U[k] = _truncated_range(rows, cfg.tol, cfg.max_rank)
            basis[k] = U[k]
        else:
            c1, c2 = tree.children[k]
            stacked = np.vstack([basis[c1].T @ A[tree.start[c1]:tree.stop[c1]][:, comp],
                                 basis[c2].T @ A[tree.start[c2]:tree.stop[c2]][:, comp]])
            V = _truncated_range(stacked, cfg.tol, cfg.max_rank)
            r1 = basis[c1].shape[1]
            R[c1], R[c2] = V[:r1], V[r1:]
            basis[k] = np.vstack([basis[c1] @ R[c1], basis[c2] @ R[c2]])

    for p in range(N):
        if tree.is_leaf(p):
            continue
        c1, c2 = tree.children[p]
        block = A[tree.start[c1]:tree.stop[c1], tree.start[c2]:tree.stop[c2]]
        B[c1] = basis[c1].T @ block @ basis[c2]
    H = HssMatrix(tree, D, U, R, B)
    for k in range(N):
        if basis[k] is not None:
            H._basis_cache[k] = basis[k]
    return H


def _boundary_rows(tree, k, hb, outlier_rows):
    lo, hi, n = int(tree.start[k]), int(tree.stop[k]), tree.n
    rows = set()
    if lo > 0:
        rows.update(range(lo, min(lo + hb, hi)))
    if hi < n:
        rows.update(range(max(hi - hb, lo), hi))
    for i, j in outlier_rows:
        if lo <= i < hi and not lo <= j < hi:
            rows.add(i)
    return np.array(sorted(rows), dtype=np.int64)


def build_banded_plus(n, half_bandwidth, outliers=(), leaf_size=256, diag=3.0, band=-1.0):
    """Exact HSS form of a symmetric banded matrix with optional outlier entries.

    The band has ``diag`` on the main diagonal and ``band`` on the other
    in-band diagonals.  ``outliers`` is an iterable of 0-based ``(i, j, value)``
    triples; each sets both ``A[i, j]`` and ``A[j, i]``.  Outliers whose rows
    are not already boundary rows of the enclosing nodes widen the bases along
    the tree path; outliers inside a leaf diagonal block are folded into ``D``.
    """
    n, hb = int(n), int(half_bandwidth)
    tree = _tree_for(n, leaf_size)
    if hb < 0:
        raise UnsupportedBandwidthError("half_bandwidth must be nonnegative")
    if tree.node_count > 1 and hb >= leaf_size:
        raise UnsupportedBandwidthError(
            f"half_bandwidth {hb} must be smaller than leaf_size {leaf_size}")

    extra = {}
    for i, j, v in outliers:
        i, j = int(i), int(j)
        if not (0 <= i < n and 0 <= j < n):
            raise InvalidInputError(f"outlier position ({i}, {j}) outside the matrix")
        extra[(i, j)] = float(v)
        extra[(j, i)] = float(v)
    pairs = list(extra)

    def entries(I, J):
        I, J = np.broadcast_arrays(np.asarray(I)[:, None], np.asarray(J)[None, :])
        gap = np.abs(I - J)
        vals = np.where(gap == 0, diag, np.where(gap <= hb, band, 0.0)).astype(float)
        for (i, j), v in extra.items():
            vals[(I == i) & (J == j)] = v
        return vals

    N, root = tree.node_count, tree.root
    D, U, R, B = [None] * N, [None] * N, [None] * N, [None] * N
    S = [None] * N
    for k in range(N):
        if tree.is_leaf(k):
            D[k] = entries(tree.rows(k), tree.rows(k))
        if k == root:
            continue
        S[k] = _boundary_rows(tree, k, hb, pairs)
        if tree.is_leaf(k):
            U[k] = np.zeros((tree.size(k), S[k].size))
            U[k][S[k] - tree.start[k], np.arange(S[k].size)] = 1.0
    for k in range(N):
        if k == root or tree.is_leaf(k):
            continue
        for c in tree.children[k]:
            R[c] = (S[c][:, None] == S[k][None, :]).astype(float)
    for p in range(N):
        if not tree.is_leaf(p):
            c1, c2 = tree.children[p]
            B[c1] = entries(S[c1], S[c2])
    return HssMatrix(tree, D, U, R, B)


def build_tridiagonal(n, diag=3.0, offdiag=-1.0, leaf_size=256):
    """Exact HSS form (rank <= 2) of the constant symmetric tridiagonal matrix."""
    return build_banded_plus(n, 1, (), leaf_size=leaf_size, diag=diag, band=offdiag)


def reconstruct_dense(H):
    t = H.tree
    A = np.zeros((H.n, H.n))
    for k in range(t.node_count):
        if t.is_leaf(k):
            A[t.start[k]:t.stop[k], t.start[k]:t.stop[k]] = H.D[k]
        else:
            c1, c2 = t.children[k]
            blk = H.basis(c1) @ H.B[c1] @ H.basis(c2).T
            A[t.start[c1]:t.stop[c1], t.start[c2]:t.stop[c2]] = blk
            A[t.start[c2]:t.stop[c2], t.start[c1]:t.stop[c1]] = blk.T
    return A


def hss_matvec(H, x):
    """``A @ x`` in O(r n) work via the up/down sweeps over the HSS tree."""
    x = np.asarray(x, dtype=float)
    vec = x.ndim == 1
    X = x[:, None] if vec else x
    if X.shape[0] != H.n:
        raise InvalidDimensionError(f"expected {H.n} rows, got {X.shape[0]}")
    t = H.tree
    N, root = t.node_count, t.root
    k_cols = X.shape[1]
    up = [None] * N
    for k in range(N - 1):
        if t.is_leaf(k):
            up[k] = H.U[k].T @ X[t.start[k]:t.stop[k]]
        elif H.R[t.children[k][0]] is not None:
            c1, c2 = t.children[k]
            up[k] = H.R[c1].T @ up[c1] + H.R[c2].T @ up[c2]
    down = [None] * N
    Y = np.zeros_like(X)
    for k in range(N - 1, -1, -1):
        if t.is_leaf(k):
            Y[t.start[k]:t.stop[k]] = H.D[k] @ X[t.start[k]:t.stop[k]]
            if down[k] is not None:
                Y[t.start[k]:t.stop[k]] += H.U[k] @ down[k]
            continue
        c1, c2 = t.children[k]
        d1 = H.B[c1] @ _up_of(H, up, c2, k_cols)
        d2 = H.B[c1].T @ _up_of(H, up, c1, k_cols)
        if down[k] is not None:
            d1 += H.R[c1] @ down[k]
            d2 += H.R[c2] @ down[k]
        down[c1], down[c2] = d1, d2
    return Y[:, 0] if vec else Y


def _up_of(H, up, k, k_cols):
    if up[k] is not None:
        return up[k]
    # children of the root have no R of their own; assemble U_k^T x on demand
    c1, c2 = H.tree.children[k]
    return H.R[c1].T @ _up_of(H, up, c1, k_cols) + H.R[c2].T @ _up_of(H, up, c2, k_cols)


def random_hss(n, rank, leaf_size=64, rng=None, scale=1.0):
    """Random symmetric HSS matrix with orthonormal bases and HSS rank ``<= rank``.

    Leaf bases and stacked translations are orthonormal (from QR of Gaussian
    blocks), ``D`` blocks are symmetric Gaussian and ``B`` blocks Gaussian
    scaled by ``scale``.
    """
    rng = np.random.default_rng(rng)
    tree = _tree_for(int(n), leaf_size)
    N, root = tree.node_count, tree.root
    D, U, R, B = [None] * N, [None] * N, [None] * N, [None] * N
    width = [0] * N

    def orth(rows, cols):
        q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
        return q

    for k in range(N):
        if k == root:
            break
        if tree.is_leaf(k):
            m = tree.size(k)
            M = rng.standard_normal((m, m))
            D[k] = 0.5 * (M + M.T)
            width[k] = min(rank, m)
            U[k] = orth(m, width[k])
        else:
            c1, c2 = tree.children[k]
            w1, w2 = width[c1], width[c2]
            width[k] = min(rank, w1 + w2)
            V = orth(w1 + w2, width[k])
            R[c1], R[c2] = V[:w1], V[w1:]
    for p in range(N):
        if not tree.is_leaf(p):
            c1, c2 = tree.children[p]
            B[c1] = scale * rng.standard_normal((width[c1], width[c2]))
    if tree.is_leaf(root):
        M = rng.standard_normal((n, n))
        D[root] = 0.5 * (M + M.T)
    return HssMatrix(tree, D, U, R, B)


# --- dense matrix files -----------------------------------------------------

def read_dense_matrix(path):
    """Load a square matrix from text (whitespace/comma separated) or raw binary.

    The binary layout is a little-endian uint64 dimension ``n`` followed by
    ``n*n`` little-endian float64 values in row-major order.  Files ending in
    ``.bin``, ``.f64`` or ``.raw`` are read as binary.
    """
    import os

    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if str(path).endswith((".bin", ".f64", ".raw")):
        raw = open(path, "rb").read()
        if len(raw) < 8:
            raise InvalidInputError("binary matrix file is missing its header")
        n = int(np.frombuffer(raw[:8], dtype="<u8")[0])
        body = np.frombuffer(raw[8:], dtype="<f8")
        if body.size != n * n:
            raise InvalidInputError(f"binary file holds {body.size} values, expected {n * n}")
        return body.reshape(n, n).astype(float)
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rows.append([float(tok) for tok in line.replace(",", " ").split()])
            except ValueError as exc:
                raise InvalidInputError(f"malformed matrix file: {exc}") from None
    if not rows or any(len(r) != len(rows) for r in rows):
        raise InvalidInputError("matrix file is not square")
    return np.array(rows)


def write_dense_binary(path, A):
    A = np.ascontiguousarray(A, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(np.array([A.shape[0]], dtype="<u8").tobytes())
        fh.write(A.tobytes())
