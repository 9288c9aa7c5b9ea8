"""Dense symmetric eigensolver.

Householder reduction to tridiagonal form followed by implicit QL iterations
with Wilkinson-type shifts.  It is used for the leaf blocks of the conquering
stage and as the brute-force reference in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import InvalidInputError, SuperDCError


@dataclass(frozen=True, eq=False)
class DenseEig:
    values: np.ndarray
    vectors: np.ndarray


@njit(cache=True)
def _householder_tridiag(a):
    """Reduce symmetric ``a`` (overwritten) to tridiagonal form.

    Returns the diagonal, the superdiagonal (padded with a trailing 0) and the
    accumulated orthogonal factor ``Q`` with ``Q^T A Q = T``.
    """
    n = a.shape[0]
    vs = np.zeros((n, n))
    betas = np.zeros(n)
    for k in range(n - 2):
        x = a[k + 1:, k].copy()
        alpha = np.sqrt(np.sum(x * x))
        if alpha == 0.0:
            continue
        if x[0] > 0:
            alpha = -alpha
        v = x
        v[0] -= alpha
        vnorm2 = np.sum(v * v)
        if vnorm2 == 0.0:
            continue
        beta = 2.0 / vnorm2
        sub = a[k + 1:, k + 1:]
        m = v.shape[0]
        p = np.zeros(m)
        for i in range(m):
            acc = 0.0
            for j in range(m):
                acc += sub[i, j] * v[j]
            p[i] = beta * acc
        kk = 0.5 * beta * np.dot(v, p)
        w = p - kk * v
        for i in range(m):
            for j in range(m):
                sub[i, j] -= v[i] * w[j] + w[i] * v[j]
        a[k + 1, k] = alpha
        a[k, k + 1] = alpha
        for i in range(k + 2, n):
            a[i, k] = 0.0
            a[k, i] = 0.0
        vs[k, k + 1:] = v
        betas[k] = beta
    d = np.empty(n)
    e = np.zeros(n)
    for i in range(n):
        d[i] = a[i, i]
    for i in range(n - 1):
        e[i] = a[i, i + 1]
    # accumulate Q = H_0 H_1 ... H_{n-3} backwards
    q = np.eye(n)
    for k in range(n - 3, -1, -1):
        if betas[k] == 0.0:
            continue
        v = vs[k, k + 1:]
        sub = q[k + 1:, k + 1:]
        t = np.zeros(sub.shape[1])
        for i in range(v.shape[0]):
            for j in range(sub.shape[1]):
                t[j] += v[i] * sub[i, j]
        for i in range(v.shape[0]):
            for j in range(sub.shape[1]):
                sub[i, j] -= betas[k] * v[i] * t[j]
    return d, e, q


@njit(cache=True)
def _implicit_ql(d, e, zt):
    """Diagonalize the tridiagonal (d, e) in place, rotating the rows of ``zt``.

    Returns 0 on success or 1 when an eigenvalue needs more than 60 sweeps.
    """
    n = d.shape[0]
    eps = np.finfo(np.float64).eps
    for l in range(n):
        it = 0
        while True:
            m = l
            while m < n - 1:
                dd = abs(d[m]) + abs(d[m + 1])
                if abs(e[m]) <= eps * dd:
                    break
                m += 1
            if m == l:
                break
            it += 1
            if it > 60:
                return 1
            g = (d[l + 1] - d[l]) / (2.0 * e[l])
            r = np.hypot(g, 1.0)
            g = d[m] - d[l] + e[l] / (g + (r if g >= 0 else -r))
            s = 1.0
            c = 1.0
            p = 0.0
            i = m - 1
            deflated = False
            while i >= l:
                f = s * e[i]
                b = c * e[i]
                r = np.hypot(f, g)
                e[i + 1] = r
                if r == 0.0:
                    d[i + 1] -= p
                    e[m] = 0.0
                    deflated = True
                    break
                s = f / r
                c = g / r
                g = d[i + 1] - p
                r = (d[i] - g) * s + 2.0 * c * b
                p = s * r
                d[i + 1] = g + p
                g = c * r - b
                for k in range(n):
                    f = zt[i + 1, k]
                    zt[i + 1, k] = s * zt[i, k] + c * f
                    zt[i, k] = c * zt[i, k] - s * f
                i -= 1
            if deflated:
                continue
            d[l] -= p
            e[l] = g
            e[m] = 0.0
    return 0


def _normalize(values, vectors):
    order = np.argsort(values, kind="stable")
    values, vectors = values[order], vectors[:, order]
    n = vectors.shape[0]
    thresh = n * np.finfo(float).eps
    big = np.abs(vectors) > thresh
    first = np.argmax(big, axis=0)
    signs = np.sign(vectors[first, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return DenseEig(values, vectors * signs)


def symmetric_eig(A, backend="builtin"):
    """Eigen-decomposition of a dense symmetric matrix.

    ``backend="builtin"`` runs the in-package Householder/QL solver;
    ``backend="lapack"`` delegates to ``scipy.linalg.eigh`` and is meant only
    for reference values on matrices too large for the builtin solver.
    Eigenvalues are ascending and each eigenvector's first non-negligible
    entry is positive.
    """
    A = np.array(A, dtype=float, copy=True)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidInputError(f"expected a square matrix, got shape {A.shape}")
    n = A.shape[0]
    scale = np.abs(A).max() if A.size else 0.0
    if scale > 0 and np.abs(A - A.T).max() > 100 * n * np.finfo(float).eps * scale:
        raise InvalidInputError("matrix is not symmetric")
    if n == 0:
        return DenseEig(np.zeros(0), np.zeros((0, 0)))
    A = 0.5 * (A + A.T)
    if backend == "lapack":
        from scipy.linalg import eigh

        w, V = eigh(A)
        return _normalize(w, V)
    if backend != "builtin":
        raise InvalidInputError(f"unknown backend {backend!r}")
    d, e, q = _householder_tridiag(A)
    zt = np.ascontiguousarray(q.T)
    if _implicit_ql(d, e, zt):
        raise SuperDCError("QL iteration did not converge")
    return _normalize(d, zt.T.copy())


def rank1_eig_oracle(d, v, backend="builtin"):
    """Dense eigen-decomposition of ``diag(d) + v v^T`` (reference only)."""
    d = np.asarray(d, dtype=float)
    v = np.asarray(v, dtype=float)
    if d.shape != v.shape:
        raise InvalidInputError("d and v must have the same length")
    return symmetric_eig(np.diag(d) + np.outer(v, v), backend=backend)
