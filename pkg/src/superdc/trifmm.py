"""One-dimensional FMM for interlaced source/target sets with triangular variants.

Sources ``s_j`` and targets ``t_i`` are paired by index and the kernel matrix
is ``K[i, j] = kappa(s_j - t_i)`` for ``kappa`` in

    inverse         1 / u
    inverse_square  1 / u^2
    log_abs         log |u|

The index range ``0..n-1`` is bisected level by level, so the pair
``(s_k, t_k)`` always lives in a single box.  Well-separated box pairs are
handled with Chebyshev interpolation in both the source and target box;
everything else is evaluated directly at the leaf level.  Box pairs are
ordered by index, which is what makes the lower (``j <= i``) and upper
(``j > i``) triangular products cheap: far pairs on the wrong side are simply
skipped and only the near blocks need an entrywise mask.

Near-field entries can be evaluated from gaps instead of absolute positions
(see :class:`ShiftData`): if a root ``x_i = d[a_i] + y_i`` is stored as an
anchor pole plus a small offset, ``d_j - x_i`` is formed as
``(d_j - d[a_i]) - y_i``, which keeps full relative accuracy when ``x_i`` is
extremely close to a pole.  The far field places such roots inside their
leaf box from the same gaps, and all interpolation node differences are
formed from box-center offsets, so narrow boxes far from the origin keep
their relative accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
from numba import njit

from . import flops
from .errors import InvalidInputError, PoleError

KERNELS = ("inverse", "inverse_square", "log_abs")
PARTS = ("full", "lower", "upper", "offdiag")

# Chebyshev order and leaf population; with the admissibility rule below the
# worst-case interpolation error decays like (2 + sqrt 3)^-order
DEFAULT_ORDER = 28
DEFAULT_LEAF = 64


def kernel_eval(kernel, u):
    if kernel == "inverse":
        return 1.0 / u
    if kernel == "inverse_square":
        return 1.0 / (u * u)
    if kernel == "log_abs":
        return np.log(np.abs(u))
    raise InvalidInputError(f"unknown kernel {kernel!r}")


@lru_cache(maxsize=None)
def _cheb(p):
    q = np.arange(p)
    theta = (2 * q + 1) * np.pi / (2 * p)
    xi, bw = np.cos(theta), (-1.0) ** q * np.sin(theta)
    xi.flags.writeable = bw.flags.writeable = False
    return xi, bw


@njit(cache=True)
def _lagrange_flat(u, xi, bw):
    m, p = u.size, xi.size
    out = np.empty((m, p))
    for a in range(m):
        hit = -1
        total = 0.0
        for q in range(p):
            diff = u[a] - xi[q]
            if diff == 0.0:
                hit = q
                break
            t = bw[q] / diff
            out[a, q] = t
            total += t
        if hit >= 0:
            out[a, :] = 0.0
            out[a, hit] = 1.0
        else:
            for q in range(p):
                out[a, q] /= total
    return out


def _lagrange(u, xi, bw):
    """Barycentric Lagrange basis on Chebyshev nodes, evaluated at ``u``: shape ``u.shape + (p,)``."""
    u = np.asarray(u, dtype=float)
    flat = _lagrange_flat(np.ascontiguousarray(u).ravel(), np.asarray(xi), np.asarray(bw))
    return flat.reshape(u.shape + (xi.size,))


@dataclass(frozen=True, eq=False)
class ShiftData:
    """Roots stored as ``x = d[anchor] + y`` next to the poles ``d``.

    With ``roots_are_sources=False`` the roots are the targets and ``d`` the
    sources (matrix ``(kappa(d_j - x_i))``); with ``True`` the roles swap
    (matrix ``(kappa(x_j - d_i))``).
    """

    d: np.ndarray
    y: np.ndarray
    anchor: np.ndarray
    roots_are_sources: bool = False

    @property
    def x(self):
        return self.d[self.anchor] + self.y

    def points(self):
        """Absolute ``(sources, targets)``."""
        x = self.x
        return (x, self.d) if self.roots_are_sources else (self.d, x)

    def split(self):
        """``(src_base, src_off, tgt_base, tgt_off)`` for the near-field gaps."""
        base = self.d[self.anchor]
        zero = np.zeros_like(self.d)
        if self.roots_are_sources:
            return base, self.y, self.d, zero
        return self.d, zero, base, self.y

    @classmethod
    def identity(cls, d):
        d = np.asarray(d, dtype=float)
        return cls(d, np.zeros_like(d), np.arange(d.size))


@dataclass(frozen=True, eq=False)
class FmmPlan:
    n: int
    order: int
    leaf_box_size: int
    depth: int
    sources: np.ndarray
    targets: np.ndarray
    bounds: list
    lo: list
    hi: list
    center: list
    radius: list
    nodes: list
    far: list
    near: tuple
    transfer: list
    leaf_idx: np.ndarray
    leaf_valid: np.ndarray
    interp_src: np.ndarray
    interp_tgt: np.ndarray

    @property
    def boxes_per_level(self):
        return [b.size - 1 for b in self.bounds]

    def coverage(self, part="full"):
        """Dense count of how often each entry is produced (test helper, small ``n``)."""
        cnt = np.zeros((self.n, self.n), dtype=np.int64)
        for lev, (T, S) in enumerate(self.far):
            b = self.bounds[lev]
            for t, s in zip(T, S):
                if _far_allowed(part, t, s):
                    cnt[b[t]:b[t + 1], b[s]:b[s + 1]] += 1
        b = self.bounds[self.depth]
        for t, s in zip(*self.near):
            ii = np.arange(b[t], b[t + 1])[:, None]
            jj = np.arange(b[s], b[s + 1])[None, :]
            cnt[b[t]:b[t + 1], b[s]:b[s + 1]] += _part_mask(part, ii, jj)
        return cnt


def _far_allowed(part, t, s):
    if part == "lower":
        return s < t
    if part == "upper":
        return s > t
    return True


def _part_mask(part, ii, jj):
    if part == "lower":
        return jj <= ii
    if part == "upper":
        return jj > ii
    if part == "offdiag":
        return jj != ii
    return np.ones(np.broadcast_shapes(ii.shape, jj.shape), dtype=bool)


def plan(d, x, leaf_box_size=DEFAULT_LEAF, order=DEFAULT_ORDER, target_hull=None, shift=None):
    """Build the box tree and interaction lists for sources ``d`` and targets ``x``.

    ``d[k]`` and ``x[k]`` are paired; the tree bisects the index range, so
    each level-``l`` box holds about ``n / 2^l`` pairs whatever the spatial
    distribution, and clustered points simply yield narrower boxes.
    ``target_hull=(lo, hi)`` widens the boxes so that target ``k`` may later
    move anywhere in ``[lo_k, hi_k]`` (see :func:`retarget`).  With a
    :class:`ShiftData` whose points are ``(d, x)``, the in-box coordinates of
    the roots are formed from the gaps, so that roots in very narrow boxes far
    from the origin do not pick up the rounding error of ``d[anchor] + y``.
    """
    src = np.ascontiguousarray(d, dtype=float)
    tgt = np.ascontiguousarray(x, dtype=float)
    n = src.size
    if n == 0 or tgt.size != n:
        raise InvalidInputError("plan needs equally many (nonzero) sources and targets")
    if leaf_box_size < 2 or order < 1:
        raise InvalidInputError("leaf_box_size must be >= 2 and order >= 1")
    L = 0
    while -(-n // (1 << L)) > leaf_box_size:
        L += 1
    bounds = [(n * np.arange((1 << l) + 1)) // (1 << l) for l in range(L + 1)]

    leaf_b = bounds[L]
    starts = leaf_b[:-1]
    lo_pts = np.minimum(np.minimum.reduceat(src, starts), np.minimum.reduceat(tgt, starts))
    hi_pts = np.maximum(np.maximum.reduceat(src, starts), np.maximum.reduceat(tgt, starts))
    if target_hull is not None:
        hl, hh = (np.asarray(h, dtype=float) for h in target_hull)
        lo_pts = np.minimum(lo_pts, np.minimum.reduceat(hl, starts))
        hi_pts = np.maximum(hi_pts, np.maximum.reduceat(hh, starts))
    lo, hi = [None] * (L + 1), [None] * (L + 1)
    lo[L], hi[L] = lo_pts, hi_pts
    for l in range(L - 1, -1, -1):
        lo[l] = np.minimum(lo[l + 1][0::2], lo[l + 1][1::2])
        hi[l] = np.maximum(hi[l + 1][0::2], hi[l + 1][1::2])
    center = [0.5 * (a + b) for a, b in zip(lo, hi)]
    scale = max(np.abs(lo[0]).max(), np.abs(hi[0]).max(), np.finfo(float).tiny)
    floor = 4 * np.finfo(float).eps * scale
    radius = [np.maximum(0.5 * (b - a), floor) for a, b in zip(lo, hi)]

    xi, bw = _cheb(order)
    nodes = [c[:, None] + r[:, None] * xi for c, r in zip(center, radius)]

    far = []
    T = np.zeros(1, dtype=np.int64)
    S = np.zeros(1, dtype=np.int64)
    near = None
    for l in range(L + 1):
        gap = np.maximum(lo[l][S] - hi[l][T], lo[l][T] - hi[l][S])
        adm = (gap > 0) & (gap >= np.maximum(radius[l][T], radius[l][S]))
        far.append((T[adm], S[adm]))
        T, S = T[~adm], S[~adm]
        if l == L:
            near = (T, S)
        else:
            T = (2 * T[:, None] + np.array([0, 0, 1, 1])).ravel()
            S = (2 * S[:, None] + np.array([0, 1, 0, 1])).ravel()

    transfer = []
    for l in range(L):
        # child nodes relative to the parent center, formed from center offsets
        # so that tiny boxes far from the origin keep their relative accuracy
        off = (center[l + 1] - np.repeat(center[l], 2))[:, None] + radius[l + 1][:, None] * xi
        u = off.reshape(1 << l, 2, order) / radius[l][:, None, None]
        transfer.append(_lagrange(u, xi, bw))  # (P, c, q, m) = L^P_m(child node q)

    sizes = np.diff(leaf_b)
    smax = int(sizes.max())
    ar = np.arange(smax)
    valid = ar[None, :] < sizes[:, None]
    idx = np.where(valid, starts[:, None] + ar[None, :], 0)
    if shift is None:
        zero = np.zeros(n)
        sb, so, tb, to = src, zero, tgt, zero
    else:
        sb, so, tb, to = shift.split()
    interp_src = _leaf_interp(sb, so, center[L], radius[L], idx, valid, order)
    interp_tgt = _leaf_interp(tb, to, center[L], radius[L], idx, valid, order)

    return FmmPlan(n, order, leaf_box_size, L, src, tgt, bounds, lo, hi, center, radius,
                   nodes, far, near, transfer, idx, valid, interp_src, interp_tgt)


def _leaf_interp(base, off, center, radius, idx, valid, order):
    """Lagrange weights of the points ``base + off`` in their leaf boxes."""
    xi, bw = _cheb(order)
    # padded slots are mapped to the box center and then zeroed
    u = np.where(valid, ((base[idx] - center[:, None]) + off[idx]) / radius[:, None], 0.0)
    return _lagrange(u, xi, bw) * valid[..., None]


def retarget(fp, x, shift=None):
    """Plan ``fp`` with the targets moved to ``x``; each ``x_k`` must stay in its leaf box.

    ``shift`` (targets as roots) supplies the gap form of ``x`` as in :func:`plan`.
    """
    x = np.ascontiguousarray(x, dtype=float)
    L = fp.depth
    box = np.repeat(np.arange(fp.leaf_idx.shape[0]), np.diff(fp.bounds[L]))
    if x.size != fp.n or np.any(x < fp.lo[L][box]) or np.any(x > fp.hi[L][box]):
        raise InvalidInputError("new targets leave their boxes; build a new plan")
    if shift is None:
        tb, to = x, np.zeros(fp.n)
    else:
        _, _, tb, to = shift.split()
    interp_tgt = _leaf_interp(tb, to, fp.center[L], fp.radius[L], fp.leaf_idx, fp.leaf_valid,
                              fp.order)
    return replace(fp, targets=x, interp_tgt=interp_tgt)


def plan_for_shift(shift, leaf_box_size=DEFAULT_LEAF, order=DEFAULT_ORDER):
    s, t = shift.points()
    return plan(s, t, leaf_box_size, order, shift=shift)


def _scatter_rows(out, rows, vals):
    np.add.at(out, rows, vals)


def matvec_many(fp, shift, w, requests, on_pole="raise", active=None):
    """Evaluate several ``(kernel, part)`` products with one shared upward pass.

    ``w`` is a vector or an ``(n, k)`` block.  ``shift`` (a :class:`ShiftData`
    or ``None``) controls how near-field differences are formed.  A zero
    difference inside the requested part raises :class:`PoleError` unless
    ``on_pole="inf"``, in which case the raw IEEE result propagates.  Returns
    a list with one result per request, shaped like ``w``.  With a boolean
    ``active`` mask only those target rows are guaranteed to be correct.
    """
    w = np.asarray(w, dtype=float)
    vec = w.ndim == 1
    W = w[:, None] if vec else w
    if W.shape[0] != fp.n:
        raise InvalidInputError(f"weight length {W.shape[0]} does not match plan size {fp.n}")
    for kernel, part in requests:
        if kernel not in KERNELS or part not in PARTS:
            raise InvalidInputError(f"bad request {(kernel, part)!r}")
    k = W.shape[1]
    out = np.zeros((fp.n, len(requests) * k))

    _far_field(fp, fp.interp_src, W, requests, out)
    _near_field(fp, shift, W, requests, out, on_pole == "raise", active)
    res = [out[:, r * k:(r + 1) * k] for r in range(len(requests))]
    return [x[:, 0].copy() if vec else x for x in res]


def _far_field(fp, interp_src, W, requests, out):
    L, p = fp.depth, fp.order
    k = W.shape[1]
    R = len(requests)
    if not any(f[0].size for f in fp.far):
        return
    # upward pass
    mult = [None] * (L + 1)
    mult[L] = np.matmul(interp_src.transpose(0, 2, 1), W[fp.leaf_idx])
    flops.add("fmm_p2m", 2 * fp.n * p * k)
    for l in range(L - 1, -1, -1):
        kids = mult[l + 1].reshape(1 << l, 2, p, k)
        tr = fp.transfer[l]
        mult[l] = np.matmul(tr.reshape(1 << l, 2 * p, p).transpose(0, 2, 1),
                            kids.reshape(1 << l, 2 * p, k))
        flops.add("fmm_m2m", 4 * (1 << l) * p * p * k)
    # interactions and downward pass
    local = np.zeros((1, p, R * k))
    for l in range(L + 1):
        T, S = fp.far[l]
        if T.size:
            c, r = fp.center[l], fp.radius[l]
            xi = _cheb(p)[0]
            diff = ((c[S] - c[T])[:, None, None] + r[S][:, None, None] * xi[None, None, :]
                    - r[T][:, None, None] * xi[None, :, None])
            for r, (kernel, part) in enumerate(requests):
                sel = np.ones(T.size, dtype=bool) if part in ("full", "offdiag") else (
                    S < T if part == "lower" else S > T)
                if not sel.any():
                    continue
                K = kernel_eval(kernel, diff[sel])
                contrib = K @ mult[l][S[sel]]
                _scatter_rows(local[:, :, r * k:(r + 1) * k], T[sel], contrib)
                flops.add("fmm_m2l", 2 * int(sel.sum()) * p * p * k)
        if l < L:
            tr = fp.transfer[l].reshape(1 << l, 2 * p, p)
            local = np.matmul(tr, local).reshape(2 << l, p, R * k)
            flops.add("fmm_l2l", 4 * (1 << l) * p * p * R * k)
    leaf_vals = np.matmul(fp.interp_tgt, local)
    out[fp.leaf_idx[fp.leaf_valid]] += leaf_vals[fp.leaf_valid]
    flops.add("fmm_l2p", 2 * fp.n * p * R * k)


_KERNEL_ID = {k: i for i, k in enumerate(KERNELS)}
_PART_ID = {p: i for i, p in enumerate(PARTS)}


# near-field segments of a target row: j < i, j == i, j > i
_PART_SEGMENTS = np.array([[1, 1, 1], [1, 1, 0], [0, 0, 1], [1, 0, 1]], dtype=np.int64)


@njit(cache=True, error_model="numpy")
def _segment_sums(j0, j1, sb, so, tbi, toi, W, need, acc, seg):
    """Add the kernel sums over sources ``j0..j1-1`` to ``acc[seg]``; returns True on a pole."""
    k = W.shape[1]
    pole = False
    for j in range(j0, j1):
        u = (sb[j] - tbi) + (so[j] - toi)
        pole |= u == 0.0
        inv = 1.0 / u
        if need[0]:
            for col in range(k):
                acc[seg, 0, col] += inv * W[j, col]
        if need[1]:
            inv2 = inv * inv
            for col in range(k):
                acc[seg, 1, col] += inv2 * W[j, col]
        if need[2]:
            lg = np.log(abs(u))
            for col in range(k):
                acc[seg, 2, col] += lg * W[j, col]
    return pole


@njit(cache=True, error_model="numpy")
def _near_loop(T, S, bounds, active, sb, so, tb, to, W, kern, part, out, strict):
    """Direct leaf-pair sums; returns the number of masked entries or -1 on a pole.

    Leaf boxes are the contiguous index ranges ``bounds[b]..bounds[b+1]-1``.
    """
    k = W.shape[1]
    R = kern.shape[0]
    need = np.zeros(3, dtype=np.bool_)
    for r in range(R):
        need[kern[r]] = True
    acc = np.zeros((3, 3, k))
    pole = np.zeros(3, dtype=np.bool_)
    used = np.zeros(3, dtype=np.bool_)
    for r in range(R):
        for g in range(3):
            used[g] |= _PART_SEGMENTS[part[r], g] == 1
    count = 0
    for q in range(T.shape[0]):
        i0, i1 = bounds[T[q]], bounds[T[q] + 1]
        s0, s1 = bounds[S[q]], bounds[S[q] + 1]
        for i in range(i0, i1):
            if not active[i]:
                continue
            acc[:] = 0.0
            tbi, toi = tb[i], to[i]
            lo_end = min(max(i, s0), s1)
            hi_start = max(min(i + 1, s1), s0)
            pole[0] = _segment_sums(s0, lo_end, sb, so, tbi, toi, W, need, acc, 0)
            pole[1] = _segment_sums(lo_end, hi_start, sb, so, tbi, toi, W, need, acc, 1)
            pole[2] = _segment_sums(hi_start, s1, sb, so, tbi, toi, W, need, acc, 2)
            if strict:
                for g in range(3):
                    if pole[g] and used[g]:
                        return -1
            lens = (lo_end - s0, hi_start - lo_end, s1 - hi_start)
            for r in range(R):
                kr = kern[r]
                base = r * k
                for g in range(3):
                    if _PART_SEGMENTS[part[r], g] == 0:
                        continue
                    count += lens[g]
                    for col in range(k):
                        out[i, base + col] += acc[g, kr, col]
    return count


def _near_field(fp, shift, W, requests, out, strict, active=None):
    T, S = fp.near
    if T.size == 0:
        return
    if shift is None:
        sb, tb = fp.sources, fp.targets
        so = to = np.zeros(fp.n)
    else:
        sb, so, tb, to = shift.split()
    kern = np.array([_KERNEL_ID[k] for k, _ in requests], dtype=np.int64)
    part = np.array([_PART_ID[p] for _, p in requests], dtype=np.int64)
    if active is None:
        active = np.ones(fp.n, dtype=bool)
    count = _near_loop(T, S, fp.bounds[fp.depth], np.asarray(active, dtype=bool),
                       *(np.ascontiguousarray(v, dtype=float) for v in (sb, so, tb, to)),
                       np.ascontiguousarray(W), kern, part, out, strict)
    if count < 0:
        raise PoleError("kernel evaluated at coincident source and target")
    flops.add("fmm_near", 2 * count * W.shape[1])


def matvec(fp, shift, w, part="full", kernel="inverse"):
    """``K_part @ w`` with ``K = (kappa(s_j - t_i))``; see :func:`matvec_many`."""
    return matvec_many(fp, shift, w, [(kernel, part)])[0]


def matvec_logkernel_diag_excluded(fp, d, w):
    """``sum_{j != i} log|d_i - d_j| w_j`` for the plan built on ``(d, d)``."""
    d = np.asarray(d, dtype=float)
    return matvec(fp, ShiftData.identity(d), w, part="offdiag", kernel="log_abs")


@njit(cache=True, error_model="numpy")
def _log_ratio_near(T, S, bounds, d, base, y, w, out):
    count = 0
    for q in range(T.shape[0]):
        s0, s1 = bounds[S[q]], bounds[S[q] + 1]
        for i in range(bounds[T[q]], bounds[T[q] + 1]):
            di = d[i]
            acc = 0.0
            for j in range(s0, s1):
                num = (base[j] - di) + y[j]
                den = 1.0 if j == i else d[j] - di
                if num == 0.0 or den == 0.0:
                    return -1
                acc += np.log(abs(num / den)) * w[j]
            out[i] += acc
            count += s1 - s0
    return count


def matvec_log_ratio(fp, shift, w):
    """``sum_j w_j (log|x_j - d_i| - [j != i] log|d_j - d_i|)`` for roots ``x`` as sources.

    The two log sums are never formed separately: near-field entries are
    evaluated as ``log|(x_j - d_i) / (d_j - d_i)|`` with ``x_j - d_i`` taken
    from the gaps, and far-field moments use ``L(x_j) - L(d_j)``, so the
    heavy cancellation between the sums happens term by term.  ``fp`` must be
    the plan of ``shift`` (sources ``x``, targets ``d``).
    """
    if not shift.roots_are_sources:
        raise InvalidInputError("matvec_log_ratio needs the roots as sources")
    w = np.asarray(w, dtype=float)
    W = w[:, None]
    out = np.zeros((fp.n, 1))
    # targets are d, so the interpolation of d_j in its box is interp_tgt
    _far_field(fp, fp.interp_src - fp.interp_tgt, W, [("log_abs", "full")], out)
    T, S = fp.near
    d = np.ascontiguousarray(shift.d, dtype=float)
    base = np.ascontiguousarray(d[shift.anchor])
    y = np.ascontiguousarray(shift.y, dtype=float)
    count = _log_ratio_near(T, S, fp.bounds[fp.depth], d, base, y, np.ascontiguousarray(w), out[:, 0])
    if count < 0:
        raise PoleError("coincident points in the log-ratio sum")
    flops.add("fmm_near", 2 * count)
    return out[:, 0]
