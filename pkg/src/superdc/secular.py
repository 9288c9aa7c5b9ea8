"""Rank-one update eigenproblems ``diag(d) + v v^T``.

The pieces are used in this order for every rank-one step of the conquering
stage: :func:`deflate`, :func:`solve_secular`, :func:`loewner_vhat` and
:func:`normalization_b`.  All kernel sums go through :mod:`trifmm`.

Roots are stored relative to a nearby pole: root ``k`` (``0 <= k < n``) lies
in ``(d_k, d_{k+1})`` (the last one in ``(d_{n-1}, d_{n-1} + |v|^2]``) and is
kept as ``lambda_k = d[anchor_k] + eta_k`` with ``anchor_k`` in ``{k, k+1}``.
Keeping the signed gap ``eta`` instead of ``lambda`` preserves the digits that
matter when a root nearly coincides with a pole.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import flops, trifmm
from .errors import InvalidInputError, PoleError

EPS = np.finfo(float).eps


@dataclass(frozen=True)
class SolverConfig:
    tau: float = 1e-12
    stop_c: float = 8.0
    max_iter: int = 50
    use_local_shifting: bool = True
    stop_scale: str = "n"  # "n" or "log"
    switch_rule: str = "strikes"  # "strikes" or "lapack"
    fmm_order: int = trifmm.DEFAULT_ORDER
    fmm_leaf: int = trifmm.DEFAULT_LEAF
    # apply the step computed from the certifying evaluation once more
    final_step: bool = True
    # sweeps with at most this many unconverged roots sum directly in O(n) each
    direct_max: int = 64

    def __post_init__(self):
        if not self.tau > 0:
            raise InvalidInputError("tau must be positive")
        if self.direct_max < 0:
            raise InvalidInputError("direct_max must be >= 0")
        if self.max_iter < 1:
            raise InvalidInputError("max_iter must be >= 1")
        if self.stop_scale not in ("n", "log"):
            raise InvalidInputError("stop_scale must be 'n' or 'log'")
        if self.switch_rule not in ("strikes", "lapack"):
            raise InvalidInputError("switch_rule must be 'strikes' or 'lapack'")


@dataclass(frozen=True, eq=False)
class DeflationRecord:
    """Orthogonal transform produced by :func:`deflate`.

    ``G`` (the rotations applied in order) maps the problem to one where the
    ``deflated_idx`` coordinates are decoupled with eigenvalue ``d_out``.
    ``merge_perm`` orders ``concat(kept eigenvalues, deflated eigenvalues)``
    ascending; it is filled in once the kept roots are known.
    """

    n: int
    rot_i: np.ndarray
    rot_j: np.ndarray
    rot_c: np.ndarray
    rot_s: np.ndarray
    kept_idx: np.ndarray
    deflated_idx: np.ndarray
    d_deflated: np.ndarray
    tau: float
    merge_perm: np.ndarray | None = None

    @property
    def givens(self):
        return list(zip(zip(self.rot_i.tolist(), self.rot_j.tolist()), self.rot_c, self.rot_s))

    def rotate(self, X, transpose=False):
        """``G X`` (or ``G^T X``) for a vector or a row-indexed block."""
        X = np.array(X, dtype=float, copy=True)
        M = X[:, None] if X.ndim == 1 else X
        if self.rot_i.size:
            _apply_givens(M, self.rot_i, self.rot_j, self.rot_c, self.rot_s, transpose)
        return X

    def orthogonal_matrix(self):
        """Dense ``G`` (test helper)."""
        return self.rotate(np.eye(self.n))


@dataclass(frozen=True, eq=False)
class SecularResult:
    d: np.ndarray
    anchor: np.ndarray
    eta: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    interlacing_ok: bool = True
    unconverged_history: list = field(default_factory=list)

    @property
    def lam(self):
        return self.d[self.anchor] + self.eta

    @property
    def gap_from_left(self):
        """``lambda_k - d_k`` for every root."""
        n = self.d.size
        left = np.arange(n)
        delta = np.zeros(n)
        hi = self.anchor != left
        delta[hi] = self.d[self.anchor[hi]] - self.d[left[hi]]
        return delta + self.eta

    def fraction_unconverged_after(self, k=5):
        if self.iterations.size == 0:
            return 0.0
        slow = (self.iterations > k) | ~self.converged
        return float(np.mean(slow))


@njit(cache=True)
def _apply_givens(X, ri, rj, rc, rs, transpose):
    m = X.shape[1]
    nrot = ri.shape[0]
    if not transpose:
        for t in range(nrot):
            i, j, c, s = ri[t], rj[t], rc[t], rs[t]
            for col in range(m):
                xi = X[i, col]
                xj = X[j, col]
                X[i, col] = c * xi - s * xj
                X[j, col] = s * xi + c * xj
    else:
        for t in range(nrot - 1, -1, -1):
            i, j, c, s = ri[t], rj[t], rc[t], rs[t]
            for col in range(m):
                xi = X[i, col]
                xj = X[j, col]
                X[i, col] = c * xi + s * xj
                X[j, col] = -s * xi + c * xj


@njit(cache=True)
def _deflate_core(d, v, tau):
    n = d.shape[0]
    defl = np.zeros(n, dtype=np.bool_)
    ri = np.empty(n, dtype=np.int64)
    rj = np.empty(n, dtype=np.int64)
    rc = np.empty(n)
    rs = np.empty(n)
    nrot = 0
    # kept indices so far; a fold can expose an earlier entry to the new one
    stack = np.empty(n, dtype=np.int64)
    top = 0
    for k in range(n):
        if abs(v[k]) < tau:
            defl[k] = True
            v[k] = 0.0
            continue
        while top > 0:
            cur = stack[top - 1]
            if not abs((d[cur] - d[k]) * v[cur] * v[k]) < (v[cur] * v[cur] + v[k] * v[k]) * tau:
                break
            r = np.hypot(v[cur], v[k])
            c = v[k] / r
            s = v[cur] / r
            ri[nrot] = cur
            rj[nrot] = k
            rc[nrot] = c
            rs[nrot] = s
            nrot += 1
            dc = c * c * d[cur] + s * s * d[k]
            dk = s * s * d[cur] + c * c * d[k]
            d[cur] = dc
            d[k] = dk
            v[k] = r
            v[cur] = 0.0
            defl[cur] = True
            top -= 1
        stack[top] = k
        top += 1
    return defl, ri[:nrot], rj[:nrot], rc[:nrot], rs[:nrot]


def deflate(d, v, tau):
    """Two-pass deflation of ``diag(d) + v v^T`` (``d`` ascending).

    Entries with ``|v_k| < tau`` are dropped; then, scanning the survivors
    left to right, a Givens rotation folds ``v_k`` into its right neighbour
    whenever ``|(d_k - d_k') v_k v_k'| < (v_k^2 + v_k'^2) tau``.  After a
    fold the new entry is compared again with the last kept one, so no two
    adjacent kept entries meet the criterion.  Returns the
    kept poles and weights (still ascending) and the record of the transform.
    """
    d = np.array(d, dtype=float, copy=True)
    v = np.array(v, dtype=float, copy=True)
    if d.shape != v.shape or d.ndim != 1:
        raise InvalidInputError("d and v must be vectors of equal length")
    if d.size > 1 and np.any(np.diff(d) < 0):
        raise InvalidInputError("d must be ascending")
    defl, ri, rj, rc, rs = _deflate_core(d, v, float(tau))
    kept = np.flatnonzero(~defl)
    gone = np.flatnonzero(defl)
    rec = DeflationRecord(d.size, ri, rj, rc, rs, kept, gone, d[gone].copy(), float(tau))
    return d[kept], v[kept], rec


# --- secular equation ---------------------------------------------------------

@njit(cache=True, error_model="numpy")
def _direct_sums_core(d, w, rows, base, off):
    m = rows.size
    out = np.zeros((4, m))
    for r in range(m):
        i = rows[r]
        for j in range(d.size):
            u = (d[j] - base[r]) - off[r]
            q = w[j] / u
            s = 0 if j <= i else 1
            out[s, r] += q
            out[2 + s, r] += q / u
    return out


def direct_sums(d, w, rows, base, off):
    """``psi, phi, psi', phi'`` for the roots ``rows`` by direct summation.

    Root ``rows[r]`` sits at ``base[r] + off[r]``; differences are formed as
    ``(d_j - base) - off`` so a gap-form root keeps its accuracy.  Returns
    four arrays of length ``rows.size``.
    """
    rows = np.asarray(rows, dtype=np.int64)
    out = _direct_sums_core(np.asarray(d, dtype=float), np.asarray(w, dtype=float), rows,
                            np.asarray(base, dtype=float), np.asarray(off, dtype=float))
    flops.add("secular_direct", 8 * d.size * rows.size)
    return out[0], out[1], out[2], out[3]


def _stop_factor(cfg, n):
    scale = n if cfg.stop_scale == "n" else max(1.0, np.log2(max(n, 2)))
    return cfg.stop_c * scale * EPS


def _gaps(d, anchor, y):
    """Signed ``d_k - x`` and ``d_{k+1} - x`` for every root (last root: only the first is meaningful)."""
    n = d.size
    k = np.arange(n)
    kp = np.minimum(k + 1, n - 1)
    width = d[kp] - d[k]
    lo_origin = anchor == k
    dlo = np.where(lo_origin, -y, -width - y)
    dhi = np.where(lo_origin, width - y, -y)
    return dlo, dhi, width


def initial_guess(d, w, order=trifmm.DEFAULT_ORDER, leaf=trifmm.DEFAULT_LEAF):
    """Starting gaps from a two-pole quadratic model fitted at the interval midpoints.

    Returns ``(anchor, y0)``.  For ``k < n-1`` the origin is ``d_k`` when
    ``f`` is nonnegative at the midpoint (the root sits in the left half) and
    ``d_{k+1}`` otherwise.  The last root uses the one-pole model around
    ``d_{n-1}`` on the bracket ``(0, sum(w)]``.
    """
    d = np.asarray(d, dtype=float)
    w = np.asarray(w, dtype=float)
    n = d.size
    k = np.arange(n)
    anchor = k.copy()
    if n == 0:
        return anchor, np.zeros(0)
    width = np.zeros(n)
    width[:-1] = np.diff(d)
    total = float(w.sum())
    ymid = np.where(k < n - 1, 0.5 * width, 0.5 * total)
    shift = trifmm.ShiftData(d, ymid, anchor)
    fp = trifmm.plan_for_shift(shift, leaf, order)
    fmid = 1.0 + trifmm.matvec(fp, shift, w, "full", "inverse")

    y = np.empty(n)
    wk = w
    wk1 = np.append(w[1:], 0.0)
    m = k < n - 1
    # f at the midpoint without the two neighbouring poles
    c = fmid - wk / (-ymid) - np.where(m, wk1 / np.where(m, ymid, 1.0), 0.0)
    left = fmid >= 0
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(left, c * width + wk + wk1, -c * width + wk + wk1)
        b = np.where(left, wk * width, -wk1 * width)
        disc = np.sqrt(np.abs(a * a - 4 * b * c))
        two_pole = np.where(a > 0, 2 * b / (a + disc), (a - disc) / (2 * c))
    two_pole = np.where(np.isfinite(two_pole), two_pole, np.nan)
    y[m] = two_pole[m]
    anchor[m & ~left] = k[m & ~left] + 1
    # keep inside the half interval, otherwise use its midpoint
    half = 0.5 * width
    ok_lo = m & left & (y > 0) & (y <= half)
    ok_hi = m & ~left & (y < 0) & (y >= -half)
    bad = m & ~(ok_lo | ok_hi)
    y[bad & left] = 0.5 * half[bad & left]
    y[bad & ~left] = -0.5 * half[bad & ~left]

    # last root: C + w_{n-1} / (d_{n-1} - x) = 0 with C fitted at the midpoint
    cl = fmid[-1] + w[-1] / ymid[-1]
    yl = w[-1] / cl if cl > 0 else np.nan
    if not (np.isfinite(yl) and 0 < yl <= total):
        yl = ymid[-1]
    y[-1] = yl
    return anchor, y


def _model_step(f, psi, phi, dpsi, dphi, dlo, dhi, wk, wk1, fixed, last):
    """Correction from the rational models (middle way / fixed weight / one pole)."""
    dw = dpsi + dphi
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        c_mid = f - dlo * dpsi - dhi * dphi
        # fixed weight keeps the weight of the origin pole exact
        origin_lo = np.abs(dlo) <= np.abs(dhi)
        c_fix = np.where(origin_lo,
                         f - dhi * dw - (dlo - dhi) * (wk / dlo) ** 2,
                         f - dlo * dw - (dhi - dlo) * (wk1 / dhi) ** 2)
        c = np.where(fixed, c_fix, c_mid)
        a = (dlo + dhi) * f - dlo * dhi * dw
        b = dlo * dhi * f
        disc = np.sqrt(np.abs(a * a - 4 * b * c))
        eta = np.where(a > 0, 2 * b / (a + disc), (a - disc) / (2 * c))
        eta = np.where(c == 0, b / a, eta)
        # last root: one pole at d_{n-1}
        c1 = f - dlo * dw
        eta1 = dlo + dlo * dlo * dw / c1
        eta = np.where(last, eta1, eta)
    return eta


def _secular_plan(fp, d, pts, hull, shift, cfg):
    if fp is None:
        return trifmm.plan(d, pts, cfg.fmm_leaf, cfg.fmm_order, target_hull=hull, shift=shift)
    return trifmm.retarget(fp, np.clip(pts, hull[0], hull[1]), shift)


def solve_secular(d, v, cfg=None, guess=None):
    """Roots of ``f(x) = 1 + sum_j v_j^2 / (d_j - x)`` for a deflated system.

    Every root is iterated on its gap ``y`` from the anchor pole.  Each
    sweep evaluates ``psi``, ``phi`` (lower / strictly upper sums) and their
    derivatives for all roots with one triangular FMM pass and applies a
    safeguarded rational-model correction to the roots that have not met the
    stopping test yet.  With ``cfg.use_local_shifting=False`` the roots are
    iterated as absolute positions and kernel differences are formed
    directly, which is kept only as a comparison.
    """
    cfg = cfg or SolverConfig()
    d = np.asarray(d, dtype=float)
    v = np.asarray(v, dtype=float)
    n = d.size
    if n == 0:
        z = np.zeros(0)
        return SecularResult(d, np.zeros(0, dtype=np.int64), z, np.zeros(0, dtype=np.int64),
                             np.zeros(0, dtype=bool))
    if n > 1 and np.any(np.diff(d) <= 0):
        raise InvalidInputError("poles must be strictly increasing after deflation")
    w = v * v
    total = float(w.sum())
    k = np.arange(n)
    last = k == n - 1
    wk = w
    wk1 = np.append(w[1:], 0.0)

    anchor, y = guess if guess is not None else initial_guess(d, w, cfg.fmm_order, cfg.fmm_leaf)
    anchor = np.asarray(anchor).copy()
    y = np.asarray(y, dtype=float).copy()
    _, _, width = _gaps(d, anchor, y)
    # bracket on y in the anchor frame
    lo_origin = anchor == k
    lo = np.where(lo_origin, 0.0, -width)
    hi = np.where(lo_origin, width, 0.0)
    hi[last] = total
    if not cfg.use_local_shifting:
        x = d[anchor] + y
        xlo, xhi = d[k] + 0.0, np.where(last, d[-1] + total, d[np.minimum(k + 1, n - 1)])

    stop = _stop_factor(cfg, n)
    converged = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=np.int64)
    strikes = np.zeros(n, dtype=np.int64)
    fixed = np.zeros(n, dtype=bool)
    prev_f = np.full(n, np.nan)
    interlacing_ok = True
    history = []
    requests = [("inverse", "lower"), ("inverse", "upper"),
                ("inverse_square", "lower"), ("inverse_square", "upper")]

    # roots never leave their interlacing interval, so one set of boxes serves all sweeps
    hull = (d, np.append(d[1:], d[-1] + total))
    fp = None
    active = np.ones(n, dtype=bool)
    failed = np.zeros(n, dtype=bool)
    for it in range(cfg.max_iter + 1):
        pts = d[anchor] + y if cfg.use_local_shifting else x
        shift = trifmm.ShiftData(d, y, anchor) if cfg.use_local_shifting else None
        rows = np.flatnonzero(active)
        if it > 0 and rows.size <= cfg.direct_max:
            # few stragglers: direct sums are cheaper than a full FMM sweep
            psi, phi, dpsi, dphi = (np.zeros(n) for _ in range(4))
            base = d[anchor[rows]] if cfg.use_local_shifting else x[rows]
            off = y[rows] if cfg.use_local_shifting else np.zeros(rows.size)
            with np.errstate(all="ignore"):
                sums = direct_sums(d, w, rows, base, off)
            if cfg.use_local_shifting and not all(np.isfinite(a).all() for a in sums):
                raise PoleError("secular sum evaluated at a pole")
            for a, b in zip((psi, phi, dpsi, dphi), sums):
                a[rows] = b
        elif cfg.use_local_shifting:
            fp = _secular_plan(fp, d, pts, hull, shift, cfg)
            psi, phi, dpsi, dphi = trifmm.matvec_many(fp, shift, w, requests, active=active)
        else:
            fp = _secular_plan(fp, d, pts, hull, shift, cfg)
            with np.errstate(all="ignore"):
                psi, phi, dpsi, dphi = trifmm.matvec_many(fp, None, w, requests, on_pole="inf",
                                                          active=active)
        if cfg.use_local_shifting:
            dlo, dhi, _ = _gaps(d, anchor, y)
        else:
            dlo = d - x
            dhi = np.where(last, np.inf, d[np.minimum(k + 1, n - 1)] - x)
        with np.errstate(invalid="ignore"):
            f = 1.0 + psi + phi
            done = np.abs(f) <= stop * (1.0 + np.abs(psi) + np.abs(phi))
        done &= np.isfinite(f)
        newly = done & active
        converged |= newly
        failed |= active & ~np.isfinite(f)
        active = ~converged & ~failed
        history.append(int(n - converged.sum()))
        # roots that just passed the test get the step from this evaluation
        # for free; it is kept only when it stays inside the bracket
        polish = newly & cfg.final_step & cfg.use_local_shifting & (f != 0)
        if not (active.any() or polish.any()) or it == cfg.max_iter:
            break
        iters[active] += 1

        # bracket update from the sign of f (f increases with x)
        if cfg.use_local_shifting:
            pos = (active | polish) & (f > 0)
            neg = (active | polish) & (f < 0)
            hi[pos] = np.minimum(hi[pos], y[pos])
            lo[neg] = np.maximum(lo[neg], y[neg])
        else:
            pos = active & (f > 0)
            neg = active & (f < 0)
            xhi[pos] = np.minimum(xhi[pos], x[pos])
            xlo[neg] = np.maximum(xlo[neg], x[neg])

        eta = _model_step(f, psi, phi, dpsi, dphi, dlo, dhi, wk, wk1, fixed, last)
        wrong = ~np.isfinite(eta) | (f * eta >= 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = -f / (dpsi + dphi)
        eta = np.where(wrong, newton, eta)
        if cfg.use_local_shifting:
            cand = y + eta
            outside = ~((cand > lo) & (cand < hi) | (last & (cand > lo) & (cand <= hi)))
            target = np.where(f < 0, hi, lo)
            bis = 0.5 * (y + target)
            keep = polish & ~outside & np.isfinite(cand)
            cand = np.where(outside | ~np.isfinite(cand), bis, cand)
            y = np.where(active | keep, cand, y)
            inside = (y > np.where(lo_origin, 0.0, -width)) & (y < np.where(lo_origin, width, 0.0))
            inside[last] = (y[last] > 0) & (y[last] <= total)
            interlacing_ok &= bool(np.all(inside))
        else:
            cand = x + eta
            outside = ~((cand > xlo) & (cand < xhi) | (last & (cand > xlo) & (cand <= xhi)))
            target = np.where(f < 0, xhi, xlo)
            bis = 0.5 * (x + target)
            cand = np.where(outside | ~np.isfinite(cand), bis, cand)
            x = np.where(active, cand, x)

        # interpolation switch
        rejected = wrong | outside
        if cfg.switch_rule == "strikes":
            strikes = np.where(active & rejected, strikes + 1, 0)
            fixed |= strikes >= 2
        else:
            slow = (f * prev_f > 0) & (np.abs(f) > 0.1 * np.abs(prev_f))
            fixed = np.where(active & slow, ~fixed, fixed)
        prev_f = f
        if not active.any():
            break

    if not cfg.use_local_shifting:
        y = x - d[anchor]
    return SecularResult(d, anchor, y, iters, converged, interlacing_ok, history)


# --- eigenvector data -------------------------------------------------------

def _as_anchor(d, lam, eta, anchor):
    if anchor is None:
        anchor = np.arange(np.asarray(d).size)
    return np.asarray(anchor), np.asarray(eta, dtype=float)


def loewner_vhat(d, lam, eta, anchor=None, order=trifmm.DEFAULT_ORDER, leaf=trifmm.DEFAULT_LEAF, paired=True):
    """Weights ``v_hat`` for which ``lam`` are the exact eigenvalues of ``diag(d) + v_hat v_hat^T``.

    ``log v_hat_i = (sum_j log|d_i - lam_j| - sum_{j != i} log|d_i - d_j|) / 2``.
    With ``paired=True`` (default) both sums go through one log-kernel FMM
    that cancels them term by term; ``paired=False`` evaluates them as two
    independent products (the first with local shifting, the second with the
    diagonal excluded), which loses about ``n * eps`` relative accuracy.
    """
    d = np.asarray(d, dtype=float)
    n = d.size
    if n == 0:
        return np.zeros(0)
    anchor, eta = _as_anchor(d, lam, eta, anchor)
    if not interlaces(d, anchor, eta):
        raise InvalidInputError("roots do not interlace the poles")
    shift = trifmm.ShiftData(d, eta, anchor, roots_are_sources=True)
    fp1 = trifmm.plan_for_shift(shift, leaf, order)
    if paired:
        return np.exp(0.5 * trifmm.matvec_log_ratio(fp1, shift, np.ones(n)))
    g1 = trifmm.matvec(fp1, shift, np.ones(n), "full", "log_abs")
    fp2 = trifmm.plan(d, d, leaf, order)
    g2 = trifmm.matvec_logkernel_diag_excluded(fp2, d, np.ones(n))
    return np.exp(0.5 * (g1 - g2))


def interlaces(d, anchor, eta):
    """Strict interlacing checked in the anchor frame.

    Root ``k`` must lie in ``(d_k, d_{k+1})`` (the last one above ``d_{n-1}``).
    The test is done on ``eta`` and the interval width rather than on
    ``d[anchor] + eta``, which can round onto a pole.
    """
    d = np.asarray(d, dtype=float)
    n = d.size
    k = np.arange(n)
    if np.any((anchor != k) & (anchor != k + 1)) or (n and anchor[-1] != n - 1):
        return False
    width = np.append(np.diff(d), np.inf)
    left = anchor == k
    ok = np.where(left, (eta > 0) & (eta < width), (eta < 0) & (-eta < width))
    return bool(np.all(ok))


def normalization_b(d, lam, eta, vhat, anchor=None, order=trifmm.DEFAULT_ORDER, leaf=trifmm.DEFAULT_LEAF):
    """``b_j = (sum_i vhat_i^2 / (d_i - lam_j)^2)^(-1/2)``, the column scales of the Cauchy eigenvectors."""
    d = np.asarray(d, dtype=float)
    if d.size == 0:
        return np.zeros(0)
    anchor, eta = _as_anchor(d, lam, eta, anchor)
    shift = trifmm.ShiftData(d, eta, anchor)
    s = trifmm.matvec(trifmm.plan_for_shift(shift, leaf, order), shift,
                      np.asarray(vhat, dtype=float) ** 2, "full", "inverse_square")
    return 1.0 / np.sqrt(s)
