"""Test matrices, end-to-end runs and accuracy metrics.

Metrics for computed eigenpairs ``(lambda_k, q_k)`` of an ``n x n`` matrix:

    gamma = max_k ||A q_k - lambda_k q_k|| / (n ||A||)      residual
    delta = ||lambda* - lambda|| / (n ||lambda*||)          eigenvalue error
    theta = max_k ||Q^T q_k - e_k|| / n                     loss of orthogonality
    mu    = largest fraction of roots at the root node still unconverged
            after five iterations, over its rank-one steps

``gamma`` and ``theta`` are taken over a seeded random sample of columns
(all columns when the sample covers ``n``).  ``delta`` needs reference
eigenvalues: the closed form for the constant tridiagonal matrix, otherwise
the dense solver up to the densification cap.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import flops
from .conquer import DENSIFY_CAP, conquer_stage, eigmat_apply
from .dense import symmetric_eig
from .divide import NormGrowthReport, divide_stage, norm_growth
from .errors import InvalidInputError
from .hss import (CompressionConfig, build_banded_plus, build_from_dense, build_tridiagonal,
                  hss_matvec, read_dense_matrix, reconstruct_dense)
from .secular import SolverConfig

MATRIX_KINDS = ("tridiag", "banded", "kernel")
# the builtin dense solver is used for reference eigenvalues up to this size;
# larger problems (up to the cap) use the LAPACK backend of the same module
BUILTIN_REFERENCE_MAX = 1024


@dataclass(frozen=True)
class RunConfig:
    matrix: str = "tridiag"
    n: int = 1024
    leaf_size: int = 256
    tol: float = 1e-10
    tau: float = 1e-10
    half_bandwidth: int = 5
    balanced: bool = True
    local_shift: bool = True
    sample_count: int = 64
    seed: int = 0
    densify_cap: int = DENSIFY_CAP

    def solver_config(self):
        return SolverConfig(tau=self.tau, use_local_shifting=self.local_shift)


@dataclass
class RunReport:
    matrix: str
    n: int
    leaf_size: int
    hss_rank: int
    tau: float
    tol: float
    balanced: bool
    local_shift: bool
    gamma: float
    delta: float | None
    theta: float
    mu: float
    time_build: float
    time_divide: float
    time_conquer: float
    flops_estimate: int
    storage: int
    norm_growth: NormGrowthReport
    convergence_hist: dict = field(default_factory=dict)
    unconverged: int = 0
    failed_steps: int = 0
    finite: bool = True
    delta_reference: str | None = None
    sample_count: int = 0
    seed: int = 0

    @property
    def time_total(self):
        return self.time_divide + self.time_conquer

    def to_dict(self):
        d = asdict(self)
        d["convergence_hist"] = {str(k): v for k, v in self.convergence_hist.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["norm_growth"] = NormGrowthReport(**d["norm_growth"])
        d["convergence_hist"] = {int(k): int(v) for k, v in d.get("convergence_hist", {}).items()}
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _flat_row(report):
    row = {}
    for f in fields(report):
        v = getattr(report, f.name)
        if f.name == "norm_growth":
            row.update({f"norm_growth.{k}": x for k, x in v.to_dict().items()})
        elif f.name == "convergence_hist":
            row[f.name] = json.dumps({str(k): c for k, c in v.items()})
        else:
            row[f.name] = v
    return row


def reports_to_csv(reports):
    """CSV text with one row per report (nested fields flattened)."""
    rows = [_flat_row(r) for r in reports]
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


# --- matrices ---------------------------------------------------------------

def chebyshev_points(n):
    """``cos((2i - 1) pi / (2n))`` for ``i = 1..n``."""
    return np.cos((2 * np.arange(1, n + 1) - 1) * np.pi / (2 * n))


def kernel_matrix(n):
    """Dense ``sqrt(|s_i - s_j|)`` at the Chebyshev points."""
    s = chebyshev_points(n)
    return np.sqrt(np.abs(s[:, None] - s[None, :]))


def default_outliers(n):
    """Two symmetric entries far from the band, used by the banded test matrix."""
    return [(0, n - 1, 0.5), (n // 3, (2 * n) // 3, -0.5)]


def tridiag_eigenvalues(n, diag=3.0, offdiag=-1.0):
    """Closed-form spectrum of the constant symmetric tridiagonal matrix (ascending)."""
    k = np.arange(1, n + 1)
    return np.sort(diag + 2 * offdiag * np.cos(k * np.pi / (n + 1)))


def make_matrix(cfg):
    """Build the HSS form for ``cfg.matrix``; returns ``(H, dense_or_None, exact_eigs_or_None)``."""
    kind, n, leaf = cfg.matrix, cfg.n, cfg.leaf_size
    if kind == "tridiag":
        return build_tridiagonal(n, leaf_size=leaf), None, tridiag_eigenvalues(n)
    if kind == "banded":
        H = build_banded_plus(n, cfg.half_bandwidth, default_outliers(n), leaf_size=leaf)
        return H, None, None
    if kind == "kernel":
        A = kernel_matrix(n)
    elif kind.startswith("file:"):
        A = read_dense_matrix(kind[5:])
    else:
        raise InvalidInputError(f"unknown matrix kind {kind!r}")
    H = build_from_dense(A, CompressionConfig(leaf_size=leaf, tol=cfg.tol))
    return H, A, None


# --- metrics ----------------------------------------------------------------

def sample_columns(n, count, seed):
    if count is None or count >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=count, replace=False))


def accuracy_metrics(H, res, cols, A=None):
    """``(gamma, theta)`` over the eigenvector columns ``cols``.

    The residual uses the dense matrix when given (so compression error is
    included) and the HSS matvec otherwise.
    """
    n = res.n
    root = res.Q.tree.root
    E = np.zeros((n, cols.size))
    E[cols, np.arange(cols.size)] = 1.0
    Qc = eigmat_apply(res.Q, root, E)
    AQ = A @ Qc if A is not None else hss_matvec(H, Qc)
    lam = res.lam[cols]
    # A is symmetric, so ||A||_2 is the largest |eigenvalue|
    normA = float(np.max(np.abs(res.lam)))
    with np.errstate(all="ignore"):
        gamma = np.max(np.linalg.norm(AQ - Qc * lam, axis=0)) / (n * normA)
        back = eigmat_apply(res.Q, root, Qc, transpose=True)
        theta = np.max(np.linalg.norm(back - E, axis=0)) / n
    return float(gamma), float(theta)


def eigenvalue_error(lam, ref):
    """``delta`` of computed eigenvalues against reference ones."""
    ref = np.sort(np.asarray(ref, dtype=float))
    return float(np.linalg.norm(ref - lam) / (lam.size * np.linalg.norm(ref)))


def reference_eigenvalues(H, A, exact, cap):
    """Reference spectrum and its source label, or ``(None, None)`` beyond the cap."""
    if exact is not None:
        return exact, "analytic"
    n = H.n
    if n > cap:
        return None, None
    if A is None:
        A = reconstruct_dense(H)
    backend = "builtin" if n <= BUILTIN_REFERENCE_MAX else "lapack"
    return symmetric_eig(A, backend=backend).values, backend


# --- runs -------------------------------------------------------------------

def run(cfg, sample_count=None):
    """Build, divide and conquer one test matrix and measure it."""
    if sample_count is not None:
        cfg = replace(cfg, sample_count=sample_count)
    t0 = time.perf_counter()
    H, A, exact = make_matrix(cfg)
    t1 = time.perf_counter()
    with flops.counting():
        with np.errstate(all="ignore" if not cfg.local_shift else "warn"):
            div = divide_stage(H, balanced=cfg.balanced)
            t2 = time.perf_counter()
            res = conquer_stage(div, cfg.solver_config())
            t3 = time.perf_counter()
        flop_total = flops.total()
    growth = norm_growth(H, div)
    finite = bool(np.all(np.isfinite(res.lam)))
    cols = sample_columns(H.n, cfg.sample_count, cfg.seed)
    if finite:
        gamma, theta = accuracy_metrics(H, res, cols, A)
    else:
        gamma = theta = float("nan")
    ref, ref_kind = reference_eigenvalues(H, A, exact, cfg.densify_cap)
    delta = eigenvalue_error(res.lam, ref) if ref is not None and finite else None
    return RunReport(
        matrix=cfg.matrix, n=H.n, leaf_size=cfg.leaf_size, hss_rank=H.hss_rank,
        tau=cfg.tau, tol=cfg.tol, balanced=cfg.balanced, local_shift=cfg.local_shift,
        gamma=gamma, delta=delta, theta=theta, mu=res.stats["mu_root"],
        time_build=t1 - t0, time_divide=t2 - t1, time_conquer=t3 - t2,
        flops_estimate=int(flop_total), storage=res.Q.storage(), norm_growth=growth,
        convergence_hist=res.stats["iteration_hist"], unconverged=res.stats["unconverged"],
        failed_steps=res.stats["failed_steps"], finite=finite,
        delta_reference=ref_kind if delta is not None else None,
        sample_count=int(cols.size), seed=cfg.seed)


def time_eigendecomposition(cfg, repeats=2):
    """Best-of-``repeats`` divide+conquer time and the storage count of ``Q``."""
    H, _, _ = make_matrix(cfg)
    best = np.inf
    for _ in range(repeats):
        t = time.perf_counter()
        res = conquer_stage(divide_stage(H, balanced=cfg.balanced), cfg.solver_config())
        best = min(best, time.perf_counter() - t)
    return best, res.Q.storage()


def scaling_sweep(cfg, n_list, repeats=2, warmup=True):
    """Time, storage and flop counts for each ``n`` plus consecutive ratios.

    Each row is a dict with ``n``, ``time``, ``storage``, ``flops`` and, from
    the second row on, ``time_ratio``, ``storage_ratio``, ``flop_ratio``.
    ``warmup`` runs the smallest size once beforehand so that one-off
    compilation cost is not charged to it.
    """
    n_list = list(n_list)
    if any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise InvalidInputError("n_list must be strictly ascending")
    if warmup and n_list:
        time_eigendecomposition(replace(cfg, n=n_list[0]), repeats=1)
    rows = []
    for n in n_list:
        c = replace(cfg, n=n)
        with flops.counting():
            t, storage = time_eigendecomposition(c, repeats)
            fl = flops.total() // max(repeats, 1)
        row = {"n": n, "time": t, "storage": storage, "flops": fl}
        if rows:
            prev = rows[-1]
            row["time_ratio"] = t / prev["time"]
            row["storage_ratio"] = storage / prev["storage"]
            row["flop_ratio"] = fl / prev["flops"]
        rows.append(row)
    return rows
