import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from superdc.dense import rank1_eig_oracle
from superdc.errors import InvalidInputError
from superdc.secular import (SolverConfig, deflate, direct_sums, initial_guess, interlaces,
                             loewner_vhat, normalization_b, solve_secular)

EPS = np.finfo(float).eps


def qhat_dense(d, res, vhat, b):
    diff = (d[:, None] - d[None, res.anchor]) - res.eta[None, :]
    return vhat[:, None] / diff * b[None, :]


def full_solve(d, v, cfg=None):
    res = solve_secular(d, v, cfg)
    vhat = loewner_vhat(d, res.lam, res.eta, res.anchor)
    b = normalization_b(d, res.lam, res.eta, vhat, res.anchor)
    return res, vhat, b


def random_system(n, rng, spread=1.0):
    d = np.sort(rng.uniform(-spread, spread, n))
    d += np.arange(n) * 1e-9 * spread  # strictly increasing
    v = rng.uniform(0.1, 1.0, n) * rng.choice([-1, 1], n)
    return d, v


# --- configuration and deflation -----------------------------------------------

def test_deflation_cascades_folds():
    # a fold can leave the previous kept entry next to a new neighbour it must also be checked against
    rng = np.random.default_rng(7559)
    d = np.sort(np.round(rng.uniform(0, 1, 163), 3))
    v = rng.standard_normal(163) * (rng.uniform(size=163) > 0.2)
    dk, vk, _ = deflate(d, v, 1e-4)
    for a, b_, wa, wb in zip(dk, dk[1:], vk, vk[1:]):
        assert abs((b_ - a) * wa * wb) >= (wa * wa + wb * wb) * 1e-4


def test_solver_config_validation():
    with pytest.raises(InvalidInputError):
        SolverConfig(tau=0.0)
    with pytest.raises(InvalidInputError):
        SolverConfig(max_iter=0)
    with pytest.raises(InvalidInputError):
        SolverConfig(stop_scale="sqrt")


def test_deflate_zero_update():
    d = np.linspace(0, 1, 7)
    dk, vk, rec = deflate(d, np.zeros(7), 1e-12)
    assert dk.size == 0 and np.array_equal(rec.d_deflated, d)


def test_deflate_equal_poles_rotation():
    dk, vk, rec = deflate([1.0, 1.0], [3.0, 4.0], 1e-3)
    assert np.array_equal(dk, [1.0]) and np.allclose(np.abs(vk), [5.0], rtol=0, atol=4 * EPS)
    assert np.array_equal(rec.d_deflated, [1.0])
    res = solve_secular(dk, vk)
    assert abs(res.lam[0] - 26.0) <= 26 * 4 * EPS
    G = rec.orthogonal_matrix()
    assert np.abs(G.T @ G - np.eye(2)).max() <= 1e-15


def test_deflate_planted_small_weights_exact():
    rng = np.random.default_rng(0)
    d, v = random_system(200, rng)
    planted = rng.choice(200, 30, replace=False)
    v[planted] = 1e-14
    dk, vk, rec = deflate(d, v, 1e-12)
    assert set(planted) <= set(rec.deflated_idx.tolist())
    assert np.array_equal(rec.d_deflated[np.isin(rec.deflated_idx, planted)],
                          d[np.sort(planted)])


@given(n=st.integers(1, 200), seed=st.integers(0, 10**6), tau=st.sampled_from([1e-12, 1e-8, 1e-4]))
@settings(max_examples=50, deadline=None)
def test_deflation_transform_property(n, seed, tau):
    rng = np.random.default_rng(seed)
    d = np.sort(np.round(rng.uniform(0, 1, n), 3))  # repeated poles likely
    v = rng.standard_normal(n) * (rng.uniform(size=n) > 0.2)
    dk, vk, rec = deflate(d, v, tau)
    G = rec.orthogonal_matrix()
    assert np.abs(G.T @ G - np.eye(n)).max() <= 1e-14
    Gv = rec.rotate(v)
    # v is rotated onto the kept coordinates, deflated coordinates carry zero weight
    assert np.allclose(Gv[rec.kept_idx], vk, atol=1e-14, rtol=0)
    assert np.all(np.abs(Gv[rec.deflated_idx]) <= tau)
    assert np.all(np.abs(vk) >= tau)
    for a, b_, wa, wb in zip(dk, dk[1:], vk, vk[1:]):
        assert abs((b_ - a) * wa * wb) >= (wa * wa + wb * wb) * tau
    # eigenvalues are preserved up to the deflation tolerance
    A = np.diag(d) + np.outer(v, v)
    kept_eigs = rank1_eig_oracle(dk, vk).values if dk.size else np.zeros(0)
    eigs = np.sort(np.concatenate([kept_eigs, rec.d_deflated]))
    assert np.abs(eigs - np.linalg.eigvalsh(A)).max() <= 10 * tau * (1 + np.abs(v).max())


def test_deflate_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        deflate([1.0, 0.0], [1.0, 1.0], 1e-12)
    with pytest.raises(InvalidInputError):
        deflate([0.0, 1.0], [1.0], 1e-12)


# --- initial guess and solver ---------------------------------------------------

def test_initial_guess_examples():
    anchor, y = initial_guess(np.array([0.0]), np.array([1.0]))
    assert anchor[0] == 0 and y[0] == 1.0
    d = np.array([0.0, 2.0])
    anchor, y = initial_guess(d, np.array([1.0, 1.0]))
    lam = d[anchor] + y
    assert 0 < lam[0] < 2 and 2 < lam[1] <= 4


@given(n=st.integers(2, 300), seed=st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_initial_guess_interlaces(n, seed):
    d, v = random_system(n, np.random.default_rng(seed))
    anchor, y = initial_guess(d, v * v)
    lam = d[anchor] + y
    assert np.all(lam > d)
    assert np.all(lam[:-1] < d[1:])
    assert lam[-1] <= d[-1] + v @ v


def test_solve_examples():
    res = solve_secular(np.array([0.0]), np.array([1.0]))
    assert res.lam[0] == 1.0 and res.eta[0] == 1.0
    d = np.array([0.0, 2.0])
    res = solve_secular(d, np.array([1.0, 1.0]))
    assert np.allclose(res.lam, [2 - np.sqrt(2), 2 + np.sqrt(2)], rtol=0, atol=4 * EPS)
    assert np.allclose(res.gap_from_left, [2 - np.sqrt(2), np.sqrt(2)], rtol=0, atol=8 * EPS)
    assert solve_secular(np.zeros(0), np.zeros(0)).lam.size == 0


def test_solve_rejects_repeated_poles():
    with pytest.raises(InvalidInputError):
        solve_secular(np.array([0.0, 0.0]), np.array([1.0, 1.0]))


def test_solve_random_500():
    rng = np.random.default_rng(11)
    d, v = random_system(500, rng)
    res = solve_secular(d, v)
    ref = rank1_eig_oracle(d, v).values
    assert np.max(np.abs(res.lam - ref)) <= 1e-13 * np.abs(ref).max()
    assert res.converged.all() and res.interlacing_ok
    assert res.fraction_unconverged_after(5) <= 0.05


@given(n=st.integers(1, 400), seed=st.integers(0, 10**6),
       kind=st.sampled_from(["random", "cluster", "graded"]))
@settings(max_examples=40, deadline=None)
def test_solver_properties(n, seed, kind):
    rng = np.random.default_rng(seed)
    d, v = random_system(n, rng)
    if kind == "cluster":
        d = np.sort(np.concatenate([d[: n // 2], 0.3 + np.arange(n - n // 2) * 1e-10]))
    elif kind == "graded":
        v = v * 10.0 ** rng.uniform(-6, 0, n)
    dk, vk, rec = deflate(d, v, 1e-13)
    res, vhat, b = full_solve(dk, vk)
    assert res.interlacing_ok and res.converged.all()
    assert interlaces(dk, res.anchor, res.eta)
    gl = res.gap_from_left
    if dk.size:
        assert gl[-1] <= vk @ vk * (1 + 4 * EPS)
        assert np.all(vhat > 0) and np.all(b > 0)
        Q = qhat_dense(dk, res, np.where(vk < 0, -vhat, vhat), b)
        assert np.abs(Q.T @ Q - np.eye(dk.size)).max() <= 1e-13


def test_direct_sums_match_dense():
    rng = np.random.default_rng(5)
    d, v = random_system(300, rng)
    w = v * v
    res = solve_secular(d, v)
    rows = np.array([0, 17, 150, 299])
    psi, phi, dpsi, dphi = direct_sums(d, w, rows, d[res.anchor[rows]], res.eta[rows])
    diff = (d[None, :] - d[res.anchor[rows]][:, None]) - res.eta[rows][:, None]
    lower = np.arange(300)[None, :] <= rows[:, None]
    assert np.allclose(psi, np.where(lower, w / diff, 0).sum(1), rtol=1e-13, atol=0)
    assert np.allclose(phi, np.where(~lower, w / diff, 0).sum(1), rtol=1e-13, atol=0)
    assert np.allclose(dpsi, np.where(lower, w / diff**2, 0).sum(1), rtol=1e-13, atol=0)
    assert np.allclose(dphi, np.where(~lower, w / diff**2, 0).sum(1), rtol=1e-13, atol=0)


@pytest.mark.parametrize("seed", range(5))
def test_direct_straggler_sums_agree_with_fmm_only(seed):
    rng = np.random.default_rng(seed)
    d, v = random_system(400, rng)
    v[::7] *= 1e-6  # small weights make slow roots
    a = solve_secular(d, v)
    b = solve_secular(d, v, SolverConfig(direct_max=0))
    assert a.converged.all() and b.converged.all()
    assert np.array_equal(a.anchor, b.anchor)
    assert np.abs(a.lam - b.lam).max() <= 4 * EPS * np.abs(a.lam).max()


def test_psi_phi_sign_structure():
    from superdc import trifmm
    rng = np.random.default_rng(3)
    d, v = random_system(300, rng)
    res = solve_secular(d, v)
    fp = trifmm.plan(d, res.lam)
    shift = trifmm.ShiftData(d, res.eta, res.anchor)
    psi, phi = trifmm.matvec_many(fp, shift, v * v, [("inverse", "lower"), ("inverse", "upper")])
    assert np.all(psi <= 0) and np.all(phi >= 0)


def test_max_iter_flags_non_convergence():
    rng = np.random.default_rng(4)
    d, v = random_system(200, rng)
    res = solve_secular(d, v, SolverConfig(max_iter=1))
    assert not res.converged.all()
    assert np.all(res.iterations <= 1)
    assert np.all(res.gap_from_left > 0)


def test_no_local_shift_fails_on_clustered_poles():
    # poles k * 1e-13 apart near 1: gaps are a few ulps of the absolute positions
    n = 200
    d = 1.0 + np.arange(n) * 1e-13
    v = np.full(n, 1e-3)
    shifted = solve_secular(d, v)
    assert shifted.converged.all() and shifted.interlacing_ok
    with np.errstate(all="ignore"):
        plain = solve_secular(d, v, SolverConfig(use_local_shifting=False))
    gl = plain.gap_from_left
    broken = (~np.isfinite(gl)) | (gl <= 0) | (gl[:] >= np.append(np.diff(d), np.inf))
    assert (~plain.converged).mean() >= 0.3 or broken.any() or not np.isfinite(plain.lam).all()


def test_local_shift_residuals_much_smaller_on_clustered_poles():
    n = 100
    d = 1.0 + np.arange(n) * 1e-13
    v = np.full(n, 1e-3)
    res = solve_secular(d, v)
    f_shift = secular_residual(d, v, res.d[res.anchor], res.eta)
    with np.errstate(all="ignore"):
        plain = solve_secular(d, v, SolverConfig(use_local_shifting=False))
        f_plain = secular_residual(d, v, d[plain.anchor], plain.eta)
    assert not np.isfinite(f_plain).all() or np.max(np.abs(f_plain)) >= 1e6 * np.max(np.abs(f_shift))


def secular_residual(d, v, base, eta):
    """``f(lambda_k)`` with exact gaps (``base + eta`` never rounded)."""
    import mpmath
    mpmath.mp.prec = 120
    out = []
    for bk, ek in zip(base, eta):
        x = mpmath.mpf(bk) + mpmath.mpf(ek)
        out.append(float(1 + sum(mpmath.mpf(vj) ** 2 / (mpmath.mpf(dj) - x) for dj, vj in zip(d, v))))
    return np.array(out)


# --- eigenvector data -------------------------------------------------------------

def test_loewner_examples():
    assert np.allclose(loewner_vhat(np.array([0.0]), np.array([1.0]), np.array([1.0])), [1.0])
    d = np.array([0.0, 2.0])
    lam = np.array([2 - np.sqrt(2), 2 + np.sqrt(2)])
    vhat = loewner_vhat(d, lam, lam - d)
    assert np.allclose(vhat, [1.0, 1.0], rtol=0, atol=8 * EPS)
    assert np.allclose(normalization_b(np.array([0.0]), [1.0], np.array([1.0]), [1.0]), [1.0])
    b = normalization_b(d, lam, lam - d, vhat)
    Q = vhat[:, None] / (d[:, None] - lam[None, :]) * b[None, :]
    assert np.allclose(np.linalg.norm(Q, axis=0), 1.0, rtol=0, atol=1e-14)


def test_loewner_recovers_weights_at_exact_roots():
    rng = np.random.default_rng(5)
    d, v = random_system(300, rng)
    res = solve_secular(d, v)
    vhat = loewner_vhat(d, res.lam, res.eta, res.anchor)
    assert np.max(np.abs(vhat - np.abs(v)) / np.abs(v)) <= 1e-10
    unpaired = loewner_vhat(d, res.lam, res.eta, res.anchor, paired=False)
    assert np.max(np.abs(unpaired - vhat) / vhat) <= 1e-10
    b = normalization_b(d, res.lam, res.eta, vhat, res.anchor)
    Q = qhat_dense(d, res, vhat, b)
    assert np.abs(Q.T @ Q - np.eye(300)).max() <= 1e-13
    assert np.max(np.linalg.norm(Q.T @ Q - np.eye(300), axis=0)) / 300 <= 1e-15


def test_root_closer_to_pole_than_its_ulp():
    # the second root sits about 1e-38 above d_1, far below ulp(d_1)
    d = np.array([0.05, 0.06, 0.3])
    v = np.array([0.05, 1e-19, 0.2])
    cfg = SolverConfig(tau=1e-30)
    res = solve_secular(d, v, cfg)
    assert res.converged.all() and interlaces(d, res.anchor, res.eta)
    assert res.anchor[1] == 1 and 0 < res.eta[1] < 1e-36
    assert res.lam[1] == d[1]  # the absolute value rounds onto the pole
    vhat = loewner_vhat(d, res.lam, res.eta, res.anchor)
    b = normalization_b(d, res.lam, res.eta, vhat, res.anchor)
    Q = qhat_dense(d, res, vhat, b)
    assert np.abs(Q.T @ Q - np.eye(3)).max() <= 1e-14
    assert np.allclose(vhat, np.abs(v), rtol=1e-12, atol=0)


def test_loewner_rejects_non_interlaced():
    d = np.array([0.0, 1.0])
    with pytest.raises(InvalidInputError):
        loewner_vhat(d, np.array([0.5, 0.7]), np.array([0.5, -0.3]), np.array([0, 1]))
