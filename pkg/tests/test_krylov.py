import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from tala.krylov import (
    ChebyshevConfig, ChebyshevSmoother, ConvergenceError, LevelOperator, Multigrid, SpectrumError,
    StoppingRule, VCycleConfig, cg_solve, coarse_solve, estimate_spectral_bound, fgmres_solve,
)


def _spd(n, seed):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((n, n))
    return q @ q.T + n * np.eye(n)


def _poisson(n):
    return sp.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr") * (n + 1)


def _interp(nc):
    """Linear interpolation from ``nc`` to ``2 nc + 1`` interior points."""
    rows, cols, vals = [], [], []
    for j in range(nc):
        f = 2 * j + 1
        rows += [f - 1, f, f + 1]
        cols += [j, j, j]
        vals += [0.5, 1.0, 0.5]
    return sp.csr_matrix((vals, (rows, cols)), shape=(2 * nc + 1, nc))


@given(st.integers(2, 30), st.integers(0, 1000))
def test_cg_matches_dense_solve(n, seed):
    a = _spd(n, seed)
    b = np.random.default_rng(seed + 1).standard_normal(n)
    x, rep = cg_solve(lambda v: a @ v, b, stop=StoppingRule(rtol=1e-12, maxiter=10 * n))
    assert rep.converged
    np.testing.assert_allclose(x, np.linalg.solve(a, b), rtol=1e-8, atol=1e-10)


@given(st.integers(2, 30), st.integers(0, 1000), st.integers(2, 40))
def test_fgmres_matches_dense_solve(n, seed, restart):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, n)) + 2 * n * np.eye(n)
    b = rng.standard_normal(n)
    x, rep = fgmres_solve(lambda v: a @ v, b, stop=StoppingRule(rtol=1e-12, maxiter=20 * n), restart=restart)
    assert rep.converged
    np.testing.assert_allclose(x, np.linalg.solve(a, b), rtol=1e-8, atol=1e-10)
    assert np.linalg.norm(b - a @ x) <= 1e-12 * np.linalg.norm(b) * 1.01


def test_fgmres_variable_preconditioner_and_callback():
    rng = np.random.default_rng(0)
    n = 40
    a = rng.standard_normal((n, n)) + 10 * np.eye(n)
    b = rng.standard_normal(n)
    d = np.diag(a)
    calls = []
    count = {"k": 0}

    def prec(r):
        count["k"] += 1
        return r / d * (1.0 + 0.1 * (count["k"] % 3))

    x, rep = fgmres_solve(lambda v: a @ v, b, precond=prec, stop=StoppingRule(rtol=1e-10, maxiter=200),
                          restart=15, callback=lambda it, res: calls.append((it, res)))
    assert rep.converged
    assert [c[0] for c in calls] == list(range(len(calls)))
    assert np.linalg.norm(b - a @ x) <= 1.01e-10 * np.linalg.norm(b)
    res = [c[1] for c in calls]
    within = res[1:16]
    assert all(b2 <= b1 * (1 + 1e-12) for b1, b2 in zip(within, within[1:]))


def test_fgmres_identity_preconditioner_one_step():
    b = np.arange(1.0, 6.0)
    x, rep = fgmres_solve(lambda v: 3.0 * v, b, stop=StoppingRule(rtol=1e-14))
    np.testing.assert_allclose(x, b / 3)
    assert rep.iterations == 1


def test_zero_rhs_returns_immediately():
    for solver in (cg_solve, fgmres_solve):
        x, rep = solver(lambda v: v, np.zeros(4), stop=StoppingRule(rtol=1e-8))
        assert rep.converged and rep.iterations == 0 and not np.any(x)


def test_raise_on_failure():
    a = _spd(50, 1)
    b = np.ones(50)
    with pytest.raises(ConvergenceError):
        cg_solve(lambda v: a @ v, b, stop=StoppingRule(rtol=1e-14, maxiter=2), raise_on_failure=True)
    with pytest.raises(ConvergenceError):
        fgmres_solve(lambda v: a @ v, b, stop=StoppingRule(rtol=1e-14, maxiter=2), raise_on_failure=True)
    _, rep = cg_solve(lambda v: a @ v, b, stop=StoppingRule(rtol=1e-14, maxiter=2))
    assert not rep.converged and rep.iterations == 2


def test_stopping_rule_validation():
    with pytest.raises(ValueError):
        StoppingRule()
    with pytest.raises(ValueError):
        StoppingRule(rtol=-1.0)
    with pytest.raises(ValueError):
        StoppingRule(rtol=1e-3, maxiter=0)
    assert StoppingRule(rtol=1e-2, atol=1e-3).target(1.0) == pytest.approx(1e-2)
    assert StoppingRule(rtol=1e-6, atol=1e-3).target(1.0) == pytest.approx(1e-3)


def test_cg_singular_consistent_with_projection():
    n = 30
    lap = (2 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1))
    lap[0, 0] = lap[-1, -1] = 1.0  # Neumann: constants in the kernel
    zero_mean = lambda v: v - v.mean()
    b = zero_mean(np.random.default_rng(2).standard_normal(n))
    x, rep = cg_solve(lambda v: lap @ v, b, stop=StoppingRule(rtol=1e-12, maxiter=200), project=zero_mean)
    assert rep.converged
    assert abs(x.mean()) < 1e-12
    np.testing.assert_allclose(lap @ x, b, atol=1e-10)


def test_spectral_bound():
    a = _spd(25, 3)
    inv_d = 1.0 / np.diag(a)
    lam = estimate_spectral_bound(lambda v: a @ v, inv_d, iterations=200)
    exact = np.max(np.abs(np.linalg.eigvals(np.diag(inv_d) @ a)))
    assert lam == pytest.approx(exact, rel=1e-3)
    with pytest.raises(SpectrumError):
        estimate_spectral_bound(lambda v: 0 * v, np.ones(3))


def test_chebyshev_damps_high_frequencies():
    n = 63
    a = _poisson(n)
    inv_d = 1.0 / a.diagonal()
    sm = ChebyshevSmoother(lambda v: a @ v, inv_d, ChebyshevConfig(degree=3, steps=1))
    k = np.arange(1, n + 1)
    high = np.sin(np.pi * 50 * k / (n + 1))
    low = np.sin(np.pi * k / (n + 1))
    # error propagation on the homogeneous problem; on [hi/10, hi] the
    # degree-3 polynomial is bounded by 1/T_3((hi + lo)/(hi - lo))
    x0 = 11.0 / 9.0
    bound = 1.0 / (4 * x0 ** 3 - 3 * x0)
    assert np.linalg.norm(sm.smooth(np.zeros(n), high.copy())) <= bound * np.linalg.norm(high)
    assert np.linalg.norm(sm.smooth(np.zeros(n), low.copy())) > 0.8 * np.linalg.norm(low)


def _hierarchy(levels):
    sizes = [3]
    for _ in range(levels - 1):
        sizes.append(2 * sizes[-1] + 1)
    mats = [_poisson(n) for n in sizes]
    ops = [LevelOperator(lambda v, m=m: m @ v, m.diagonal()) for m in mats]
    pro = [_interp(n) for n in sizes[:-1]]
    return Multigrid(ops, pro, VCycleConfig(smoother=ChebyshevConfig(degree=2, steps=2))), mats[-1]


@pytest.mark.parametrize("levels", [4, 6, 8])
def test_multigrid_cg_mesh_independent(levels):
    mg, a = _hierarchy(levels)
    b = np.ones(a.shape[0])
    x, rep = cg_solve(lambda v: a @ v, b, precond=mg.vcycle, stop=StoppingRule(rtol=1e-8, maxiter=100))
    assert rep.converged
    assert rep.iterations <= 12
    np.testing.assert_allclose(a @ x, b, atol=1e-6 * np.linalg.norm(b))


def test_multigrid_rejects_bad_levels():
    mg, _ = _hierarchy(3)
    with pytest.raises(ValueError):
        Multigrid(mg.levels, mg.prolongations[:1], mg.cfg)


def test_coarse_solve_raises():
    a = _spd(20, 4)
    x = coarse_solve(lambda v: a @ v, np.diag(a), np.ones(20), stop=StoppingRule(rtol=1e-10))
    np.testing.assert_allclose(a @ x, np.ones(20), atol=1e-8)
    with pytest.raises(ConvergenceError):
        coarse_solve(lambda v: a @ v, np.diag(a), np.ones(20), stop=StoppingRule(rtol=1e-14, maxiter=1))
