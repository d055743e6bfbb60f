import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tala.energy import (
    BDF2Coefficients, EnergyCoefficients, EnergyConfig, LinearInTime, MMOCConfig, StepSolvers, TimeState,
    advance_step, bdf2_coefficients, cfl_timestep, clamp_to_shell, departure_points, dirichlet_vector,
    element_speed_over_h, extrapolate, initial_temperature, mmoc_advect, mmoc_histories,
    shear_heating_values, solve_diffusion_step, substep_count, track_departure,
)
from tala.femcore import FieldFunction, stiffness_operator
from tala.krylov import StoppingRule, cg_solve
from tala.physics import default_physical_params, gravity

positive = st.floats(1e-4, 1e2)


def _unit_coeffs(conductivity=0.1, reaction=0.0, heating=0.0, grav=gravity):
    return EnergyCoefficients(
        conductivity=conductivity, reaction=reaction, heating=heating, shear_factor=0.0,
        density=lambda x: np.ones(np.shape(x)[:-1]), grad_ln_density=lambda x: np.zeros(np.shape(x)),
        gravity=grav)


def _field(space, fn):
    return FieldFunction(space, space.interpolate(fn))


# ------------------------------------------------------------------ BDF2

def test_bdf2_equal_steps():
    c = bdf2_coefficients(0.3, 0.3)
    assert (c.s_new, c.s_cur, c.s_old) == pytest.approx((1.5, 2.0, 0.5), abs=1e-15)


def test_bdf2_unequal_steps():
    c = bdf2_coefficients(1.0, 2.0)
    assert (c.s_new, c.s_cur, c.s_old) == pytest.approx((4 / 3, 1.5, 1 / 6), abs=1e-15)


def test_bdf2_rejects_nonpositive_steps():
    with pytest.raises(ValueError):
        bdf2_coefficients(0.0, 1.0)
    with pytest.raises(ValueError):
        bdf2_coefficients(1.0, -1.0)


def test_bdf2_identity_random_pairs():
    rng = np.random.default_rng(0)
    for a, b in 10.0 ** rng.uniform(-4, 2, size=(1000, 2)):
        c = bdf2_coefficients(a, b)
        assert abs(c.s_new - c.s_cur + c.s_old) <= 1e-14 * c.s_cur


@given(positive, positive, st.floats(-10, 10))
def test_bdf2_exact_on_quadratics(tau_new, tau_old, t):
    # D[T] = tau_new T'(t^{n+1}) for T in span{1, t, t^2}
    c = bdf2_coefficients(tau_new, tau_old)
    t1, t0, tm = t, t - tau_new, t - tau_new - tau_old
    for f, df in ((lambda s: 1.0, 0.0), (lambda s: s, 1.0), (lambda s: s * s, 2 * t)):
        d = c.s_new * f(t1) - c.s_cur * f(t0) + c.s_old * f(tm)
        scale = max(1.0, t * t, tau_old ** 2) * c.s_cur
        assert d == pytest.approx(tau_new * df, abs=1e-12 * scale)


def test_implicit_euler_coefficients():
    c = BDF2Coefficients.implicit_euler()
    assert (c.s_new, c.s_cur, c.s_old) == (1.0, 1.0, 0.0)


# ----------------------------------------------------------- extrapolate

@given(positive, positive)
def test_extrapolation_exact_for_linear_in_time(tau_new, tau_old):
    a, b = np.array([1.0, -2.0]), np.array([0.5, 3.0])
    f = lambda t: a + b * t
    out = extrapolate(f(0.0), f(-tau_old), tau_new, tau_old)
    np.testing.assert_allclose(out, f(tau_new), rtol=1e-12, atol=1e-12 * (1 + tau_new))


def test_extrapolation_of_fields(disc2):
    space = disc2.space("P2", 2)
    rng = np.random.default_rng(1)
    fn, fo = (FieldFunction(space, rng.standard_normal(space.dim)) for _ in range(2))
    out = extrapolate(fn, fo, 0.2, 0.1)
    assert out.space is space
    expected = [a + (a - b) * 2.0 for a, b in zip(fn.coefficients, fo.coefficients)]
    np.testing.assert_allclose(out.coefficients, expected, rtol=1e-15)
    np.testing.assert_array_equal(extrapolate(fn, fn, 0.3, 0.1).coefficients, fn.coefficients)
    with pytest.raises(ValueError):
        extrapolate(fn, fo, 0.1, 0.0)


# ------------------------------------------------------------------ MMOC

def test_substep_count_policy():
    assert substep_count(0.1, 0.0, 0.05) == 1
    assert substep_count(0.1, 1.0, 0.05) == 2
    assert substep_count(0.1, 1.0, 0.03) == 4
    assert substep_count(1.0, 1e9, 1e-3, cap=50) == 50


def test_clamp_to_shell(disc2):
    pts = np.array([[0.5, 0.0], [1.7, 0.0], [0.0, 5.0]])
    out = clamp_to_shell(disc2, pts)
    r = np.linalg.norm(out, axis=1)
    assert r[0] == pytest.approx(disc2.r_cmb, abs=1e-11) and r[2] == pytest.approx(disc2.r_surface, abs=1e-11)
    np.testing.assert_array_equal(out[1], pts[1])
    assert np.all(r >= disc2.r_cmb) and np.all(r <= disc2.r_surface)


def test_zero_velocity_is_identity(disc2):
    space = disc2.space("P2", 2)
    T = _field(space, lambda x: np.sin(x[:, 0]))
    zero = FieldFunction(disc2.space("P2vec", 2), np.zeros(disc2.space("P2vec", 2).dim))
    np.testing.assert_array_equal(mmoc_advect(T, zero, zero, 0.1).coefficients, T.coefficients)


def test_constant_advection_exact_for_quadratics(flat2):
    # RK4 is exact for constant fields and P2 reproduces global quadratics on the polygonal mesh
    space, vspace = flat2.space("P2", 2), flat2.space("P2vec", 2)
    c, tau = np.array([0.3, -0.2]), 0.25
    q = lambda x: 1 + x[:, 0] - 2 * x[:, 1] + x[:, 0] * x[:, 1] + 0.5 * x[:, 1] ** 2
    T = _field(space, q)
    u = FieldFunction(vspace, np.tile(c, space.dim))
    dep = departure_points(space, u, u, tau)
    r = flat2.blending.domain_radius(space.nodes - tau * c)
    inner = (r > flat2.r_cmb + 1e-9) & (r < flat2.r_surface - 1e-9)
    assert inner.sum() > space.dim // 3
    np.testing.assert_allclose(dep[inner], space.nodes[inner] - tau * c, atol=1e-13)
    out = mmoc_advect(T, u, u, tau, departure=dep)
    np.testing.assert_allclose(out.coefficients[inner], q(space.nodes[inner] - tau * c), atol=1e-12)


def test_rotation_single_node():
    from tala.femcore import Discretisation
    disc = Discretisation.annulus(max_level=0)
    rot = lambda theta, x: np.stack([-x[:, 1], x[:, 0]], axis=1)
    tau = 0.01
    x = np.array([[1.7, 0.0]])
    dep = track_departure(disc, x, rot, tau, 1)
    exact = 1.7 * np.array([math.cos(tau), -math.sin(tau)])
    assert np.linalg.norm(dep[0] - exact) < 1.7 * tau ** 5


def test_linear_in_time_velocity(disc2):
    vs = disc2.space("P2vec", 2)
    a = FieldFunction(vs, np.tile([1.0, 0.0], vs.dim // 2))
    b = FieldFunction(vs, np.tile([0.0, 2.0], vs.dim // 2))
    vel = LinearInTime(a, b)
    pts = np.array([[1.5, 0.2], [0.1, -1.9]])
    np.testing.assert_allclose(vel(0.25, pts), np.tile([0.25, 1.5], (2, 1)), atol=1e-12)
    assert vel.max_speed() == pytest.approx(2.0)


def test_histories_match_nested_transport(flat2):
    space, vs = flat2.space("P2", 2), flat2.space("P2vec", 2)
    c1, c2 = np.array([0.2, 0.1]), np.array([-0.1, 0.3])
    u1 = FieldFunction(vs, np.tile(c1, space.dim))
    u2 = FieldFunction(vs, np.tile(c2, space.dim))
    lin = lambda x: 0.5 + x[:, 0] - x[:, 1]
    Tn, Tm = _field(space, lin), _field(space, lambda x: 2 * lin(x))
    hat_n, hat_nm1 = mmoc_histories(Tn, Tm, u1, u1, u2, 0.1, 0.1, MMOCConfig(substeps=1))
    np.testing.assert_allclose(hat_n.coefficients, mmoc_advect(Tn, u1, u1, 0.1).coefficients)
    inner = mmoc_advect(Tm, u1, u1, 0.1)
    np.testing.assert_allclose(hat_nm1.coefficients, mmoc_advect(inner, u1, u2, 0.1).coefficients)


def test_velocity_level_mismatch_rejected(disc2):
    T = FieldFunction(disc2.space("P2", 2), np.zeros(disc2.space("P2", 2).dim))
    u = FieldFunction(disc2.space("P2vec", 1), np.zeros(disc2.space("P2vec", 1).dim))
    with pytest.raises(ValueError):
        mmoc_advect(T, u, u, 0.1)


# ------------------------------------------------------- diffusion solve

def _steady_state(space, t_surface, t_cmb):
    K = stiffness_operator(space)
    d = dirichlet_vector(space, t_surface, t_cmb)
    mask = np.ones(space.dim)
    mask[space.boundary_nodes] = 0.0
    proj = lambda v: mask * v
    x, rep = cg_solve(lambda v: proj(K.apply(proj(v))), proj(-K.apply(d)),
                      stop=StoppingRule(rtol=1e-14, maxiter=5000), project=proj)
    assert rep.converged
    return FieldFunction(space, d + x)


def test_steady_state_preserved(disc2):
    space = disc2.space("P2", 2)
    steady = _steady_state(space, 0.1, 1.0)
    bdf = bdf2_coefficients(0.05, 0.05)
    T, rep = solve_diffusion_step(space, bdf, 0.05, steady, steady, _unit_coeffs(), dirichlet_vector(space, 0.1, 1.0))
    assert rep.converged
    assert np.abs(T.coefficients - steady.coefficients).max() < 1e-9


@pytest.mark.parametrize("tau_new, tau_old", [(0.1, 0.1), (0.05, 0.08)])
def test_scalar_ode_amplification(disc2, tau_new, tau_old):
    # constant coefficients: the step is the BDF2 recursion for y' = lambda y at every node
    space, vs = disc2.space("P2", 2), disc2.space("P2vec", 2)
    speed, reaction = 2.0, 1.5
    lam = -reaction * speed
    u = FieldFunction(vs, np.tile([speed, 0.0], space.dim))
    coeffs = _unit_coeffs(conductivity=0.0, reaction=reaction,
                          grav=lambda x: np.broadcast_to([-1.0, 0.0], np.shape(x)).copy())
    bdf = bdf2_coefficients(tau_new, tau_old)
    y_n, y_nm1 = 0.8, 1.0
    expected = (bdf.s_cur * y_n - bdf.s_old * y_nm1) / (bdf.s_new - tau_new * lam)
    const = lambda v: FieldFunction(space, np.full(space.dim, v))
    T, _ = solve_diffusion_step(space, bdf, tau_new, const(y_n), const(y_nm1), coeffs,
                                np.full(space.dim, expected), u_star=u, cfg=EnergyConfig(tol_T=1e-14,
                                include_lhs_advection=False))
    np.testing.assert_allclose(T.coefficients, expected, rtol=1e-12)


def test_boundedness_without_sources(disc2):
    space = disc2.space("P2", 2)
    physics = default_physical_params()
    hist = initial_temperature(space, physics, noise=0.03, seed=3)
    bdf = bdf2_coefficients(0.01, 0.01)
    T, _ = solve_diffusion_step(space, bdf, 0.01, hist, hist, _unit_coeffs(conductivity=0.05),
                                dirichlet_vector(space, physics.t_surface, physics.t_cmb))
    lo = min(hist.coefficients.min(), physics.t_surface)
    hi = max(hist.coefficients.max(), physics.t_cmb)
    slack = 0.05 * (hi - lo)
    assert T.coefficients.min() >= lo - slack and T.coefficients.max() <= hi + slack


def test_dirichlet_values_attained(disc2):
    space = disc2.space("P2", 2)
    hist = FieldFunction(space, np.random.default_rng(4).random(space.dim))
    T, _ = solve_diffusion_step(space, BDF2Coefficients.implicit_euler(), 0.02, hist, None,
                                _unit_coeffs(heating=1.0), dirichlet_vector(space, 0.25, 1.75))
    assert np.all(T.coefficients[space.surface_nodes] == 0.25)
    assert np.all(T.coefficients[space.cmb_nodes] == 1.75)


def test_shear_heating_cutoff_near_surface(disc2):
    physics = default_physical_params()
    vs, space = disc2.space("P2vec", 2), disc2.space("P2", 2)
    u = FieldFunction(vs, vs.interpolate(lambda x: np.stack([x[:, 0] ** 2, -x[:, 0] * x[:, 1]], axis=1)))
    T = FieldFunction(space, np.full(space.dim, 0.5))
    coeffs = EnergyCoefficients.from_physics(physics)
    vals = shear_heating_values(u, T, coeffs)
    surf = disc2.mesh[2].surface_elements
    assert np.all(vals[surf] == 0.0)
    assert np.all(np.delete(vals, surf, axis=0) > 0.0)
    coeffs.shear_cutoff = False
    assert np.all(shear_heating_values(u, T, coeffs)[surf] > 0.0)


# ------------------------------------------------------------------ CFL

def test_cfl_matches_element_scan(disc2):
    vs = disc2.space("P2vec", 2)
    rng = np.random.default_rng(6)
    u = FieldFunction(vs, rng.standard_normal(vs.dim))
    speeds = np.linalg.norm(u.coefficients.reshape(-1, 2), axis=1)
    h = disc2.mesh[2].element_diameters
    rate = max(max(speeds[n] for n in cell) / h[k] for k, cell in enumerate(vs.dofmap))
    assert cfl_timestep(u, 0.7, 1e9) == pytest.approx(0.7 / rate, rel=1e-14)
    assert element_speed_over_h(u).max() == pytest.approx(rate, rel=1e-14)


def test_cfl_zero_velocity_and_window(disc2):
    vs = disc2.space("P2vec", 2)
    zero = FieldFunction(vs, np.zeros(vs.dim))
    assert cfl_timestep(zero, 1.0, 0.3) == 0.3
    assert cfl_timestep(zero, 1.0, 0.3, tau_old=0.1) == pytest.approx(0.15)
    fast = FieldFunction(vs, np.full(vs.dim, 100.0))
    small = cfl_timestep(fast, 1.0, 1.0)
    assert cfl_timestep(fast, 1.0, 1.0, tau_old=1.0) == small


# ----------------------------------------------------------- time state

def test_time_state_validation(disc2, disc1):
    T2 = FieldFunction(disc2.space("P2", 2), np.zeros(disc2.space("P2", 2).dim))
    u1 = FieldFunction(disc1.space("P2vec", 1), np.zeros(disc1.space("P2vec", 1).dim))
    with pytest.raises(ValueError):
        TimeState(0, 0.0, 0.0, T2, None, u1, None)
    u2 = FieldFunction(disc2.space("P2vec", 2), np.zeros(disc2.space("P2vec", 2).dim))
    with pytest.raises(ValueError):
        TimeState(0, 0.0, -1.0, T2, None, u2, None)


def test_initial_temperature(disc2):
    physics = default_physical_params()
    space = disc2.space("P2", 2)
    T = initial_temperature(space, physics, noise=0.03, seed=1)
    base = physics.reference_temperature(space.nodes)
    inner = np.setdiff1d(np.arange(space.dim), space.boundary_nodes)
    rel = T.coefficients[inner] / base[inner] - 1.0
    assert np.abs(rel).max() <= 0.03 and np.abs(rel).max() > 0.02
    assert np.all(T.coefficients[space.surface_nodes] == physics.t_surface)
    np.testing.assert_array_equal(initial_temperature(space, physics, seed=1).coefficients, T.coefficients)


def test_quiescent_steps(disc2):
    # zero velocity from the flow solver and no sources: T relaxes by diffusion only and u stays zero
    space, vs = disc2.space("P2", 2), disc2.space("P2vec", 2)
    steady = _steady_state(space, 0.1, 1.0)
    zero_u = FieldFunction(vs, np.zeros(vs.dim))

    def stokes(T, compressible, previous):
        return zero_u, None, None

    solvers = StepSolvers(stokes=stokes, coefficients=_unit_coeffs(), dirichlet=dirichlet_vector(space, 0.1, 1.0),
                          tau_max=0.05)
    state = TimeState(0, 0.0, 0.0, steady, None, zero_u, None)
    for _ in range(2):
        state = advance_step(state, solvers)
    assert state.step == 2 and state.t == pytest.approx(0.1)
    assert np.abs(state.T.coefficients - steady.coefficients).max() < 1e-9
    assert not np.any(state.u.coefficients)
