import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tala.constraints import (
    BoundaryConditionSet, ProjectionOperator, apply_freeslip, apply_zero_mean, cmb_normals,
    eliminate_dirichlet, pressure_shift_constant,
)
from tala.femcore import ContractViolation, FieldFunction, integrate


def _vec(space, seed):
    return np.random.default_rng(seed).standard_normal(space.dim)


@given(st.integers(0, 10_000))
def test_freeslip_removes_normal_component(seed):
    space = _spaces()["v"]
    u = apply_freeslip(FieldFunction(space, _vec(space, seed)))
    n = cmb_normals(space)
    un = np.einsum("nc,nc->n", u.values[space.cmb_nodes], n)
    assert np.abs(un).max() <= 1e-14 * np.abs(u.coefficients).max()


@given(st.integers(0, 10_000))
def test_projections_idempotent(seed):
    sp = _spaces()
    for kind, space in [("velocity", sp["v"]), ("freeslip", sp["v"]), ("zero_mean", sp["p"]),
                        ("dirichlet", sp["t"])]:
        proj = ProjectionOperator(kind, space)
        once = proj(_vec(space, seed))
        np.testing.assert_allclose(proj(once), once, atol=1e-14)


def test_velocity_projection_zeroes_surface_rows():
    space = _spaces()["v"]
    proj = ProjectionOperator("velocity", space)
    out = proj(_vec(space, 1)).reshape(-1, 2)
    assert np.all(out[space.surface_nodes] == 0.0)
    mask = proj.mask().reshape(-1, 2)
    assert np.all(mask[space.surface_nodes] == 0.0) and np.all(mask[space.inner_nodes] == 1.0)


def test_projection_is_orthogonal():
    space = _spaces()["v"]
    proj = ProjectionOperator("velocity", space)
    x, y = _vec(space, 2), _vec(space, 3)
    assert np.dot(proj(x), y) == pytest.approx(np.dot(x, proj(y)), rel=1e-12)


@given(arrays(np.float64, 10, elements=st.floats(-1e6, 1e6)))
def test_zero_mean(values):
    out = apply_zero_mean(values)
    assert abs(out.mean()) <= 1e-12 * max(1.0, np.abs(values).max())


def test_pressure_shift_constant():
    space = _spaces()["p"]
    p = FieldFunction(space, space.interpolate(lambda x: x[:, 0] ** 2 + 0.3))
    c = pressure_shift_constant(p)
    assert abs(integrate(FieldFunction(space, p.coefficients + c))) < 1e-12


def test_projection_contracts():
    sp = _spaces()
    with pytest.raises(ContractViolation):
        ProjectionOperator("velocity", sp["p"])
    with pytest.raises(ValueError):
        ProjectionOperator("bogus", sp["p"])
    with pytest.raises(ContractViolation):
        apply_freeslip(np.zeros(sp["p"].dim), sp["p"])


def test_boundary_condition_set():
    sp = _spaces()
    bcs = BoundaryConditionSet(surface_velocity=lambda x: np.stack([-x[:, 1], x[:, 0]], axis=1),
                               t_surface=0.1, t_cmb=1.2)
    u = bcs.surface_interpolant(sp["v"]).reshape(-1, 2)
    assert np.all(u[sp["v"].inner_nodes] == 0.0)
    assert np.abs(u[sp["v"].surface_nodes]).max() > 0
    assert bcs.surface_tangency_defect(sp["v"]) < 1e-13
    t = bcs.temperature_values(sp["t"])
    assert np.all(t[sp["t"].surface_nodes] == 0.1) and np.all(t[sp["t"].cmb_nodes] == 1.2)
    assert BoundaryConditionSet().surface_tangency_defect(sp["v"]) == 0.0


def test_eliminate_dirichlet_moves_interpolant():
    sp = _spaces()
    vproj = ProjectionOperator("velocity", sp["v"])
    pproj = ProjectionOperator("zero_mean", sp["p"])
    f = _vec(sp["v"], 4)
    g = _vec(sp["p"], 5)
    u_int = np.zeros(sp["v"].dim)
    u_int[2 * sp["v"].surface_nodes] = 1.0
    fu, gp = eliminate_dirichlet(lambda u: 2.0 * u, lambda u: u[:sp["p"].dim], f, g, u_int, vproj, pproj)
    np.testing.assert_allclose(fu, vproj(f - 2.0 * u_int))
    np.testing.assert_allclose(gp, pproj(g - u_int[:sp["p"].dim]))


_cache: dict = {}


def _spaces():
    if not _cache:
        from tala.femcore import Discretisation
        d = Discretisation.annulus(max_level=2)
        _cache.update(v=d.space("P2vec", 2), p=d.space("P1", 2), t=d.space("P2", 2))
    return _cache
