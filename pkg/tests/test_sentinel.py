import numpy as np
import pytest
from conftest import angular_bump
from hypothesis import given, settings
from hypothesis import strategies as st

from insenscontrol.control import synthesize_control
from insenscontrol.errors import ConfigError, MeshMismatchError
from insenscontrol.nonlinear import NonlinearityParams
from insenscontrol.sentinel import (
    Perturbation,
    derivative_convergence,
    dual_pairing,
    evaluate_sentinel,
    insensitivity_check,
    make_perturbations,
    quadratic_scaling_check,
)
from insenscontrol.solvers import Trajectory

N, T = 10, 1.0
DT = T / N


def test_sentinel_of_zero(mesh):
    assert evaluate_sentinel(Trajectory(np.zeros((N + 1, mesh.n_nodes)), DT, mesh)) == 0.0


@pytest.mark.parametrize("c", [1.0, -2.5])
def test_sentinel_of_constant(mesh, c):
    y = Trajectory(np.full((N + 1, mesh.n_nodes), c), DT, mesh)
    area_O = np.sum(mesh.w_bulk * mesh.observation)
    assert evaluate_sentinel(y) == pytest.approx(0.5 * c**2 * area_O * T, rel=1e-13)
    assert evaluate_sentinel(y, rule="trapezoid") == pytest.approx(0.5 * c**2 * area_O * T, rel=1e-13)


def test_sentinel_matches_masked_integrals(mesh, rng):
    y = rng.standard_normal((N + 1, mesh.n_nodes))
    obs = np.sum(mesh.bulk_inner(y[1:] * mesh.observation, y[1:]))
    yb = mesh.trace(y[1:])
    g = np.sum(mesh.tangential_inner(yb, yb, masked=True))
    assert evaluate_sentinel(y, mesh, DT) == pytest.approx(0.5 * DT * (obs + g), rel=1e-13)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1))
def test_sentinel_nonnegative(seed):
    from conftest import SMALL

    from insenscontrol.geometry import Mesh

    m = Mesh(SMALL)
    y = np.random.default_rng(seed).standard_normal((N + 1, m.n_nodes))
    assert evaluate_sentinel(y, m, DT) >= 0.0


def test_sentinel_argument_errors(mesh):
    with pytest.raises(ValueError):
        evaluate_sentinel(np.zeros((N + 1, mesh.n_nodes)))
    with pytest.raises(MeshMismatchError):
        evaluate_sentinel(np.zeros((N + 1, 5)), mesh, DT)
    with pytest.raises(ConfigError):
        evaluate_sentinel(np.zeros((N + 1, mesh.n_nodes)), mesh, DT, rule="simpson")


def test_perturbations_have_unit_norm(mesh):
    perts = make_perturbations(mesh, 10, seed=1)
    assert len(perts) == 10
    assert [p.label for p in perts[-2:]] == ["radial-bump", "boundary-mode-2"]
    for p in perts:
        assert abs(p.norm() - 1.0) <= 1e-12
    with pytest.raises(ConfigError):
        Perturbation(perts[0].state * 2.0)
    with pytest.raises(ConfigError):
        Perturbation.normalized(mesh, np.zeros(mesh.n_nodes), np.zeros(mesh.n_bnd))


def test_perturbations_seeded(mesh):
    a = make_perturbations(mesh, 4, seed=5)
    b = make_perturbations(mesh, 4, seed=5)
    c = make_perturbations(mesh, 4, seed=6)
    assert np.array_equal(a[0].state.bulk, b[0].state.bulk)
    assert not np.array_equal(a[0].state.bulk, c[0].state.bulk)


@pytest.fixture(scope="module")
def setup(mesh, weights):
    f0 = angular_bump(mesh, weights.t)
    control = synthesize_control(mesh, weights, f0, cg_tol=1e-12)[0]
    return f0, control, make_perturbations(mesh, 4, seed=0)


def test_baseline_derivatives_match_dual_pairing(mesh, setup):
    f0, _, perts = setup
    rep = insensitivity_check(None, f0, perts, 1e-7, mesh=mesh, time_steps=N, dt=DT, baseline=False)
    for row in rep.rows:
        for fd, dual in ((row.d1_fd, row.d1_dual), (row.d2_fd, row.d2_dual)):
            assert fd == pytest.approx(dual, rel=1e-5, abs=1e-9 * rep.z0_norm)
    assert max(abs(r.d1_fd) for r in rep.rows) > 0


def test_zero_source_zero_control_has_zero_derivatives(mesh, setup):
    _, _, perts = setup
    rep = insensitivity_check(None, None, perts, 1e-4, mesh=mesh, time_steps=N, dt=DT)
    assert rep.phi == 0.0 and rep.z0_norm == 0.0
    assert rep.max_derivative < 1e-12


def test_control_reduces_derivatives(mesh, setup):
    f0, control, perts = setup
    rep = insensitivity_check(control, f0, perts, 1e-7, mesh=mesh, time_steps=N, dt=DT, linear=True, threads=2)
    assert rep.baseline_max_derivative > 0
    assert rep.reduction >= 1e3
    d = rep.as_dict()
    assert d["reduction"] == rep.reduction and len(d["perturbations"]) == len(perts)


def test_negated_perturbation_negates_derivatives(mesh, setup):
    f0, _, perts = setup
    p = perts[0]
    a = insensitivity_check(None, f0, [p], 1e-7, mesh=mesh, time_steps=N, dt=DT, baseline=False).rows[0]
    b = insensitivity_check(None, f0, [-p], 1e-7, mesh=mesh, time_steps=N, dt=DT, baseline=False).rows[0]
    assert b.d1_fd == pytest.approx(-a.d1_fd, rel=1e-6)
    assert b.d2_fd == pytest.approx(-a.d2_fd, rel=1e-6)
    assert b.d1_dual == -a.d1_dual


def test_quadratic_scaling_linear(mesh):
    perts = make_perturbations(mesh, 10, seed=2)
    assert quadratic_scaling_check(perts, (0.5, 2.0), mesh, N, DT) <= 1e-12


def test_linear_regime_derivative_is_exact(mesh, setup):
    f0, _, perts = setup
    gaps, pairing = derivative_convergence(perts[1], [1e-3, 5e-4, 2.5e-4], None, f0, mesh=mesh, time_steps=N,
                                           dt=DT, linear=True)
    # Phi is quadratic, so central differences carry no truncation error
    assert np.all(gaps <= 1e-9 * abs(pairing))


def test_nonlinear_regime_second_order(mesh, setup):
    f0, _, perts = setup
    params = NonlinearityParams(fixed_point_tol=1e-15, max_iterations=100)
    gaps, _pairing = derivative_convergence(perts[0], [0.4, 0.2, 0.1], None, 100 * f0, params, mesh, N, DT)
    orders = np.log2(gaps[:-1] / gaps[1:])
    assert np.all(np.abs(orders - 2.0) < 0.2), orders


def test_dual_pairing_components(mesh):
    p = make_perturbations(mesh, 3)[-1]          # boundary mode only
    z0 = np.ones(mesh.n_nodes)
    d1, d2 = dual_pairing(z0, p)
    assert d1 == 0.0
    assert d2 == pytest.approx(mesh.boundary_inner(np.ones(mesh.n_bnd), p.state.boundary))
