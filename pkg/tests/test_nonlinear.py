import numpy as np
import pytest
from conftest import angular_bump
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from insenscontrol.errors import (
    ConfigError,
    ExponentWindowError,
    FixedPointDivergence,
    FixedPointMaxIterations,
)
from insenscontrol.geometry import StatePair
from insenscontrol.nonlinear import (
    NonlinearityParams,
    apply_linearized,
    apply_nonlinearity,
    fixed_point_solve,
    nonlinear_residuals,
    reaction_load,
)
from insenscontrol.solvers import source_load

N, T = 20, 1.0
DT = T / N
exponents = st.floats(min_value=2.51, max_value=4.0)
values = arrays(np.float64, 12, elements=st.floats(-1e3, 1e3, allow_nan=False))


def pair(bulk, boundary):
    return StatePair(np.asarray(bulk, float), np.asarray(boundary, float))


def small_source(mesh, scale=1e-3):
    return angular_bump(mesh, np.linspace(0, T, N + 1), amplitude=scale, start=0.0, ramp=0.25)


# ----------------------------------------------------------------------
# pointwise maps


def test_nonlinearity_examples():
    assert np.all(apply_nonlinearity(pair(np.zeros(3), np.zeros(2)), 3, 3).bulk == 0)
    one = apply_nonlinearity(pair(np.ones(3), np.ones(2)), 3.3, 2.7)
    assert np.all(one.bulk == 1.0) and np.all(one.boundary == 1.0)
    assert apply_nonlinearity(pair([-2.0], [-2.0]), 3, 3).bulk[0] == -8.0


def test_linearized_examples():
    w = pair([0.7, -1.2], [2.0])
    out = apply_linearized(pair([1.0, 1.0], [1.0]), w, 3, 3)
    assert np.allclose(out.bulk, 3 * w.bulk) and np.allclose(out.boundary, 3 * w.boundary)
    zero = apply_linearized(pair([0.0, 0.0], [0.0]), w, 3, 3, form="odd")
    assert np.all(zero.bulk == 0.0) and np.all(zero.boundary == 0.0)
    with pytest.raises(ConfigError):
        apply_linearized(w, w, 3, 3, form="newton")


@settings(max_examples=60)
@given(values, exponents, exponents)
def test_oddness_exact(u, p, q):
    a = apply_nonlinearity(pair(u, u[:4]), p, q)
    b = apply_nonlinearity(pair(-u, -u[:4]), p, q)
    assert np.array_equal(a.bulk, -b.bulk) and np.array_equal(a.boundary, -b.boundary)


@settings(max_examples=60)
@given(values, values, exponents)
def test_monotone(a, b, p):
    na = apply_nonlinearity(pair(a, a), p, p).bulk
    nb = apply_nonlinearity(pair(b, b), p, p).bulk
    assert np.all((na - nb) * (a - b) >= 0)


@settings(max_examples=40)
@given(arrays(np.float64, 8, elements=st.floats(0.0, 10.0)), exponents)
def test_odd_form_matches_derivative_for_nonnegative_states(u, p):
    w = pair(np.ones(8), np.ones(3))
    a = apply_linearized(pair(u, u[:3]), w, p, p, form="derivative").bulk
    b = apply_linearized(pair(u, u[:3]), w, p, p, form="odd").bulk
    assert np.allclose(a, b, rtol=1e-14, atol=0)


def test_directional_derivative_first_order(rng):
    u = pair(rng.standard_normal(50), rng.standard_normal(10))
    w = pair(rng.standard_normal(50), rng.standard_normal(10))
    lin = apply_linearized(u, w, 3.2, 2.8)
    errs = []
    for eps in (1e-3, 5e-4, 2.5e-4):
        nu = apply_nonlinearity(u + w * eps, 3.2, 2.8)
        n0 = apply_nonlinearity(u, 3.2, 2.8)
        fd = np.concatenate([(nu.bulk - n0.bulk) / eps - lin.bulk, (nu.boundary - n0.boundary) / eps - lin.boundary])
        errs.append(np.linalg.norm(fd))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(orders - 1.0) < 0.1)


def test_reaction_load_is_lumped(mesh, rng):
    u = rng.standard_normal(mesh.n_nodes)
    load = reaction_load(mesh, u, 3, 3)
    expected = mesh.dual(u**3, mesh.trace(u) ** 3)
    assert np.allclose(load, expected, rtol=1e-14)


def test_params_window():
    with pytest.raises(ExponentWindowError, match=r"\(H2\) exponent window"):
        NonlinearityParams(p=2.0)
    assert NonlinearityParams(p=2.3, q=2.3, window="A2-d3").p == 2.3
    with pytest.raises(ConfigError):
        NonlinearityParams(fixed_point_tol=0.0)
    with pytest.raises(ConfigError):
        NonlinearityParams(max_iterations=0)


# ----------------------------------------------------------------------
# fixed point


def test_zero_data_converges_in_one_iteration(mesh):
    res = fixed_point_solve(None, None, None, None, NonlinearityParams(), None, N, DT, mesh)
    assert res.converged and res.iterations == 1
    assert not np.any(res.cascade.y.nodes) and not np.any(res.cascade.z.nodes)


def test_small_data_contraction(mesh):
    params = NonlinearityParams(fixed_point_tol=1e-10)
    f0 = small_source(mesh)
    res = fixed_point_solve(None, None, f0, None, params, None, N, DT, mesh)
    assert res.converged and res.iterations <= 30
    assert all(r < 1 for r in res.ratios)
    assert res.residual <= 10 * params.fixed_point_tol * res.data_scale
    # independent oracle: residuals straight from the operators
    ry, rz = nonlinear_residuals(mesh, DT, res.cascade.y.nodes, res.cascade.z.nodes,
                                 source_load(mesh, f0, N), np.zeros_like(f0), params)
    assert max(ry, rz) == pytest.approx(res.residual)


def test_limit_independent_of_initial_iterate(mesh):
    params = NonlinearityParams(fixed_point_tol=1e-10)
    f0 = small_source(mesh)
    a = fixed_point_solve(None, None, f0, None, params, None, N, DT, mesh)
    b = fixed_point_solve(None, None, f0, None, params, None, N, DT, mesh, initial_iterate="linear")
    for x, y in ((a.cascade.y, b.cascade.y), (a.cascade.z, b.cascade.z)):
        gap = np.sqrt(DT * np.sum(mesh.node_inner(x.nodes - y.nodes, x.nodes - y.nodes)))
        assert gap <= 5 * params.fixed_point_tol * max(x.l2_norm(), 1e-300)


def test_reaction_changes_solution(mesh):
    f0 = small_source(mesh, 1.0)
    nl = fixed_point_solve(None, None, f0, None, NonlinearityParams(), None, N, DT, mesh)
    lin = fixed_point_solve(None, None, f0, None, NonlinearityParams(), None, N, DT, mesh, linear=True)
    assert lin.iterations == 1
    assert lin.residual < 1e-12 * max(lin.data_scale, 1.0)
    # the cubic damping lowers the state
    assert nl.cascade.y.l2_norm() < lin.cascade.y.l2_norm()


def test_large_data_diverges(mesh):
    f0 = small_source(mesh, 1e4)
    with pytest.raises(FixedPointDivergence):
        fixed_point_solve(None, None, f0, None, NonlinearityParams(), None, N, DT, mesh)
    res = fixed_point_solve(None, None, f0, None, NonlinearityParams(), None, N, DT, mesh, raise_on_failure=False)
    assert not res.converged


def test_iteration_limit(mesh):
    params = NonlinearityParams(fixed_point_tol=1e-14, max_iterations=1)
    with pytest.raises(FixedPointMaxIterations):
        fixed_point_solve(None, None, small_source(mesh), None, params, None, N, DT, mesh)


def test_log_rows(mesh):
    res = fixed_point_solve(None, None, small_source(mesh), None, NonlinearityParams(), None, N, DT, mesh)
    rows = res.log_rows()
    assert [r[0] for r in rows] == list(range(1, res.iterations + 1))
    assert np.isnan(rows[0][2])
