import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from insenscontrol.errors import LinearSolveError, MeshMismatchError
from insenscontrol.geometry import Mesh, MeshConfig, StatePair
from insenscontrol.solvers import (
    ControlField,
    PotentialPair,
    StepOperator,
    solve_backward,
    solve_cascade_linear,
    solve_forward,
    step_forward,
)
from insenscontrol.verification import duality_gap, temporal_convergence

N, DT = 10, 0.05


def test_step_of_zero_is_zero(mesh):
    out = step_forward(mesh.pair(np.zeros(mesh.n_nodes)), None, None, DT)
    assert np.all(out.bulk == 0.0) and np.all(out.boundary == 0.0)


def test_constants_are_equilibria(mesh):
    c = np.full(mesh.n_nodes, 2.5)
    traj = solve_forward(mesh.pair(c), None, None, N, DT)
    assert np.max(np.abs(traj.nodes - 2.5)) < 1e-12


def test_zero_data_gives_zero_trajectories(mesh):
    zero = mesh.pair(np.zeros(mesh.n_nodes))
    assert not np.any(solve_forward(zero, None, None, N, DT).nodes)
    assert not np.any(solve_backward(zero, None, None, N, DT).nodes)
    casc = solve_cascade_linear(zero, None, time_steps=N, dt=DT)
    assert not np.any(casc.y.nodes) and not np.any(casc.z.nodes)


def test_energy_non_increasing_without_sources(mesh, rng):
    pots = PotentialPair.constant(mesh, 0.5, 1.0)
    traj = solve_forward(mesh.pair(rng.standard_normal(mesh.n_nodes)), None, pots, N, DT)
    assert np.all(np.diff(traj.norms()) <= 1e-14)
    assert traj.energy["monotone"]


def test_energy_estimate_constant(mesh, rng):
    h = StatePair(rng.standard_normal((N + 1, mesh.n_nodes)), rng.standard_normal((N + 1, mesh.n_bnd)), mesh)
    traj = solve_forward(mesh.pair(rng.standard_normal(mesh.n_nodes)), h, None, N, DT)
    assert 0 < traj.energy["C_mesh"] <= traj.energy["guaranteed"]


def test_duality_against_explicit_transpose(tiny_mesh, rng):
    """Forward time map vs. the dense transpose on a tiny grid."""
    m = tiny_mesh
    E = StepOperator(m, DT).matrix(1).toarray()
    Md = np.diag(m.mass / DT)
    step = np.linalg.solve(E, Md)                       # y^n = E^{-1} (M/dt) y^{n-1}
    Phi = np.linalg.matrix_power(step, N)
    a = rng.standard_normal(m.n_nodes)
    b = rng.standard_normal(m.n_nodes)
    yT = solve_forward(a, None, None, N, DT, mesh=m).nodes[-1]
    z0 = solve_backward(b, None, None, N, DT, mesh=m).nodes[0]
    # in the mass inner product the adjoint of Phi is M^{-1} Phi^T M
    adj = np.diag(1 / m.mass) @ Phi.T @ np.diag(m.mass)
    assert np.allclose(z0, adj @ b, rtol=1e-12, atol=1e-14)
    lhs = m.node_inner(yT, b)
    rhs = m.node_inner(a, z0)
    assert abs(lhs - rhs) <= 1e-12 * (abs(lhs) + abs(rhs))


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2**32 - 1), st.floats(min_value=0.0, max_value=3.0))
def test_duality_gap_random_pairs(seed, r):
    m = Mesh(MeshConfig(radial_cells=8, angular_cells=16))
    pots = PotentialPair.constant(m, r, 0.5 * r)
    assert duality_gap(m, DT, N, np.random.default_rng(seed), pots) <= 1e-12


def test_duality_gap_time_dependent_potential(mesh, rng):
    R = rng.uniform(0, 2, (N + 1, mesh.n_nodes))
    Rg = rng.uniform(0, 2, (N + 1, mesh.n_bnd))
    assert duality_gap(mesh, DT, N, rng, PotentialPair(R, Rg)) <= 1e-12


def test_time_reversal(mesh, rng):
    h = rng.standard_normal((N + 1, mesh.n_nodes))
    g = np.zeros_like(h)
    g[1:] = h[1:][::-1]                                 # g^m = h^{N+1-m}
    y0 = rng.standard_normal(mesh.n_nodes)
    y = solve_forward(y0, h, None, N, DT, mesh=mesh).nodes
    z = solve_backward(y0, g, None, N, DT, mesh=mesh).nodes
    assert np.allclose(z[::-1], y, rtol=1e-12, atol=1e-12)


def test_cascade_decouples_without_y(mesh):
    casc = solve_cascade_linear(None, ControlField.zero(mesh, N), None, None, None, N, DT, mesh=mesh)
    assert not np.any(casc.z.nodes)
    assert np.all(casc.z.nodes[-1] == 0.0)


def test_cascade_superposition(mesh, rng):
    def run(y0, v, f0, f1):
        c = solve_cascade_linear(y0, ControlField(v, mesh), f0, f1, None, N, DT, mesh=mesh)
        return np.concatenate([c.y.nodes, c.z.nodes])

    shape = (N + 1, mesh.n_nodes)
    a = [rng.standard_normal(mesh.n_nodes), rng.standard_normal(shape), rng.standard_normal(shape),
         rng.standard_normal(shape)]
    b = [rng.standard_normal(mesh.n_nodes), rng.standard_normal(shape), rng.standard_normal(shape),
         rng.standard_normal(shape)]
    lhs = run(*[x + 2.0 * y for x, y in zip(a, b)])
    rhs = run(*a) + 2.0 * run(*b)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * np.max(np.abs(rhs))


def test_cascade_boundary_coupling_is_laplace_beltrami():
    m = Mesh(MeshConfig(radial_cells=8, angular_cells=16, observation=(1.3, 1.9),
                        g_arcs=(("outer", 0.0, 2 * np.pi),)))
    th = m.node_theta[m.bnd_nodes]
    yb = np.cos(2 * th) * (m.bnd_radius == m.R1)
    u = np.zeros(m.n_nodes)
    u[m.bnd_nodes] = yb
    # the boundary share of M B u divided by the boundary weight
    src = (m.coupling_matrix @ u)[m.bnd_nodes] / m.w_bnd
    lam = -(2 - 2 * np.cos(2 * m.dth)) / (m.R1 * m.dth) ** 2
    assert np.allclose(src[m.nth:], -lam * yb[m.nth:], atol=1e-12)


def test_control_support_is_enforced(mesh, rng):
    v = ControlField(rng.standard_normal((N + 1, mesh.n_nodes)), mesh)
    assert v.support_ok()
    assert np.all(v.values[:, ~mesh.omega] == 0.0)
    assert np.all(v.values[0] == 0.0)


def test_manufactured_radial_solution_first_order_in_time():
    m = Mesh(MeshConfig(radial_cells=8, angular_cells=16))
    r = m.node_r

    def ystar(t):
        return np.exp(-t) * (1 + (r - m.R0) * (m.R1 - r))

    errs = []
    for steps in (10, 20, 40):
        dt = 0.5 / steps
        op = StepOperator(m, dt)
        y = ystar(0.0)
        for n in range(1, steps + 1):
            t = n * dt
            # load from the discrete operators: M d_t y* + K y*
            y = op.solve(n, m.mass / dt * y + (-m.mass * ystar(t) + m.K @ ystar(t)))
        errs.append(m.node_norm(y - ystar(0.5)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 0.9)


def test_temporal_order_of_manufactured_solution():
    _, orders = temporal_convergence((10, 20, 40))
    assert np.all(orders >= 0.9)


def test_invalid_step_and_potentials(mesh):
    with pytest.raises(LinearSolveError):
        StepOperator(mesh, 0.0)
    with pytest.raises(ValueError):
        PotentialPair(np.full(mesh.n_nodes, np.nan), np.zeros(mesh.n_bnd))
    with pytest.raises(MeshMismatchError):
        PotentialPair.zero(mesh).reaction(Mesh(MeshConfig(radial_cells=4, angular_cells=8)))


def test_non_finite_solution_raises(mesh):
    rhs = np.zeros(mesh.n_nodes)
    rhs[3] = np.inf
    with pytest.raises(LinearSolveError, match="non-finite"):
        StepOperator(mesh, DT).solve(1, rhs)


def test_source_lattice_mismatch(mesh):
    with pytest.raises(MeshMismatchError):
        solve_forward(np.zeros(mesh.n_nodes), np.zeros((N, mesh.n_nodes)), None, N, DT, mesh=mesh)
