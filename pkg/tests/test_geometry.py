import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from insenscontrol.errors import ConfigError, MeshMismatchError
from insenscontrol.geometry import Mesh, MeshConfig, StatePair, inner_product_L2
from insenscontrol.verification import (
    green_identity_residual,
    surface_divergence_residual,
)

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def interior(mesh, u):
    return u.reshape(mesh.nr + 1, mesh.nth)[1:-1]


# ----------------------------------------------------------------------
# configuration invariants


@pytest.mark.parametrize("kw, msg", [
    ({"inner_radius": 2.0, "outer_radius": 1.0}, "inner_radius"),
    ({"radial_cells": 3}, "radial_cells"),
    ({"angular_cells": 15}, "angular_cells"),
    ({"angular_cells": 6}, "angular_cells"),
    ({"omega": (0.9, 1.5)}, "compactly contained"),
    ({"observation": (1.8, 1.9), "omega": (1.2, 1.7)}, "(H1)"),
    ({"omega_prime": (1.35, 1.45), "omega_second": (1.36, 1.44)}, "mid-radius"),
    ({"g_arcs": (("middle", 0.0, 1.0),)}, "circle"),
])
def test_config_rejects_invalid_geometry(kw, msg):
    with pytest.raises(ConfigError, match=msg.replace("(", r"\(").replace(")", r"\)")):
        MeshConfig(**kw)


def test_refined_keeps_regions():
    cfg = MeshConfig().refined(16, 24)
    assert (cfg.radial_cells, cfg.angular_cells) == (16, 24)
    assert cfg.omega == MeshConfig().omega


# ----------------------------------------------------------------------
# quadrature and trace maps


def test_boundary_weights_sum_to_perimeter(mesh):
    assert mesh.w_bnd.sum() == pytest.approx(2 * np.pi * (mesh.R0 + mesh.R1), rel=1e-14)


def test_bulk_weights_sum_to_area(mesh):
    # trapezoid in r integrates the linear density r exactly
    assert mesh.w_bulk.sum() == pytest.approx(np.pi * (mesh.R1**2 - mesh.R0**2), rel=1e-13)


def test_trace_map_is_bijection_onto_boundary_rows(mesh):
    nodes = mesh.bnd_nodes
    assert np.unique(nodes).size == mesh.n_bnd
    assert set(mesh.node_r[nodes]) == {mesh.R0, mesh.R1}
    expected = np.flatnonzero(np.isin(mesh.node_r, [mesh.R0, mesh.R1]))
    assert np.array_equal(np.sort(nodes), expected)


def test_inner_product_of_ones_is_area_plus_perimeter(mesh):
    one = mesh.pair(np.ones(mesh.n_nodes))
    assert mesh.inner_product_L2(one, one) == pytest.approx(mesh.area + mesh.perimeter, rel=1e-13)


def test_inner_product_zero_and_symmetry(mesh, rng):
    a = mesh.pair(rng.standard_normal(mesh.n_nodes))
    b = StatePair(rng.standard_normal(mesh.n_nodes), rng.standard_normal(mesh.n_bnd), mesh)
    zero = mesh.pair(np.zeros(mesh.n_nodes))
    assert inner_product_L2(zero, b) == 0.0
    assert inner_product_L2(a, b) == pytest.approx(inner_product_L2(b, a), rel=1e-15)


def test_inner_product_rejects_other_mesh(mesh):
    other = Mesh(MeshConfig(radial_cells=8, angular_cells=16))
    a = mesh.pair(np.ones(mesh.n_nodes))
    b = other.pair(np.ones(other.n_nodes))
    with pytest.raises(MeshMismatchError):
        mesh.inner_product_L2(a, b)
    with pytest.raises(MeshMismatchError):
        StatePair(np.ones(3), np.ones(2), mesh)


def test_state_pair_trace_compatibility(mesh, rng):
    u = rng.standard_normal(mesh.n_nodes)
    assert mesh.pair(u).is_trace_compatible()
    bad = StatePair(u, mesh.trace(u) + 1.0, mesh)
    assert bad.trace_gap() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        bad.nodes()


# ----------------------------------------------------------------------
# bulk operators


def test_laplacian_of_zero_and_constant(mesh):
    assert np.all(mesh.bulk_laplacian(np.zeros(mesh.n_nodes)) == 0.0)
    lap = mesh.bulk_laplacian(np.full(mesh.n_nodes, 3.0))
    assert np.max(np.abs(lap)) < 1e-10


@pytest.mark.parametrize("nr", [8, 16, 32])
def test_laplacian_of_r_squared(nr):
    m = Mesh(MeshConfig(radial_cells=nr, angular_cells=16))
    lap = m.bulk_laplacian(m.node_r**2)
    # the divergence-form stencil is exact for r^2: (r_{i+1/2}(r_{i+1}^2 - r_i^2) - ...)/(r_i dr^2) = 4
    assert np.max(np.abs(interior(m, lap) - 4.0)) < 1e-9
    assert np.max(np.abs(lap - 4.0)) < 1e-9


def test_laplacian_consistency_order_on_smooth_field():
    errs = []
    for nr in (8, 16, 32):
        m = Mesh(MeshConfig(radial_cells=nr, angular_cells=2 * nr))
        r, th = m.node_r, m.node_theta
        u = r**3 * np.cos(th)                 # Lap = 8 r cos(th)
        errs.append(np.max(np.abs(interior(m, m.bulk_laplacian(u) - 8 * r * np.cos(th)))))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders > 1.8)


def test_normal_derivative_of_r(mesh):
    dn = mesh.normal_derivative(mesh.node_r)
    assert np.allclose(dn[: mesh.nth], -1.0, atol=1e-10)
    assert np.allclose(dn[mesh.nth:], 1.0, atol=1e-10)
    assert np.max(np.abs(mesh.normal_derivative(np.full(mesh.n_nodes, 2.0)))) < 1e-10


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_green_identity_exact(seed):
    m = Mesh(MeshConfig(radial_cells=8, angular_cells=16))
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2, m.n_nodes))
    assert green_identity_residual(m, u, v) <= 1e-12


@settings(max_examples=25, deadline=None)
@given(seeds)
def test_bulk_laplacian_self_adjoint_with_homogeneous_flux(seed):
    m = Mesh(MeshConfig(radial_cells=8, angular_cells=16))
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2, m.n_nodes))
    lhs = m.bulk_inner(m.bulk_laplacian(u, flux="neumann"), v)
    rhs = m.bulk_inner(u, m.bulk_laplacian(v, flux="neumann"))
    scale = np.sqrt(m.bulk_inner(u, u) * m.bulk_inner(v, v))
    assert abs(lhs - rhs) <= 1e-12 * scale * np.max(1.0 / m.w_bulk)


# ----------------------------------------------------------------------
# surface operators


@pytest.mark.parametrize("k", [1, 2, 5])
def test_laplace_beltrami_discrete_eigenvalue(mesh, k):
    th = mesh.node_theta[mesh.bnd_nodes]
    u = np.cos(k * th)
    R = mesh.bnd_radius
    lam = -(2 - 2 * np.cos(k * mesh.dth)) / (R * mesh.dth) ** 2
    assert np.allclose(mesh.laplace_beltrami(u), lam * u, atol=1e-12)


def test_laplace_beltrami_of_constant(mesh):
    assert np.max(np.abs(mesh.laplace_beltrami(np.full(mesh.n_bnd, 4.0)))) < 1e-12


def test_laplace_beltrami_limit_k1():
    errs = []
    for nth in (16, 32, 64):
        m = Mesh(MeshConfig(radial_cells=8, angular_cells=nth))
        th = m.node_theta[m.bnd_nodes[: m.nth]]
        errs.append(np.max(np.abs(m.laplace_beltrami(np.cos(np.tile(th, 2)))[: m.nth] + np.cos(th))))
    assert errs[-1] < 1e-3
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.05)


@pytest.mark.parametrize("k", [1, 3])
def test_centered_tangential_gradient_symbol(mesh, k):
    th = mesh.node_theta[mesh.bnd_nodes]
    g = mesh.tangential_gradient(np.sin(k * th), kind="centered")
    expected = np.cos(k * th) * np.sin(k * mesh.dth) / mesh.dth / mesh.bnd_radius
    assert np.allclose(g, expected, atol=1e-12)


def test_tangential_gradient_of_constant(mesh):
    for kind in ("edge", "centered"):
        assert np.max(np.abs(mesh.tangential_gradient(np.ones(mesh.n_bnd), kind=kind))) < 1e-12


@settings(max_examples=25, deadline=None)
@given(seeds, st.booleans())
def test_surface_divergence_theorem_exact(seed, masked):
    m = Mesh(MeshConfig(radial_cells=8, angular_cells=16))
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2, m.n_bnd))
    assert surface_divergence_residual(m, u, v, masked=masked) <= 1e-13


def test_masked_divergence_on_full_circle_is_laplace_beltrami():
    m = Mesh(MeshConfig(radial_cells=8, angular_cells=16, g_arcs=(("outer", 0.0, 2 * np.pi),)))
    th = m.node_theta[m.bnd_nodes]
    u = np.cos(3 * th)
    outer = slice(m.nth, None)
    assert np.allclose(m.masked_surface_divergence(u)[outer], m.laplace_beltrami(u)[outer], atol=1e-12)
    assert np.all(m.masked_surface_divergence(u)[: m.nth] == 0.0)


def test_coupling_matrix_symmetric_psd(mesh, rng):
    C = mesh.coupling_matrix
    assert abs(C - C.T).max() == 0.0
    u = rng.standard_normal((20, mesh.n_nodes))
    quad = np.einsum("ij,ij->i", u, (C @ u.T).T)
    obs = mesh.bulk_inner(u * mesh.observation, u)
    g = mesh.tangential_inner(mesh.trace(u), mesh.trace(u), masked=True)
    assert np.allclose(quad, obs + g, rtol=1e-13)
    assert np.all(quad >= 0)
