"""Discrete identity residuals and manufactured-solution convergence studies."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Mesh, MeshConfig
from .solvers import StepOperator, _march_backward, _march_forward


def _random_fields(mesh: Mesh, rng, count):
    return rng.standard_normal((count, mesh.n_nodes))


def green_identity_residual(mesh: Mesh, u, v):
    """Relative residual of ``(Lap u, v) = -(grad u, grad v) + (d_nu u, v)_Gamma``."""
    lhs = mesh.bulk_inner(mesh.bulk_laplacian(u), v)
    g = mesh.gradient_inner(u, v)
    b = mesh.boundary_inner(mesh.normal_derivative(u), mesh.trace(v))
    scale = np.abs(lhs) + np.abs(g) + np.abs(b)
    return np.abs(lhs + g - b) / np.where(scale > 0, scale, 1.0)


def surface_divergence_residual(mesh: Mesh, u_b, v_b, masked=False):
    """Relative residual of ``(div_G(a grad_G u), v)_Gamma = -(a grad_G u, grad_G v)``.

    ``a`` is 1 or, with ``masked=True``, the indicator of the arcs ``G``.
    """
    if masked:
        div = mesh.masked_surface_divergence(u_b)
    else:
        div = mesh.laplace_beltrami(u_b)
    lhs = mesh.boundary_inner(div, v_b)
    rhs = -mesh.tangential_inner(u_b, v_b, masked=masked)
    scale = np.abs(lhs) + np.abs(rhs)
    return np.abs(lhs - rhs) / np.where(scale > 0, scale, 1.0)


def duality_gap(mesh: Mesh, dt, time_steps, rng, potentials=None):
    """Relative gap of the forward/backward summation-by-parts identity.

    With ``E y^n = (M/dt) y^{n-1} + h^n`` and ``E phi^{m-1} = (M/dt) phi^m + g^m``:

        sum h^n.phi^{n-1} + y^0.(M/dt) phi^0 = sum y^n.g^n + y^N.(M/dt) phi^N
    """
    op = StepOperator(mesh, dt, potentials)
    n = mesh.n_nodes
    h = rng.standard_normal((time_steps + 1, n))
    g = rng.standard_normal((time_steps + 1, n))
    y0 = rng.standard_normal(n)
    phiT = rng.standard_normal(n)
    y = _march_forward(op, y0, h, time_steps)
    phi = _march_backward(op, phiT, g, time_steps)
    md = mesh.mass / dt
    terms_l = np.concatenate([np.sum(h[1:] * phi[:-1], axis=1), [y0 @ (md * phi[0])]])
    terms_r = np.concatenate([np.sum(y[1:] * g[1:], axis=1), [y[-1] @ (md * phi[-1])]])
    scale = np.sum(np.abs(terms_l)) + np.sum(np.abs(terms_r))
    return float(abs(terms_l.sum() - terms_r.sum()) / scale)


# ----------------------------------------------------------------------
# manufactured solution  u = e^{-t} (1 + r^2 cos(theta) / 4 + (r - c)^3)


@dataclass(frozen=True)
class Manufactured:
    """Smooth exact field with angular dependence and nonzero normal flux."""

    center: float = 1.5

    def u(self, r, th, t):
        c = self.center
        return np.exp(-t) * (1.0 + 0.25 * r**2 * np.cos(th) + (r - c) ** 3)

    def dt(self, r, th, t):
        return -self.u(r, th, t)

    def laplacian(self, r, th, t):
        c = self.center
        # Lap(r^2 cos th) = 3 cos th;  Lap((r-c)^3) = 6 (r-c) + 3 (r-c)^2 / r
        return np.exp(-t) * (0.75 * np.cos(th) + 6.0 * (r - c) + 3.0 * (r - c) ** 2 / r)

    def dr(self, r, th, t):
        c = self.center
        return np.exp(-t) * (0.5 * r * np.cos(th) + 3.0 * (r - c) ** 2)

    def laplace_beltrami(self, r, th, t):
        return np.exp(-t) * (-0.25 * np.cos(th))


def _sources(mesh: Mesh, ms: Manufactured, t):
    r, th = mesh.node_r, mesh.node_theta
    h = ms.dt(r, th, t) - ms.laplacian(r, th, t)
    rb, thb = mesh.node_r[mesh.bnd_nodes], mesh.node_theta[mesh.bnd_nodes]
    sign = np.where(np.isclose(rb, mesh.R0), -1.0, 1.0)
    hb = ms.dt(rb, thb, t) + sign * ms.dr(rb, thb, t) - ms.laplace_beltrami(rb, thb, t)
    return h, hb


def spatial_error(config: MeshConfig, time_steps=10, T=0.5, ms: Manufactured | None = None):
    """Final-time ``L^2`` error with the time discretisation error removed.

    The source is built from the backward difference of the exact solution
    in time and the exact spatial operators, so the exact nodal values solve
    the time-discrete problem up to the spatial truncation error only.
    """
    ms = ms or Manufactured()
    mesh = Mesh(config)
    dt = T / time_steps
    op = StepOperator(mesh, dt, None)
    r, th = mesh.node_r, mesh.node_theta
    y = ms.u(r, th, 0.0)
    md = mesh.mass / dt
    for n in range(1, time_steps + 1):
        t, tp = n * dt, (n - 1) * dt
        h, hb = _sources(mesh, ms, t)
        # replace d_t u by the backward difference
        du = (ms.u(r, th, t) - ms.u(r, th, tp)) / dt
        h = h - ms.dt(r, th, t) + du
        hb = hb - ms.dt(r[mesh.bnd_nodes], th[mesh.bnd_nodes], t) + du[mesh.bnd_nodes]
        y = op.solve(n, md * y + mesh.dual(h, hb))
    err = y - ms.u(r, th, T)
    return float(mesh.node_norm(err)), mesh


def temporal_error(config: MeshConfig, time_steps, T=0.5, ms: Manufactured | None = None):
    """Final-time error of the semi-discrete manufactured problem.

    The load is ``M d_t u + K u`` with the discrete stiffness, so the exact
    nodal trajectory solves the spatially discrete ODE and only the time
    stepping error remains.
    """
    ms = ms or Manufactured()
    mesh = Mesh(config)
    dt = T / time_steps
    op = StepOperator(mesh, dt, None)
    r, th = mesh.node_r, mesh.node_theta
    y = ms.u(r, th, 0.0)
    md = mesh.mass / dt
    for n in range(1, time_steps + 1):
        t = n * dt
        load = mesh.mass * ms.dt(r, th, t) + mesh.K @ ms.u(r, th, t)
        y = op.solve(n, md * y + load)
    return float(mesh.node_norm(y - ms.u(r, th, T)))


def observed_orders(errors, ratio=2.0):
    errors = np.asarray(errors, dtype=float)
    return np.log(errors[:-1] / errors[1:]) / np.log(ratio)


def spatial_convergence(radial_cells=(16, 32, 64), base: MeshConfig | None = None, time_steps=10, T=0.5):
    """Errors and observed orders under simultaneous radial/angular refinement.

    The angular count keeps the base aspect ratio ``Ntheta / Nr``.
    """
    base = base or MeshConfig()
    aspect = base.angular_cells / base.radial_cells
    rows = []
    for nr in radial_cells:
        nth = round(aspect * nr)
        nth += nth % 2
        err, mesh = spatial_error(base.refined(nr, nth), time_steps, T)
        rows.append((nr, nth, max(mesh.dr, mesh.dth * mesh.R1), err))
    errs = [row[3] for row in rows]
    ratio = radial_cells[1] / radial_cells[0] if len(radial_cells) > 1 else 2.0
    return rows, observed_orders(errs, ratio)


def temporal_convergence(steps=(10, 20, 40, 80), config: MeshConfig | None = None, T=0.5):
    config = config or MeshConfig(radial_cells=16, angular_cells=24)
    errs = [temporal_error(config, n, T) for n in steps]
    ratio = steps[1] / steps[0] if len(steps) > 1 else 2.0
    return list(zip(steps, errs)), observed_orders(errs, ratio)
