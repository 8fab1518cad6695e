"""Annular polar grid, bulk/boundary fields and compatible discrete operators.

Nodes sit at ``r_i = R0 + i*dr`` (``i = 0..Nr``) and ``theta_j = j*dth``
(``j = 0..Ntheta-1``, periodic).  The rows ``i = 0`` and ``i = Nr`` are the
two boundary circles, so a node vector carries a bulk field on the closed
annulus together with its trace; this is how trace compatibility
``y|_Gamma = y_Gamma`` is built into every state.

All second-order operators are assembled as ``G^T W G`` from one discrete
gradient and one diagonal quadrature, which makes the surface divergence
theorem and the Green identity hold to rounding error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, MeshMismatchError

TWO_PI = 2.0 * np.pi
CIRCLES = ("inner", "outer")


def _as_interval(value, name):
    try:
        lo, hi = (float(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a pair of numbers, got {value!r}") from None
    if not lo < hi:
        raise ConfigError(f"{name} must satisfy lo < hi, got ({lo}, {hi})")
    return (lo, hi)


@dataclass(frozen=True)
class MeshConfig:
    """Geometry of the annulus and of the control/observation regions.

    Radial regions (``omega``, ``observation`` and the nested weight rings
    ``omega_prime``, ``omega_second``) are open rings ``lo < r < hi``.  The
    boundary observation set is a list of arcs ``(circle, theta_lo,
    theta_hi)`` with ``circle`` in ``{"inner", "outer"}``.
    """

    inner_radius: float = 1.0
    outer_radius: float = 2.0
    radial_cells: int = 32
    angular_cells: int = 48
    omega: tuple = (1.25, 1.75)
    observation: tuple = (1.3, 1.9)
    omega_prime: tuple = (1.35, 1.7)
    omega_second: tuple = (1.4, 1.65)
    g_arcs: tuple = (("outer", 0.0, float(np.pi)),)

    def __post_init__(self):
        for name in ("omega", "observation", "omega_prime", "omega_second"):
            object.__setattr__(self, name, _as_interval(getattr(self, name), name))
        arcs = []
        for arc in self.g_arcs:
            if len(arc) != 3 or arc[0] not in CIRCLES:
                raise ConfigError(f"g arc must be (circle, lo, hi) with circle in {CIRCLES}, got {arc!r}")
            lo, hi = _as_interval(arc[1:], "g arc")
            arcs.append((arc[0], lo, hi))
        object.__setattr__(self, "g_arcs", tuple(arcs))
        self.validate()

    def validate(self):
        R0, R1 = self.inner_radius, self.outer_radius
        if not 0 < R0 < R1:
            raise ConfigError(f"need 0 < inner_radius < outer_radius, got {R0}, {R1}")
        if int(self.radial_cells) != self.radial_cells or self.radial_cells < 4:
            raise ConfigError(f"radial_cells must be an integer >= 4, got {self.radial_cells}")
        n = self.angular_cells
        if int(n) != n or n < 8 or n % 2:
            raise ConfigError(f"angular_cells must be an even integer >= 8, got {n}")
        w_lo, w_hi = self.omega
        if not R0 < w_lo < w_hi < R1:
            raise ConfigError("omega ring must be compactly contained in the annulus")
        o_lo, o_hi = self.observation
        if not (R0 <= o_lo and o_hi <= R1):
            raise ConfigError("observation ring must lie inside the annulus")
        inter = (max(w_lo, o_lo), min(w_hi, o_hi))
        if inter[1] - inter[0] <= 0:
            raise ConfigError("(H1) violated: omega and observation rings do not overlap")
        p_lo, p_hi = self.omega_prime
        s_lo, s_hi = self.omega_second
        if not (inter[0] <= p_lo and p_hi <= inter[1]):
            raise ConfigError("omega_prime must be nested in omega ∩ observation")
        if not (p_lo <= s_lo and s_hi <= p_hi):
            raise ConfigError("omega_second must be nested in omega_prime")
        mid = 0.5 * (R0 + R1)
        if not p_lo < mid < p_hi:
            raise ConfigError(
                f"mid-radius {mid} must lie inside omega_prime {self.omega_prime} "
                "(critical point of the radial weight)"
            )

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown mesh keys: {sorted(unknown)}")
        if "g_arcs" in data:
            data["g_arcs"] = tuple(tuple(a) for a in data["g_arcs"])
        return cls(**data)

    def refined(self, radial_cells=None, angular_cells=None):
        kw = dict(self.__dict__)
        if radial_cells is not None:
            kw["radial_cells"] = int(radial_cells)
        if angular_cells is not None:
            kw["angular_cells"] = int(angular_cells)
        return MeshConfig(**kw)


def _apply(mat, u):
    """Apply a sparse matrix along the last axis of ``u``."""
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        return mat @ u
    flat = u.reshape(-1, u.shape[-1])
    return (mat @ flat.T).T.reshape(u.shape[:-1] + (mat.shape[0],))


class Mesh:
    """Discrete annulus ``(Omega, Gamma)``; immutable after construction."""

    def __init__(self, config: MeshConfig):
        self.config = config
        self.R0 = float(config.inner_radius)
        self.R1 = float(config.outer_radius)
        self.nr = int(config.radial_cells)
        self.nth = int(config.angular_cells)
        self.dr = (self.R1 - self.R0) / self.nr
        self.dth = TWO_PI / self.nth
        self.r = self.R0 + self.dr * np.arange(self.nr + 1)
        self.theta = self.dth * np.arange(self.nth)
        self.n_nodes = (self.nr + 1) * self.nth
        self.n_bnd = 2 * self.nth

        rr, tt = np.meshgrid(self.r, self.theta, indexing="ij")
        self.node_r = rr.ravel()
        self.node_theta = tt.ravel()

        # trapezoid in r (exact for the linear area density r)
        rad_w = np.full(self.nr + 1, self.dr)
        rad_w[[0, -1]] *= 0.5
        self.w_bulk = np.repeat(rad_w * self.r * self.dth, self.nth)

        self.bnd_nodes = np.concatenate([np.arange(self.nth), self.nr * self.nth + np.arange(self.nth)])
        self.bnd_radius = np.repeat([self.R0, self.R1], self.nth)
        self.bnd_theta = np.tile(self.theta, 2)
        self.w_bnd = self.bnd_radius * self.dth

        self.mass = self.w_bulk.copy()
        self.mass[self.bnd_nodes] += self.w_bnd

        self._build_gradients()
        self._build_masks()
        self.area = float(np.pi * (self.R1**2 - self.R0**2))
        self.perimeter = float(TWO_PI * (self.R0 + self.R1))

    # ------------------------------------------------------------------
    def node(self, i, j):
        return i * self.nth + (j % self.nth)

    def _build_gradients(self):
        nr, nth, dr, dth = self.nr, self.nth, self.dr, self.dth
        idx = np.arange(self.n_nodes).reshape(nr + 1, nth)

        # radial edges (i,j)-(i+1,j)
        a = idx[:-1].ravel()
        b = idx[1:].ravel()
        n_rad = a.size
        r_mid = np.repeat(0.5 * (self.r[:-1] + self.r[1:]), nth)
        rows = np.concatenate([np.arange(n_rad), np.arange(n_rad)])
        cols = np.concatenate([b, a])
        vals = np.concatenate([np.full(n_rad, 1.0 / dr), np.full(n_rad, -1.0 / dr)])
        w_rad = r_mid * dr * dth

        # angular edges (i,j)-(i,j+1)
        a2 = idx.ravel()
        b2 = np.roll(idx, -1, axis=1).ravel()
        n_ang = a2.size
        r_node = np.repeat(self.r, nth)
        rows2 = n_rad + np.concatenate([np.arange(n_ang), np.arange(n_ang)])
        cols2 = np.concatenate([b2, a2])
        inv = 1.0 / (r_node * dth)
        vals2 = np.concatenate([inv, -inv])
        rad_w = np.full(nr + 1, dr)
        rad_w[[0, -1]] *= 0.5
        w_ang = np.repeat(rad_w, nth) * r_node * dth

        self.grad = sp.csr_matrix(
            (np.concatenate([vals, vals2]), (np.concatenate([rows, rows2]), np.concatenate([cols, cols2]))),
            shape=(n_rad + n_ang, self.n_nodes),
        )
        self.w_edge = np.concatenate([w_rad, w_ang])
        self.edge_r = np.concatenate([r_mid, r_node])
        self.edge_nodes = (np.concatenate([a, a2]), np.concatenate([b, b2]))
        self.K_bulk = (self.grad.T @ sp.diags(self.w_edge) @ self.grad).tocsr()

        # boundary forward differences per circle, edge b joins (c,j)-(c,j+1)
        nb = self.n_bnd
        bidx = np.arange(nb).reshape(2, nth)
        nxt = np.roll(bidx, -1, axis=1).ravel()
        cur = bidx.ravel()
        inv_b = 1.0 / (self.bnd_radius * dth)
        self.tgrad = sp.csr_matrix(
            (np.concatenate([inv_b, -inv_b]), (np.concatenate([cur, cur]), np.concatenate([nxt, cur]))),
            shape=(nb, nb),
        )
        self.w_sedge = self.bnd_radius * dth
        self.sedge_theta = self.bnd_theta + 0.5 * dth
        self.K_surf_bnd = (self.tgrad.T @ sp.diags(self.w_sedge) @ self.tgrad).tocsr()

        # trace operator: boundary array <- node array
        self.trace_op = sp.csr_matrix(
            (np.ones(nb), (np.arange(nb), self.bnd_nodes)), shape=(nb, self.n_nodes)
        )
        self.K_surf = (self.trace_op.T @ self.K_surf_bnd @ self.trace_op).tocsr()
        self.K = (self.K_bulk + self.K_surf).tocsr()

    def _build_masks(self):
        cfg = self.config

        def ring(interval, r):
            lo, hi = interval
            return (r > lo) & (r < hi)

        self.omega = ring(cfg.omega, self.node_r)
        self.omega_prime = ring(cfg.omega_prime, self.node_r)
        self.omega_second = ring(cfg.omega_second, self.node_r)
        self.observation = ring(cfg.observation, self.node_r)
        g = np.zeros(self.n_bnd, dtype=bool)
        circle = np.repeat([0, 1], self.nth)
        for name, lo, hi in cfg.g_arcs:
            c = CIRCLES.index(name)
            d = np.mod(self.sedge_theta - lo, TWO_PI)
            width = hi - lo
            inside = (d <= width) if width < TWO_PI else np.ones_like(d, dtype=bool)
            g |= inside & (circle == c)
        self.g_edges = g
        for mask in (self.omega, self.omega_second, self.observation):
            if not mask.any():
                raise ConfigError("a control/observation ring contains no grid node; refine the mesh")
        self.K_G_bnd = (self.tgrad.T @ sp.diags(self.w_sedge * g) @ self.tgrad).tocsr()
        self.K_G = (self.trace_op.T @ self.K_G_bnd @ self.trace_op).tocsr()

    # ------------------------------------------------------------------
    # field plumbing
    def trace(self, u):
        u = np.asarray(u, dtype=float)
        return u[..., self.bnd_nodes]

    def combine(self, bulk, boundary=None):
        """Node representative ``M^{-1}(W_Omega f + W_Gamma f_Gamma)`` of a source pair.

        Bulk and boundary sources need not be trace compatible; at a boundary
        node the two equations are blended with their quadrature weights.
        """
        bulk = np.asarray(bulk, dtype=float)
        out = bulk * self.w_bulk
        if boundary is not None:
            out = out.copy()
            out[..., self.bnd_nodes] += np.asarray(boundary, dtype=float) * self.w_bnd
        return out / self.mass

    def dual(self, bulk, boundary=None):
        """``W_Omega f + W_Gamma f_Gamma`` (load vector of a source pair)."""
        return self.combine(bulk, boundary) * self.mass

    def node_inner(self, u, v):
        """``(u, v)_{L^2}`` for trace-compatible node fields (last axis)."""
        return np.sum(np.asarray(u) * np.asarray(v) * self.mass, axis=-1)

    def node_norm(self, u):
        return np.sqrt(np.maximum(self.node_inner(u, u), 0.0))

    def bulk_inner(self, u, v):
        return np.sum(np.asarray(u) * np.asarray(v) * self.w_bulk, axis=-1)

    def boundary_inner(self, u, v):
        return np.sum(np.asarray(u) * np.asarray(v) * self.w_bnd, axis=-1)

    def gradient_inner(self, u, v):
        """Discrete ``int_Omega grad u . grad v``."""
        return np.sum(_apply(self.grad, u) * _apply(self.grad, v) * self.w_edge, axis=-1)

    def tangential_inner(self, u_b, v_b, masked=False):
        w = self.w_sedge * self.g_edges if masked else self.w_sedge
        return np.sum(_apply(self.tgrad, u_b) * _apply(self.tgrad, v_b) * w, axis=-1)

    # ------------------------------------------------------------------
    # operators
    def bulk_laplacian(self, u, flux="trace"):
        """Polar five-point Laplacian of a node field.

        Interior rows are ``-(G^T W G u)/w``, i.e. the usual stencil
        ``u_rr + u_r/r + u_thth/r^2`` in divergence form reading the trace
        values on boundary-adjacent rows.  On the boundary rows themselves
        ``flux="trace"`` uses a one-sided second-order stencil in ``r`` while
        ``flux="neumann"`` keeps the divergence form (homogeneous flux), which
        is the self-adjoint variant.
        """
        u = np.asarray(u, dtype=float)
        lap = -_apply(self.K_bulk, u) / self.w_bulk
        if flux == "neumann":
            return lap
        if flux != "trace":
            raise ValueError(f"unknown flux convention {flux!r}")
        lap = lap.copy()
        for i0, s in ((0, 1), (self.nr, -1)):
            rows = [u[..., (i0 + k * s) * self.nth:(i0 + k * s + 1) * self.nth] for k in range(4)]
            u0, u1, u2, u3 = rows
            ur = s * (-3.0 * u0 + 4.0 * u1 - u2) / (2.0 * self.dr)
            urr = (2.0 * u0 - 5.0 * u1 + 4.0 * u2 - u3) / self.dr**2
            R = self.r[i0]
            uthth = (np.roll(u0, -1, axis=-1) - 2.0 * u0 + np.roll(u0, 1, axis=-1)) / self.dth**2
            lap[..., i0 * self.nth:(i0 + 1) * self.nth] = urr + ur / R + uthth / R**2
        return lap

    def normal_derivative(self, u):
        """Outward normal derivative on both circles (boundary array).

        Defined through the Green identity from the same gradient and
        quadrature as :meth:`bulk_laplacian`; on smooth fields it is a
        one-sided second-order difference in ``r`` (``-e_r`` at ``R0``,
        ``+e_r`` at ``R1``).
        """
        u = np.asarray(u, dtype=float)
        flux = self.trace(_apply(self.K_bulk, u))
        lap_b = self.trace(self.bulk_laplacian(u))
        return (flux + self.trace(self.w_bulk) * lap_b) / self.w_bnd

    def laplace_beltrami(self, u_b):
        """``(1/R^2) * periodic second difference / dth^2`` on each circle."""
        return -_apply(self.K_surf_bnd, u_b) / self.w_bnd

    def tangential_gradient(self, u_b, kind="edge"):
        """Tangential derivative ``(1/R) d/dtheta`` on each circle.

        ``kind="edge"`` returns forward differences located at the arc
        midpoints (edge ``b`` joins nodes ``b`` and ``b+1``); this is the
        gradient for which ``Delta_Gamma = -D^T W D / w`` holds exactly.
        ``kind="centered"`` returns node-located centred differences.
        """
        if kind == "edge":
            return _apply(self.tgrad, u_b)
        if kind != "centered":
            raise ValueError(f"unknown kind {kind!r}")
        u_b = np.asarray(u_b, dtype=float)
        shape = u_b.shape[:-1] + (2, self.nth)
        v = u_b.reshape(shape)
        d = (np.roll(v, -1, axis=-1) - np.roll(v, 1, axis=-1)) / (2.0 * self.dth)
        return (d / np.array([self.R0, self.R1])[:, None]).reshape(u_b.shape)

    def masked_surface_divergence(self, u_b):
        """``div_Gamma(1_G grad_Gamma u)`` as ``-D^T diag(1_G) W D u / w``."""
        return -_apply(self.K_G_bnd, u_b) / self.w_bnd

    def coupling(self, u):
        """Node form of the sentinel operator ``B u = 1_O u - div_Gamma(1_G grad_Gamma u)``.

        ``M B`` is symmetric positive semidefinite and
        ``(u, B u)_{L^2} = int_O u^2 + int_G |grad_Gamma u|^2``.
        """
        u = np.asarray(u, dtype=float)
        return (u * self.w_bulk * self.observation + _apply(self.K_G, u)) / self.mass

    @cached_property
    def coupling_matrix(self):
        """Sparse ``M B`` (symmetric)."""
        return (sp.diags(self.w_bulk * self.observation) + self.K_G).tocsr()

    # ------------------------------------------------------------------
    def pair(self, bulk, boundary=None):
        bulk = np.asarray(bulk, dtype=float)
        if boundary is None:
            boundary = self.trace(bulk)
        return StatePair(bulk, np.asarray(boundary, dtype=float), self)

    def inner_product_L2(self, a: StatePair, b: StatePair):
        for x in (a, b):
            if x.mesh is not None and x.mesh is not self:
                raise MeshMismatchError("state pair belongs to a different mesh")
        return inner_product_L2(a, b)


@dataclass
class StatePair:
    """Bulk field on the closed annulus (node vector) plus boundary field."""

    bulk: np.ndarray
    boundary: np.ndarray
    mesh: Mesh | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.bulk = np.asarray(self.bulk, dtype=float)
        self.boundary = np.asarray(self.boundary, dtype=float)
        if self.mesh is not None and (
                self.bulk.shape[-1] != self.mesh.n_nodes or self.boundary.shape[-1] != self.mesh.n_bnd):
            raise MeshMismatchError("field sizes do not match the mesh")

    def trace_gap(self):
        return float(np.max(np.abs(self.mesh.trace(self.bulk) - self.boundary), initial=0.0))

    def is_trace_compatible(self, tol=0.0):
        return self.trace_gap() <= tol

    def nodes(self):
        """Node vector of a trace-compatible pair."""
        if not self.is_trace_compatible(1e-12 * (1.0 + np.max(np.abs(self.bulk), initial=0.0))):
            raise ValueError("state pair is not trace compatible")
        return self.bulk

    def __add__(self, other):
        return StatePair(self.bulk + other.bulk, self.boundary + other.boundary, self.mesh)

    def __mul__(self, c):
        return StatePair(c * self.bulk, c * self.boundary, self.mesh)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0


def inner_product_L2(a: StatePair, b: StatePair) -> float:
    """``int_Omega a b dx + int_Gamma a_G b_G dS``."""
    if a.mesh is not b.mesh:
        raise MeshMismatchError("state pairs live on different meshes")
    m = a.mesh
    return float(m.bulk_inner(a.bulk, b.bulk) + m.boundary_inner(a.boundary, b.boundary))
