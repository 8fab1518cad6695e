"""Backward-Euler solvers for the bulk/boundary heat system and its cascade.

A state at time ``t_n`` is a node vector (see :mod:`geometry`).  One step of
the forward problem solves the monolithic symmetric system

    E_n y^n = (M/dt) y^{n-1} + W_Omega h^n + W_Gamma h_Gamma^n,
    E_n = M/dt + K + diag(W_Omega R^n + W_Gamma R_Gamma^n),

so the boundary equation (normal flux, surface diffusion, dynamic term) is
carried implicitly by the boundary rows.  The backward problem uses the
transpose of the same map:

    E_m z^{m-1} = (M/dt) z^m + W_Omega g^m + W_Gamma g_Gamma^m,

which gives the summation-by-parts identity

    sum_n dt <(Ly)^n, phi^{n-1}> = sum_m dt <y^m, (L*phi)^m>
                                   - <y^0, phi^0> + <y^N, phi^N>

exactly.  Time series (sources, potentials, controls) are stored with one
row per time node ``0..Nt``; step ``n`` reads row ``n`` and row 0 of a source
is never used.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import LinearSolveError, MeshMismatchError
from .geometry import Mesh, StatePair, _apply


@dataclass(frozen=True)
class PotentialPair:
    """Zeroth-order coefficients ``(R, R_Gamma)``.

    Each array is either time-constant (shape ``(n,)``) or sampled on the time
    nodes (shape ``(Nt+1, n)``).
    """

    R: np.ndarray
    R_gamma: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        Rg = np.asarray(self.R_gamma, dtype=float)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(Rg))):
            raise ValueError("potentials must be finite")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "R_gamma", Rg)

    @classmethod
    def zero(cls, mesh: Mesh):
        return cls(np.zeros(mesh.n_nodes), np.zeros(mesh.n_bnd))

    @classmethod
    def constant(cls, mesh: Mesh, r=0.0, r_gamma=0.0):
        return cls(np.full(mesh.n_nodes, float(r)), np.full(mesh.n_bnd, float(r_gamma)))

    @property
    def is_constant(self):
        return self.R.ndim == 1 and self.R_gamma.ndim == 1

    def reaction(self, mesh: Mesh, n=None):
        """Diagonal of ``W_Omega R + W_Gamma R_Gamma`` at time node ``n``."""
        if self.R.shape[-1] != mesh.n_nodes or self.R_gamma.shape[-1] != mesh.n_bnd:
            raise MeshMismatchError("potential sizes do not match the mesh")
        R = self.R if self.R.ndim == 1 else self.R[n]
        Rg = self.R_gamma if self.R_gamma.ndim == 1 else self.R_gamma[n]
        return mesh.dual(R, Rg)

    def reaction_series(self, mesh: Mesh, time_steps):
        if self.is_constant:
            return np.broadcast_to(self.reaction(mesh), (time_steps + 1, mesh.n_nodes))
        return np.stack([self.reaction(mesh, n) for n in range(time_steps + 1)])


class StepOperator:
    """``E_n`` for a fixed mesh, time step and potential, with an LU cache.

    A new instance should be created per solve; the cache holds one
    factorization for time-constant potentials and one per time node
    otherwise.
    """

    def __init__(self, mesh: Mesh, dt, potentials: PotentialPair | None = None, extra=None):
        if not dt > 0:
            raise LinearSolveError(f"time step must be positive, got {dt}")
        self.mesh = mesh
        self.dt = float(dt)
        self.potentials = potentials if potentials is not None else PotentialPair.zero(mesh)
        self.base = (sp.diags(mesh.mass / self.dt) + mesh.K).tocsc()
        # optional extra diagonal per time node (linearised reaction terms)
        self.extra = extra
        self._lu = {}

    def diagonal(self, n):
        d = self.potentials.reaction(self.mesh, n)
        if self.extra is not None:
            d = d + self.extra[n]
        return d

    def matrix(self, n):
        return (self.base + sp.diags(self.diagonal(n))).tocsc()

    def apply(self, n, u):
        return self.base @ u + self.diagonal(n) * u

    def solve(self, n, rhs):
        key = "const" if (self.potentials.is_constant and self.extra is None) else n
        lu = self._lu.get(key)
        if lu is None:
            try:
                lu = splu(self.matrix(n))
            except RuntimeError as exc:
                raise LinearSolveError(f"step matrix is singular at time node {n}: {exc}") from exc
            self._lu[key] = lu
        x = lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise LinearSolveError(f"non-finite solution at time node {n}")
        return x


@dataclass
class Trajectory:
    """Node vectors on the uniform time grid, shape ``(Nt+1, n_nodes)``."""

    nodes: np.ndarray
    dt: float
    mesh: Mesh = field(repr=False)
    energy: dict | None = None

    @property
    def time_steps(self):
        return self.nodes.shape[0] - 1

    @property
    def times(self):
        return self.dt * np.arange(self.nodes.shape[0])

    @property
    def bulk(self):
        return self.nodes

    @property
    def boundary(self):
        return self.mesh.trace(self.nodes)

    def state(self, n) -> StatePair:
        return self.mesh.pair(self.nodes[n])

    def norms(self):
        """``||(y, y_Gamma)(t_n)||`` in ``L^2(Omega) x L^2(Gamma)`` for every n."""
        return self.mesh.node_norm(self.nodes)

    def l2_norm(self):
        """Right-endpoint ``L^2(0,T; L^2 x L^2)`` norm over ``t_1..t_N``."""
        return float(np.sqrt(self.dt * np.sum(self.mesh.node_inner(self.nodes[1:], self.nodes[1:]))))

    def is_finite(self):
        return bool(np.all(np.isfinite(self.nodes)))


@dataclass
class ControlField:
    """Distributed control on the omega nodes, one row per time node.

    Row ``n`` drives step ``n``; row 0 and every node outside omega are zero.
    """

    values: np.ndarray
    mesh: Mesh = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        v[0] = 0.0
        v[:, ~self.mesh.omega] = 0.0
        self.values = v

    @classmethod
    def zero(cls, mesh: Mesh, time_steps):
        return cls(np.zeros((time_steps + 1, mesh.n_nodes)), mesh)

    def support_ok(self):
        outside = self.values[:, ~self.mesh.omega]
        return bool(np.all(outside == 0.0) and np.all(self.values[0] == 0.0))

    def load(self):
        return self.values * self.mesh.w_bulk

    def l2_norm(self, dt):
        return float(np.sqrt(dt * np.sum(self.mesh.bulk_inner(self.values[1:], self.values[1:]))))


@dataclass
class CascadeTrajectory:
    y: Trajectory
    z: Trajectory
    control: ControlField | None = None
    sources: dict = field(default_factory=dict)

    def z0_norm(self):
        return float(self.z.norms()[0])


def source_load(mesh: Mesh, src, time_steps):
    """Load vectors ``W_Omega f + W_Gamma f_Gamma`` for a source series.

    ``src`` may be ``None`` (zero), a :class:`StatePair` with batch shape
    ``(Nt+1, .)`` or a raw load array of shape ``(Nt+1, n_nodes)``.
    """
    shape = (time_steps + 1, mesh.n_nodes)
    if src is None:
        return np.zeros(shape)
    if isinstance(src, StatePair):
        if src.mesh is not None and src.mesh is not mesh:
            raise MeshMismatchError("source belongs to a different mesh")
        load = mesh.dual(np.broadcast_to(src.bulk, shape), np.broadcast_to(src.boundary, (shape[0], mesh.n_bnd)))
    else:
        load = np.asarray(src, dtype=float)
    if load.shape != shape:
        raise MeshMismatchError(f"source lattice {load.shape} does not match {shape}")
    return load


def initial_nodes(mesh: Mesh, state):
    """Node representative of an initial pair (bulk and boundary may differ)."""
    if state is None:
        return np.zeros(mesh.n_nodes)
    if isinstance(state, StatePair):
        return mesh.combine(state.bulk, state.boundary)
    u = np.asarray(state, dtype=float)
    if u.shape != (mesh.n_nodes,):
        raise MeshMismatchError("initial data does not match the mesh")
    return u


def step_forward(state: StatePair, sources: StatePair | None, potentials: PotentialPair | None, dt, level=1):
    """One backward-Euler step; potentials and sources are read at ``level``."""
    mesh = state.mesh
    op = StepOperator(mesh, dt, potentials)
    rhs = mesh.mass / dt * initial_nodes(mesh, state)
    if sources is not None:
        rhs = rhs + mesh.dual(sources.bulk, sources.boundary)
    return mesh.pair(op.solve(level, rhs))


def _march_forward(op: StepOperator, y0, load, time_steps):
    mesh = op.mesh
    out = np.empty((time_steps + 1, mesh.n_nodes))
    out[0] = y0
    md = mesh.mass / op.dt
    for n in range(1, time_steps + 1):
        out[n] = op.solve(n, md * out[n - 1] + load[n])
    return out


def _march_backward(op: StepOperator, zT, load, time_steps):
    mesh = op.mesh
    out = np.empty((time_steps + 1, mesh.n_nodes))
    out[time_steps] = zT
    md = mesh.mass / op.dt
    for m in range(time_steps, 0, -1):
        out[m - 1] = op.solve(m, md * out[m] + load[m])
    return out


def energy_report(traj: Trajectory, load):
    """Discrete energy estimate ``|y^n|^2 <= C (|y^0|^2 + sum dt |h|^2)``.

    ``C_mesh`` is the smallest constant that works for this run; for
    nonnegative potentials the scheme guarantees ``C_mesh <= 1 + T``.
    """
    mesh = traj.mesh
    norms2 = traj.norms() ** 2
    h = load / mesh.mass
    src2 = traj.dt * np.cumsum(mesh.node_inner(h, h) * (np.arange(h.shape[0]) > 0))
    denom = norms2[0] + src2
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(denom > 0, norms2 / denom, 0.0)
    return {
        "max_norm": float(np.sqrt(norms2.max())),
        "C_mesh": float(ratio.max()),
        "guaranteed": float(1.0 + traj.dt * traj.time_steps),
        "monotone": bool(np.all(np.diff(norms2) <= 1e-14 * max(norms2.max(), 1e-300))),
    }


def solve_forward(initial, sources, potentials: PotentialPair | None, time_steps, dt, mesh: Mesh | None = None):
    """March the forward system from ``initial`` over ``time_steps`` steps."""
    mesh = mesh or initial.mesh
    op = StepOperator(mesh, dt, potentials)
    load = source_load(mesh, sources, time_steps)
    nodes = _march_forward(op, initial_nodes(mesh, initial), load, time_steps)
    traj = Trajectory(nodes, float(dt), mesh)
    traj.energy = energy_report(traj, load)
    return traj


def solve_backward(terminal, sources, potentials: PotentialPair | None, time_steps, dt, mesh: Mesh | None = None):
    """March the adjoint system from ``t = T`` down to 0 (exact transpose)."""
    mesh = mesh or terminal.mesh
    op = StepOperator(mesh, dt, potentials)
    load = source_load(mesh, sources, time_steps)
    nodes = _march_backward(op, initial_nodes(mesh, terminal), load, time_steps)
    return Trajectory(nodes, float(dt), mesh)


def solve_cascade_linear(y0, control: ControlField | None, f0=None, f1=None, potentials=None,
                         time_steps=None, dt=None, mesh: Mesh | None = None):
    """Forward ``y`` with source ``f0 + 1_omega v``, then backward ``z``.

    The ``z`` source is ``f1 + B y`` where ``M B`` is the symmetric
    coupling (``1_O`` in the bulk, masked surface diffusion on ``G``); the
    terminal data are zero.
    """
    mesh = mesh or (y0.mesh if isinstance(y0, StatePair) else None)
    if mesh is None or time_steps is None or dt is None:
        raise ValueError("mesh, time_steps and dt are required")
    op = StepOperator(mesh, dt, potentials)
    load0 = source_load(mesh, f0, time_steps)
    if control is not None:
        if control.values.shape != load0.shape:
            raise MeshMismatchError("control lattice does not match")
        load0 = load0 + control.load()
    y = _march_forward(op, initial_nodes(mesh, y0), load0, time_steps)
    load1 = source_load(mesh, f1, time_steps) + _apply(mesh.coupling_matrix, y)
    z = _march_backward(op, np.zeros(mesh.n_nodes), load1, time_steps)
    yt = Trajectory(y, float(dt), mesh)
    yt.energy = energy_report(yt, load0)
    return CascadeTrajectory(yt, Trajectory(z, float(dt), mesh), control, {"f0": f0, "f1": f1})


# ----------------------------------------------------------------------
# discrete residual operators (node form), used by the control module and
# by residual oracles


def forward_residual(op: StepOperator, y):
    """``(L y)^n = M^{-1}(E_n y^n - (M/dt) y^{n-1})`` for ``n = 1..Nt`` (row 0 = 0)."""
    mesh = op.mesh
    out = np.zeros_like(y)
    Ey = _apply(op.base, y[1:]) + _diag_series(op, y.shape[0] - 1)[1:] * y[1:]
    out[1:] = (Ey - mesh.mass / op.dt * y[:-1]) / mesh.mass
    return out


def backward_residual(op: StepOperator, z):
    """``(L* z)^m = M^{-1}(E_m z^{m-1} - (M/dt) z^m)`` for ``m = 1..Nt`` (row 0 = 0)."""
    mesh = op.mesh
    out = np.zeros_like(z)
    Ez = _apply(op.base, z[:-1]) + _diag_series(op, z.shape[0] - 1)[1:] * z[:-1]
    out[1:] = (Ez - mesh.mass / op.dt * z[1:]) / mesh.mass
    return out


def _diag_series(op: StepOperator, time_steps):
    return np.stack([op.diagonal(n) for n in range(time_steps + 1)])
