"""Sentinel functional and insensitivity checks.

The sentinel of a state trajectory is

    Phi(y) = 1/2 int_0^T int_O |y|^2 + 1/2 int_0^T int_G |grad_Gamma y_Gamma|^2
           = 1/2 sum_{n=1}^{N} dt  y^n . (M B) y^n

with the coupling matrix ``M B`` of :mod:`geometry` and the right-endpoint
time rule.  For initial data ``y(0) = tau_1 yt + tau_2 yt_Gamma`` (blended
at boundary nodes) the discrete chain rule gives

    dPhi/dtau_1 = (z^0, yt)_Omega,   dPhi/dtau_2 = (z^0, yt_Gamma)_Gamma

exactly, where ``z`` is the adjoint state of the cascade driven by
``(M B) y``.  A control insensitizes ``Phi`` when ``z^0 = 0``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MeshMismatchError
from .geometry import Mesh, StatePair, _apply
from .nonlinear import NonlinearityParams, fixed_point_solve
from .solvers import ControlField, PotentialPair, StepOperator, Trajectory

SENTINEL_RULES = ("right", "trapezoid")
UNIT_TOL = 1e-12


@dataclass
class Perturbation:
    """Unit-norm initial perturbation ``(yt, yt_Gamma)``."""

    state: StatePair
    label: str = ""
    seed: int | None = None

    def __post_init__(self):
        norm = self.norm()
        if abs(norm - 1.0) > UNIT_TOL:
            raise ConfigError(f"perturbation {self.label!r} has norm {norm:.16g}, expected 1")

    def norm(self):
        m = self.state.mesh
        return float(np.sqrt(m.bulk_inner(self.state.bulk, self.state.bulk)
                             + m.boundary_inner(self.state.boundary, self.state.boundary)))

    @classmethod
    def normalized(cls, mesh: Mesh, bulk, boundary, label="", seed=None):
        bulk = np.asarray(bulk, dtype=float)
        boundary = np.asarray(boundary, dtype=float)
        n = np.sqrt(mesh.bulk_inner(bulk, bulk) + mesh.boundary_inner(boundary, boundary))
        if not n > 0:
            raise ConfigError("cannot normalise a zero perturbation")
        return cls(StatePair(bulk / n, boundary / n, mesh), label, seed)

    def __neg__(self):
        return Perturbation(-self.state, f"-{self.label}", self.seed)

    def initial(self, tau1, tau2):
        """Node initial datum for ``(tau_1 yt, tau_2 yt_Gamma)``."""
        return self.state.mesh.combine(tau1 * self.state.bulk, tau2 * self.state.boundary)


def make_perturbations(mesh: Mesh, count=10, seed=0, dt=0.01):
    """Seeded random fields plus a radial bump and a boundary Fourier mode.

    The random fields are smoothed by one implicit diffusion step of size
    ``dt``.  With ``count >= 3`` the last two members are the structured
    ones; all members have unit norm.
    """
    if count < 1:
        raise ConfigError(f"perturbation count must be >= 1, got {count}")
    n_random = count - 2 if count >= 3 else count
    op = StepOperator(mesh, dt, None)
    md = mesh.mass / dt
    out = []
    for k, ss in enumerate(np.random.SeedSequence(seed).spawn(n_random)):
        rng = np.random.default_rng(ss)
        bulk = op.solve(1, md * rng.standard_normal(mesh.n_nodes))
        bnd = mesh.trace(op.solve(1, md * rng.standard_normal(mesh.n_nodes)))
        out.append(Perturbation.normalized(mesh, bulk, bnd, f"random-{k}", seed))
    if count >= 3:
        x = (mesh.node_r - mesh.R0) / (mesh.R1 - mesh.R0)
        out.append(Perturbation.normalized(mesh, np.sin(np.pi * x), np.zeros(mesh.n_bnd), "radial-bump"))
        th = mesh.node_theta[mesh.bnd_nodes]
        outer = np.repeat([0.0, 1.0], mesh.nth)
        out.append(Perturbation.normalized(mesh, np.zeros(mesh.n_nodes), outer * np.cos(2.0 * th),
                                           "boundary-mode-2"))
    return out


def evaluate_sentinel(y_traj, mesh: Mesh | None = None, dt=None, rule="right"):
    """``Phi`` of a :class:`Trajectory` (or node array with ``dt``).

    ``rule="right"`` sums ``n = 1..N`` (the rule for which the adjoint
    pairing is exact); ``rule="trapezoid"`` halves the two endpoint rows.
    """
    if isinstance(y_traj, Trajectory):
        mesh = mesh or y_traj.mesh
        if mesh is not y_traj.mesh:
            raise MeshMismatchError("trajectory belongs to a different mesh")
        y, dt = y_traj.nodes, y_traj.dt
    else:
        if mesh is None or dt is None:
            raise ValueError("mesh and dt are required for raw node arrays")
        y = np.asarray(y_traj, dtype=float)
    if y.shape[-1] != mesh.n_nodes:
        raise MeshMismatchError("trajectory does not match the mesh")
    if rule not in SENTINEL_RULES:
        raise ConfigError(f"unknown sentinel rule {rule!r}; choose from {SENTINEL_RULES}")
    dens = np.sum(y * _apply(mesh.coupling_matrix, y), axis=-1)
    w = np.full(y.shape[0], float(dt))
    if rule == "right":
        w[0] = 0.0
    else:
        w[[0, -1]] *= 0.5
    return float(0.5 * np.sum(w * dens))


@dataclass
class PerturbationRow:
    label: str
    d1_fd: float
    d2_fd: float
    d1_dual: float
    d2_dual: float
    base_d1_fd: float
    base_d2_fd: float
    base_d1_dual: float
    base_d2_dual: float

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class SentinelReport:
    phi: float
    phi_baseline: float
    tau: float
    z0_norm: float
    z0_norm_baseline: float
    rows: list = field(default_factory=list)

    @property
    def max_derivative(self):
        return max((max(abs(r.d1_fd), abs(r.d2_fd)) for r in self.rows), default=0.0)

    @property
    def baseline_max_derivative(self):
        return max((max(abs(r.base_d1_fd), abs(r.base_d2_fd)) for r in self.rows), default=0.0)

    @property
    def reduction(self):
        """Baseline over controlled derivative statistic (``inf`` when the latter is 0)."""
        m = self.max_derivative
        return float(self.baseline_max_derivative / m) if m > 0 else float("inf")

    def as_dict(self):
        return {
            "phi": self.phi,
            "phi_baseline": self.phi_baseline,
            "tau": self.tau,
            "z0_norm": self.z0_norm,
            "z0_norm_baseline": self.z0_norm_baseline,
            "max_derivative": self.max_derivative,
            "baseline_max_derivative": self.baseline_max_derivative,
            "reduction": self.reduction,
            "perturbations": [r.as_dict() for r in self.rows],
        }


class _SentinelProblem:
    """State solves for one control and source at fixed discretisation."""

    def __init__(self, mesh, control, f0, params, potentials, time_steps, dt, linear):
        self.mesh, self.control, self.f0 = mesh, control, f0
        self.params, self.potentials = params, potentials
        self.N, self.dt, self.linear = int(time_steps), float(dt), linear

    def _solve(self, y0, cascade):
        return fixed_point_solve(y0, self.control, self.f0, None, self.params, self.potentials, self.N, self.dt,
                                 self.mesh, cascade=cascade, linear=self.linear)

    def phi(self, y0):
        res = self._solve(y0, cascade=False)
        return evaluate_sentinel(res.cascade.y)

    def z0(self):
        res = self._solve(np.zeros(self.mesh.n_nodes), cascade=True)
        return res.cascade.z.nodes[0], evaluate_sentinel(res.cascade.y)

    def derivatives(self, pert: Perturbation, tau):
        d = []
        for a, b in ((1.0, 0.0), (0.0, 1.0)):
            plus = self.phi(pert.initial(a * tau, b * tau))
            minus = self.phi(pert.initial(-a * tau, -b * tau))
            d.append((plus - minus) / (2.0 * tau))
        return d


def dual_pairing(z0, pert: Perturbation):
    """``((z^0, yt)_Omega, (z^0, yt_Gamma)_Gamma)``."""
    m = pert.state.mesh
    return float(m.bulk_inner(z0, pert.state.bulk)), float(m.boundary_inner(m.trace(z0), pert.state.boundary))


def insensitivity_check(control: ControlField | None, f0, perturbations, tau, params: NonlinearityParams | None = None,
                        mesh: Mesh | None = None, time_steps=None, dt=None,
                        potentials: PotentialPair | None = None, linear=False, threads=1,
                        baseline=True) -> SentinelReport:
    """Central-difference and dual derivatives of ``Phi`` with and without control.

    The state starts from zero initial data; each perturbation is applied
    to the bulk (``tau_1``) and to the boundary (``tau_2``) separately.
    The baseline columns repeat everything with ``v = 0``.
    """
    if mesh is None or time_steps is None or dt is None:
        raise ValueError("mesh, time_steps and dt are required")
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    params = params or NonlinearityParams(fixed_point_tol=1e-14)
    ctrl = _SentinelProblem(mesh, control, f0, params, potentials, time_steps, dt, linear)
    base = _SentinelProblem(mesh, None, f0, params, potentials, time_steps, dt, linear) if baseline else None
    z0, phi0 = ctrl.z0()
    if base is not None:
        z0b, phib = base.z0()
    else:
        z0b, phib = np.zeros_like(z0), float("nan")

    def one(pert):
        d1, d2 = ctrl.derivatives(pert, tau)
        p1, p2 = dual_pairing(z0, pert)
        if base is not None:
            b1, b2 = base.derivatives(pert, tau)
            q1, q2 = dual_pairing(z0b, pert)
        else:
            b1 = b2 = q1 = q2 = float("nan")
        return PerturbationRow(pert.label, d1, d2, p1, p2, b1, b2, q1, q2)

    workers = max(1, int(threads))
    if workers == 1:
        rows = [one(p) for p in perturbations]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, perturbations))
    return SentinelReport(
        phi=phi0, phi_baseline=phib, tau=float(tau),
        z0_norm=float(mesh.node_norm(z0)), z0_norm_baseline=float(mesh.node_norm(z0b)), rows=rows,
    )


def quadratic_scaling_check(perturbations, taus=(0.5, 2.0), mesh: Mesh | None = None, time_steps=None, dt=None,
                            potentials: PotentialPair | None = None):
    """Max relative gap ``|Phi(tau p) - tau^2 Phi(p)| / (tau^2 Phi(p))`` for the linear system with ``v = 0``, ``f = 0``."""
    prob = _SentinelProblem(mesh, None, None, NonlinearityParams(), potentials, time_steps, dt, linear=True)
    worst = 0.0
    for pert in perturbations:
        ref = prob.phi(pert.initial(1.0, 1.0))
        for tau in taus:
            val = prob.phi(pert.initial(tau, tau))
            worst = max(worst, abs(val - tau**2 * ref) / (tau**2 * ref))
    return float(worst)


def derivative_convergence(pert: Perturbation, taus, control: ControlField | None = None, f0=None,
                           params: NonlinearityParams | None = None, mesh: Mesh | None = None, time_steps=None,
                           dt=None, potentials: PotentialPair | None = None, linear=False):
    """Gaps between central differences and the dual pairing for a list of ``tau``.

    Returns ``(gaps, pairing)`` where ``gaps[k]`` is the absolute gap of the
    combined derivative ``dPhi/dtau_1 + dPhi/dtau_2`` at ``taus[k]``.
    """
    params = params or NonlinearityParams(fixed_point_tol=1e-14)
    prob = _SentinelProblem(mesh, control, f0, params, potentials, time_steps, dt, linear)
    z0, _ = prob.z0()
    pairing = sum(dual_pairing(z0, pert))
    gaps = []
    for tau in taus:
        plus = prob.phi(pert.initial(tau, tau))
        minus = prob.phi(pert.initial(-tau, -tau))
        gaps.append(abs((plus - minus) / (2.0 * tau) - pairing))
    return np.array(gaps), float(pairing)
