"""Power nonlinearities and the Picard solver for the semilinear cascade.

The discrete semilinear state is fully implicit,

    E_n y^n + N(y^n) = (M/dt) y^{n-1} + load_0^n,

with the lumped reaction load ``N(u) = W_Omega |u|^{p-1} u + W_Gamma |u|^{q-1} u``
(bulk exponent ``p``, boundary exponent ``q``).  The adjoint state of the
cascade uses the derivative of that load at the same time level,

    (E_m + N'(y^m)) z^{m-1} = (M/dt) z^m + load_1^m + (M B) y^m,

so the chain rule and summation by parts remain exact at the discrete
level.  :func:`fixed_point_solve` iterates the frozen-coefficient map: given
``(u, w)`` it solves the linear cascade with ``-N(u)`` and ``-N'(u) w``
moved to the right-hand side.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    FixedPointDivergence,
    FixedPointMaxIterations,
    LinearSolveError,
    MeshMismatchError,
)
from .geometry import Mesh, StatePair, _apply
from .solvers import (
    CascadeTrajectory,
    ControlField,
    PotentialPair,
    StepOperator,
    Trajectory,
    _march_backward,
    _march_forward,
    energy_report,
    initial_nodes,
    source_load,
)
from .weights import check_exponents

DIVERGENCE_STREAK = 3


@dataclass(frozen=True)
class NonlinearityParams:
    """Exponents and Picard controls.

    ``window`` selects the admissible exponent range: ``H2-d3`` (default,
    5/2 < p, q <= 4), ``H2-d2`` (no upper bound) or the wider ``A2-d3`` /
    ``A2-d2`` windows (9/4 <= p, q) reserved for standalone runs.
    """

    p: float = 3.0
    q: float = 3.0
    fixed_point_tol: float = 1e-10
    max_iterations: int = 50
    window: str = "H2-d3"

    def __post_init__(self):
        check_exponents(self.p, self.q, self.window)
        if not self.fixed_point_tol > 0:
            raise ConfigError(f"fixed_point_tol must be positive, got {self.fixed_point_tol}")
        if int(self.max_iterations) != self.max_iterations or self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be a positive integer, got {self.max_iterations}")


def _power(u, e):
    u = np.asarray(u, dtype=float)
    return np.abs(u) ** (e - 1.0) * u


def _power_slope(u, e, form):
    u = np.asarray(u, dtype=float)
    if form == "derivative":
        return e * np.abs(u) ** (e - 1.0)
    if form == "odd":
        # e |u|^{e-2} u, set to 0 at u = 0 (continuous for e > 2)
        a = np.abs(u)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = e * np.where(a > 0, a ** (e - 2.0) * u, 0.0)
        return out
    raise ConfigError(f"unknown linearisation form {form!r}; use 'derivative' or 'odd'")


def apply_nonlinearity(u: StatePair, p, q) -> StatePair:
    """Pointwise ``|u|^{p-1} u`` in the bulk and ``|u_G|^{q-1} u_G`` on the boundary."""
    return StatePair(_power(u.bulk, p), _power(u.boundary, q), u.mesh)


def apply_linearized(u: StatePair, w: StatePair, p, q, form="derivative") -> StatePair:
    """Linearised reaction ``N'(u) w``.

    ``form="derivative"`` uses the derivative ``p |u|^{p-1}`` of the power
    map (the coefficient that makes the cascade adjoint to the linearised
    state).  ``form="odd"`` uses ``p |u|^{p-2} u``, which agrees with it for
    ``u >= 0`` and flips sign for ``u < 0``.
    """
    return StatePair(_power_slope(u.bulk, p, form) * w.bulk,
                     _power_slope(u.boundary, q, form) * w.boundary, u.mesh)


def reaction_load(mesh: Mesh, u, p, q):
    """Lumped load ``W_Omega |u|^{p-1}u + W_Gamma |u_G|^{q-1}u_G`` of node fields (last axis)."""
    u = np.asarray(u, dtype=float)
    out = mesh.w_bulk * _power(u, p)
    out[..., mesh.bnd_nodes] += mesh.w_bnd * _power(u[..., mesh.bnd_nodes], q)
    return out


def reaction_slope(mesh: Mesh, u, p, q, form="derivative"):
    """Diagonal of the lumped linearised load (same shape as ``u``)."""
    u = np.asarray(u, dtype=float)
    out = mesh.w_bulk * _power_slope(u, p, form)
    out[..., mesh.bnd_nodes] += mesh.w_bnd * _power_slope(u[..., mesh.bnd_nodes], q, form)
    return out


@dataclass
class FixedPointResult:
    cascade: CascadeTrajectory
    iterations: int
    converged: bool
    changes: list = field(default_factory=list)      # relative change per iterate
    ratios: list = field(default_factory=list)       # changes[k] / changes[k-1]
    residual_y: float = 0.0
    residual_z: float = 0.0
    data_scale: float = 0.0

    @property
    def residual(self):
        return max(self.residual_y, self.residual_z)

    def log_rows(self):
        """``(iteration, change, ratio)`` rows; the first ratio is NaN."""
        rows = []
        for k, c in enumerate(self.changes):
            r = self.ratios[k - 1] if k >= 1 else float("nan")
            rows.append((k + 1, c, r))
        return rows


def _norm_series(mesh: Mesh, dt, u):
    """``L^2(0,T; L^2)`` node norm with the right-endpoint rule."""
    return float(np.sqrt(dt * np.sum(mesh.node_inner(u[1:], u[1:]))))


def nonlinear_residuals(mesh: Mesh, dt, y, z, load0, load1, params: NonlinearityParams,
                        potentials: PotentialPair | None = None, form="derivative", reaction=True,
                        cascade=True):
    """Absolute node-norm residuals of the discrete semilinear cascade.

    ``reaction=False`` checks the linear cascade instead and
    ``cascade=False`` only the state equation.  Returns ``(ry, rz)`` in
    ``L^2(0,T; L^2)`` after dividing the step residuals by the mass, so
    they compare with the data scale.
    """
    N = y.shape[0] - 1
    op = StepOperator(mesh, dt, potentials)
    md = mesh.mass / dt
    p, q = params.p, params.q
    ry = np.zeros_like(y)
    rz = np.zeros_like(z)
    for n in range(1, N + 1):
        ry[n] = op.apply(n, y[n]) - md * y[n - 1] - load0[n]
        slope = 0.0
        if reaction:
            ry[n] += reaction_load(mesh, y[n], p, q)
            slope = reaction_slope(mesh, y[n], p, q, form)
        rz[n] = (op.apply(n, z[n - 1]) + slope * z[n - 1] - md * z[n] - load1[n]
                 - _apply(mesh.coupling_matrix, y[n]))
    ry /= mesh.mass
    rz /= mesh.mass
    if not cascade:
        rz[:] = 0.0
    return _norm_series(mesh, dt, ry), _norm_series(mesh, dt, rz)


def fixed_point_solve(y0, control: ControlField | None, f0=None, f1=None, params: NonlinearityParams | None = None,
                      potentials: PotentialPair | None = None, time_steps=None, dt=None, mesh: Mesh | None = None,
                      initial_iterate=None, cascade=True, form="derivative", linear=False,
                      raise_on_failure=True) -> FixedPointResult:
    """Picard iteration of the frozen-coefficient map for the semilinear cascade.

    Parameters
    ----------
    y0 : StatePair, node array or None
        Initial state (``None`` is zero).
    control : ControlField or None
        Distributed control added to the ``y`` source.
    f0, f1 : sources for ``y`` and ``z`` (see :func:`solvers.source_load`).
    params : NonlinearityParams
    initial_iterate : ``None`` (zero), ``"linear"`` (solution with the
        reaction switched off) or an ``(y, z)`` pair of node arrays.
    cascade : when False only the state ``y`` is iterated and ``z = 0``.
    linear : switch the reaction off (one linear cascade solve).

    Returns
    -------
    FixedPointResult
        The converged cascade, relative changes and contraction ratios, and
        the direct-substitution residuals.

    Raises
    ------
    FixedPointDivergence
        The contraction ratio stayed >= 1 for three consecutive iterations.
    FixedPointMaxIterations
        ``params.max_iterations`` reached before the tolerance.
    """
    params = params or NonlinearityParams()
    mesh = mesh or (y0.mesh if isinstance(y0, StatePair) else None)
    if mesh is None or time_steps is None or dt is None:
        raise ValueError("mesh, time_steps and dt are required")
    N = int(time_steps)
    op = StepOperator(mesh, dt, potentials)
    load0 = source_load(mesh, f0, N)
    if control is not None:
        if control.values.shape != load0.shape:
            raise MeshMismatchError("control lattice does not match")
        load0 = load0 + control.load()
    load1 = source_load(mesh, f1, N)
    y_init = initial_nodes(mesh, y0)
    C = mesh.coupling_matrix
    p, q = params.p, params.q

    def linear_step(u, w):
        rhs0 = load0 if u is None else load0 - reaction_load(mesh, u, p, q)
        y = _march_forward(op, y_init, rhs0, N)
        if not cascade:
            return y, np.zeros_like(y)
        rhs1 = load1 + _apply(C, y)
        if u is not None:
            # the frozen z-reaction acts on z^{m-1} with the slope at level m
            frozen = np.zeros_like(w)
            frozen[1:] = reaction_slope(mesh, u[1:], p, q, form) * w[:-1]
            rhs1 = rhs1 - frozen
        z = _march_backward(op, np.zeros(mesh.n_nodes), rhs1, N)
        return y, z

    scale = max(_norm_series(mesh, dt, load0 / mesh.mass), _norm_series(mesh, dt, load1 / mesh.mass),
                float(mesh.node_norm(y_init)))

    if linear:
        y, z = linear_step(None, None)
        return _finish(mesh, dt, y, z, load0, load1, params, potentials, form, control, f0, f1, 1, True,
                       [0.0], [], scale, linear=True, cascade=cascade)

    if initial_iterate is None:
        u = np.zeros((N + 1, mesh.n_nodes))
        u[0] = y_init
        w = np.zeros_like(u)
    elif isinstance(initial_iterate, str) and initial_iterate == "linear":
        u, w = linear_step(None, None)
    else:
        u, w = (np.array(a, dtype=float) for a in initial_iterate)

    changes, ratios = [], []
    streak = 0
    converged = False
    it = 0
    while it < params.max_iterations:
        try:
            with np.errstate(over="raise", invalid="raise"):
                y, z = linear_step(u, w)
        except (LinearSolveError, FloatingPointError) as exc:
            if raise_on_failure:
                raise FixedPointDivergence(
                    f"fixed-point iterate overflowed at iteration {it + 1}; the data are too large "
                    "for the contraction regime"
                ) from exc
            streak = DIVERGENCE_STREAK
            break
        it += 1
        with np.errstate(over="ignore", invalid="ignore"):
            num = np.hypot(_norm_series(mesh, dt, y - u), _norm_series(mesh, dt, z - w))
            den = np.hypot(_norm_series(mesh, dt, y), _norm_series(mesh, dt, z))
            change = float(num / den) if den > 0 else float(num)
        if changes:
            prev = changes[-1]
            ratio = change / prev if prev > 0 else 0.0
            ratios.append(float(ratio))
            streak = streak + 1 if ratio >= 1.0 else 0
        changes.append(change)
        u, w = y, z
        if not np.isfinite(change):
            if raise_on_failure:
                raise FixedPointDivergence(
                    f"fixed-point iterate became non-finite at iteration {it}; the data are too large "
                    "for the contraction regime"
                )
            streak = DIVERGENCE_STREAK
            break
        if change < params.fixed_point_tol:
            converged = True
            break
        if streak >= DIVERGENCE_STREAK:
            if raise_on_failure:
                raise FixedPointDivergence(
                    f"fixed-point ratio >= 1 for {DIVERGENCE_STREAK} consecutive iterations "
                    f"(last change {change:.3e}); the data are too large for the contraction regime"
                )
            break
    if not converged and raise_on_failure and streak < DIVERGENCE_STREAK:
        raise FixedPointMaxIterations(
            f"no convergence after {params.max_iterations} iterations (last change {changes[-1]:.3e}, "
            f"target {params.fixed_point_tol:.1e})"
        )
    return _finish(mesh, dt, u, w, load0, load1, params, potentials, form, control, f0, f1, it, converged,
                   changes, ratios, scale, cascade=cascade)


def _finish(mesh, dt, y, z, load0, load1, params, potentials, form, control, f0, f1, it, converged,
            changes, ratios, scale, linear=False, cascade=True):
    # a diverged iterate (raise_on_failure=False) may hold huge values
    with np.errstate(over="ignore", invalid="ignore"):
        ry, rz = nonlinear_residuals(mesh, dt, y, z, load0, load1, params, potentials, form,
                                     reaction=not linear, cascade=cascade)
        yt = Trajectory(y, float(dt), mesh)
        yt.energy = energy_report(yt, load0)
    cas = CascadeTrajectory(yt, Trajectory(z, float(dt), mesh), control, {"f0": f0, "f1": f1})
    return FixedPointResult(cas, it, converged, list(changes), list(ratios), ry, rz, scale)
