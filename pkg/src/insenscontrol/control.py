"""Penalised HUM synthesis of insensitizing controls and inequality probes.

The unknown is an adjoint tuple ``X = (phi, psi)`` on the whole lattice,
``phi`` backward-type (``phi^N = 0``) and ``psi`` forward-type.  With the
node residuals

    r1[m] = (L* phi)^m - B psi^m          m = 1..N
    r2[n] = (L psi)^n                     n = 1..N

the quadratic form is

    a(X, Y) = sum_m dt <r1X[m], omega_y[m] r1Y[m]>
            + sum_n dt <r2X[n], omega_z[n-1] r2Y[n]>
            + sum_n dt <1_omega phiX[n-1], omega_v[n-1] phiY[n-1]>_Omega

with ``omega_y = e^{-2 s bhat}(w_Omega ghat^4 + w_Gamma)/M`` (bulk and
boundary residual weights blended on the boundary rows),
``omega_z = e^{-2 s bhat}(w_Omega ghat + w_Gamma)/M`` and
``omega_v = e^{-2 s bhat} ghat^9``.  Summation by parts shows that the
minimiser of ``a(X,X)/2 - G(X)`` yields

    y = omega_y r1,  z[n-1] = omega_z[n-1] r2[n],  v[n] = -omega_v[n-1] phi[n-1],

a solution of the cascade with ``y(0) = 0``, ``z(T) = 0`` and, because the
weight ``omega_z`` vanishes at ``t = 0``, ``z(0) = 0``.

The weights span thousands of orders of magnitude, so the normal equations
are solved in the variables ``X = S Xs`` where ``S`` rescales every time
slice by ``exp(-max log weight / 2)``.  Writing ``a = dt |Q Xs|^2`` with a
sparse residual matrix ``Q``, the normal matrix is ``A = dt Q^T Q``.

Every coefficient of ``A`` is invariant under rotations of the annulus
except the surface term on the arcs ``G``, which only touches the ``psi``
unknowns on the boundary circles carrying ``G``.  :class:`FourierSchurSolver`
eliminates the remaining unknowns exactly with one sparse factorisation per
angular Fourier mode and solves the small dense Schur complement on those
circles; used as the CG preconditioner it makes CG converge in a handful of
iterations.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.special import logsumexp

from .errors import (
    CGNonConvergence,
    ConfigError,
    LinearSolveError,
    MeshMismatchError,
    WeightedSourceError,
)
from .geometry import Mesh, _apply
from .nonlinear import (
    NonlinearityParams,
    fixed_point_solve,
    reaction_load,
    reaction_slope,
)
from .solvers import (
    ControlField,
    PotentialPair,
    StepOperator,
    _march_backward,
    _march_forward,
    solve_cascade_linear,
    source_load,
)
from .weights import WeightSet, eta0_profile

LOG_MAX = 700.0
# scaled source entries above e^300 would overflow the squared norms in CG
RHS_LOG_MAX = 300.0
PRECONDITIONERS = ("fourier-schur", "jacobi")


@dataclass
class AdjointTuple:
    """``(phi, psi)`` node arrays of shape ``(Nt+1, n_nodes)``; ``phi[Nt] = 0``."""

    phi: np.ndarray
    psi: np.ndarray

    def __post_init__(self):
        self.phi = np.array(self.phi, dtype=float)
        self.psi = np.array(self.psi, dtype=float)
        if self.phi.shape != self.psi.shape:
            raise MeshMismatchError("phi and psi lattices differ")
        self.phi[-1] = 0.0

    @classmethod
    def zeros(cls, mesh: Mesh, time_steps):
        z = np.zeros((time_steps + 1, mesh.n_nodes))
        return cls(z, z.copy())

    def pack(self):
        return np.concatenate([self.phi[:-1].ravel(), self.psi.ravel()])

    @classmethod
    def unpack(cls, x, mesh: Mesh, time_steps):
        n = mesh.n_nodes
        k = time_steps * n
        phi = np.zeros((time_steps + 1, n))
        phi[:-1] = x[:k].reshape(time_steps, n)
        return cls(phi, x[k:].reshape(time_steps + 1, n))


@dataclass
class SynthesisReport:
    z0_norm: float
    z_l2_norm: float
    z0_relative: float
    path_gap: float
    control_l2: float
    control_weighted: float
    cg_iterations: int
    cg_residual: float
    cg_residual_l2: float
    cg_converged: bool
    a_value: float
    active_unknowns: int
    preconditioner: str
    residual_history: list = field(default_factory=list, repr=False)

    def as_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "residual_history"}
        d["cg_converged"] = bool(d["cg_converged"])
        return d


def _log_weights(mesh: Mesh, ws: WeightSet):
    """Per-node log weights ``omega_y, omega_z`` (shape (Nt+1, n)) and ``omega_v`` (Nt+1,)."""
    s = ws.params.s
    with np.errstate(divide="ignore"):
        base = -2.0 * s * ws.beta_hat
        base = np.where(ws.flag_start, -np.inf, base)
        lg = np.log(ws.gamma_hat)
        wb, wg = mesh.w_bulk, np.zeros(mesh.n_nodes)
        wg[mesh.bnd_nodes] = mesh.w_bnd

        # log((w_b g^k + w_g)/M) per node, stable for large g
        def blend(k):
            lk = k * lg[:, None]
            return np.logaddexp(np.log(wb)[None, :] + lk, np.log(wg)[None, :]) - np.log(mesh.mass)[None, :]

        ly = base[:, None] + blend(4.0)
        lz = base[:, None] + blend(1.0)
        lv = base + 9.0 * lg
    return ly, lz, lv


def _residual_matrix(E, C, md, coef, N):
    """Sparse ``Q`` with ``a = dt |Q x|^2`` for packed ``x``.

    ``E[m]`` is the step matrix of slice ``m`` (any spatial representation),
    ``C`` the coupling and ``md`` the lumped ``M/dt``; ``coef`` holds the
    per-slice diagonal scalings.  Rows are ``q1[1..N]``, ``q2[1..N]``,
    ``q3[0..N-1]``; columns ``phi[0..N-1]`` then ``psi[0..N]``.
    """
    D = sp.diags
    blocks = [[None] * (2 * N + 1) for _ in range(3 * N)]
    for m in range(1, N + 1):
        blocks[m - 1][m - 1] = D(coef["1a"][m]) @ E[m]
        if m < N:
            blocks[m - 1][m] = -D(coef["1b"][m] * md)
        blocks[m - 1][N + m] = -D(coef["1c"][m]) @ C
        blocks[N + m - 1][N + m] = D(coef["2a"][m]) @ E[m]
        blocks[N + m - 1][N + m - 1] = -D(coef["2b"][m] * md)
    for k in range(N):
        blocks[2 * N + k][k] = D(coef["3"][k])
    return sp.bmat(blocks, format="csr")


class HUMOperator:
    """Scaled normal operator of the penalised HUM problem.

    ``scale=False`` keeps the natural variables (used to evaluate ``a``
    itself on arbitrary tuples).
    """

    def __init__(self, mesh: Mesh, ws: WeightSet, potentials: PotentialPair | None = None, scale=True):
        self.mesh = mesh
        self.ws = ws
        N = ws.params.time_steps
        self.N = N
        self.dt = ws.params.dt
        if ws.eta0.shape[0] != mesh.n_nodes:
            raise MeshMismatchError("weight set was built on a different mesh")
        self.op = StepOperator(mesh, self.dt, potentials)
        self.react = np.stack([self.op.diagonal(n) for n in range(N + 1)])
        self.C = mesh.coupling_matrix
        ly, lz, lv = _log_weights(mesh, ws)
        self.log_wy, self.log_wz, self.log_wv = ly, lz, lv
        omask = mesh.omega.astype(float)
        with np.errstate(divide="ignore"):
            log_wv_node = lv[:, None] + np.log(mesh.w_bulk * omask)[None, :]
        self.log_wv_node = log_wv_node

        # per-slice maxima of the weights each unknown meets
        Ly = ly.max(axis=1)
        Lz = lz.max(axis=1)
        Lv = log_wv_node.max(axis=1)
        lam_phi = np.full(N + 1, -np.inf)
        lam_psi = np.full(N + 1, -np.inf)
        for k in range(N):
            cands = [Ly[k + 1], Lv[k]] + ([Ly[k]] if k >= 1 else [])
            lam_phi[k] = max(cands)
        for k in range(N + 1):
            cands = []
            if k >= 1:
                cands += [Ly[k], Lz[k - 1]]
            if k <= N - 1:
                cands.append(Lz[k])
            lam_psi[k] = max(cands)
        if scale:
            sig_phi = -0.5 * lam_phi
            sig_psi = -0.5 * lam_psi
        else:
            sig_phi = np.where(np.isfinite(lam_phi), 0.0, np.inf)
            sig_psi = np.where(np.isfinite(lam_psi), 0.0, np.inf)
        sig_phi[N] = np.inf
        self.sig_phi, self.sig_psi = sig_phi, sig_psi
        self.active_phi = np.isfinite(sig_phi)
        self.active_psi = np.isfinite(sig_psi)

        rs = 1.0 / np.sqrt(mesh.mass)

        def coef(logw_half, sig):
            with np.errstate(invalid="ignore", over="ignore"):
                e = logw_half + sig
                e = np.where(np.isfinite(sig) & np.isfinite(logw_half), e, -np.inf)
                return np.exp(np.minimum(e, LOG_MAX))

        hy, hz = 0.5 * ly, 0.5 * lz
        z = np.zeros((N + 1, mesh.n_nodes))
        c1a, c1b, c1c, c2a, c2b = (z.copy() for _ in range(5))
        for m in range(1, N + 1):
            c1a[m] = coef(hy[m], sig_phi[m - 1]) * rs          # E phi[m-1]
            c1b[m] = coef(hy[m], sig_phi[m]) * rs              # (M/dt) phi[m]
            c1c[m] = coef(hy[m], sig_psi[m]) * rs              # M B psi[m]
            c2a[m] = coef(hz[m - 1], sig_psi[m]) * rs          # E psi[m]
            c2b[m] = coef(hz[m - 1], sig_psi[m - 1]) * rs      # (M/dt) psi[m-1]
        c3 = np.zeros((N + 1, mesh.n_nodes))
        for k in range(N):
            c3[k] = coef(0.5 * log_wv_node[k], sig_phi[k])
        self.c1a, self.c1b, self.c1c, self.c2a, self.c2b, self.c3 = c1a, c1b, c1c, c2a, c2b, c3
        self.md = mesh.mass / self.dt
        self._diag = None
        self._Q = None

    # ------------------------------------------------------------------
    @property
    def size(self):
        return (2 * self.N + 1) * self.mesh.n_nodes

    @property
    def coefficients(self):
        return {"1a": self.c1a, "1b": self.c1b, "1c": self.c1c, "2a": self.c2a, "2b": self.c2b, "3": self.c3}

    def step_matrices(self):
        """``E_m`` for every time node (shared object when potentials are constant)."""
        if self.op.potentials.is_constant:
            E = self.op.matrix(1).tocsr()
            return [E] * (self.N + 1)
        return [self.op.matrix(n).tocsr() for n in range(self.N + 1)]

    def residual_matrix(self):
        if self._Q is None:
            self._Q = _residual_matrix(self.step_matrices(), self.C, self.md, self.coefficients, self.N)
        return self._Q

    def _E(self, rows, u):
        return _apply(self.op.base, u) + self.react[rows] * u

    def residual_maps(self, phi, psi):
        """Weighted residuals ``(q1, q2, q3)`` with ``a = dt * sum |q|^2``."""
        N = self.N
        q1 = np.zeros_like(phi)
        q2 = np.zeros_like(phi)
        m = np.arange(1, N + 1)
        q1[1:] = (self.c1a[1:] * self._E(m, phi[:-1]) - self.c1b[1:] * self.md * phi[1:]
                  - self.c1c[1:] * _apply(self.C, psi[1:]))
        q2[1:] = self.c2a[1:] * self._E(m, psi[1:]) - self.c2b[1:] * self.md * psi[:-1]
        q3 = self.c3 * phi
        return q1, q2, q3

    def form(self, X: AdjointTuple, Y: AdjointTuple):
        qx = self.residual_maps(X.phi, X.psi)
        qy = self.residual_maps(Y.phi, Y.psi) if Y is not X else qx
        return float(self.dt * sum(np.sum(a * b) for a, b in zip(qx, qy)))

    def apply(self, x):
        """``A x = dt Q^T Q x`` on packed tuples."""
        Q = self.residual_matrix()
        return self.dt * (Q.T @ (Q @ x))

    def diagonal(self):
        if self._diag is None:
            Q = self.residual_matrix()
            self._diag = self.dt * np.asarray(Q.multiply(Q).sum(axis=0)).ravel()
        return self._diag

    def active_mask(self):
        n = self.mesh.n_nodes
        ap = np.repeat(self.active_phi[:-1], n)
        as_ = np.repeat(self.active_psi, n)
        return np.concatenate([ap, as_]) & (self.diagonal() > 0)

    def rhs(self, load0, load1):
        """Scaled ``G``: ``dt * S * (load0[n] -> phi[n-1], load1[m] -> psi[m])``."""
        N = self.N
        bphi = np.zeros((N + 1, self.mesh.n_nodes))
        bpsi = np.zeros_like(bphi)
        for name, load, sig, target, shift in (
            ("f0", load0, self.sig_phi, bphi, 1),
            ("f1", load1, self.sig_psi, bpsi, 0),
        ):
            for k in range(N + 1):
                src_row = k + shift
                if src_row > N or src_row < 1:
                    continue
                row = load[src_row]
                if not np.any(row):
                    continue
                with np.errstate(divide="ignore"):
                    e = sig[k] + np.log(np.abs(row))
                if not np.isfinite(sig[k]) or np.max(e) > RHS_LOG_MAX:
                    raise WeightedSourceError(
                        f"source {name} is too large at t={src_row * self.dt:.6g} for the "
                        "weighted finiteness condition (scaled load overflows)"
                    )
                target[k] = self.dt * np.sign(row) * np.exp(e)
        return AdjointTuple(bphi, bpsi).pack()

    def natural(self, x):
        """Unscaled tuple ``S Xs`` (may overflow for early slices)."""
        X = AdjointTuple.unpack(x, self.mesh, self.N)
        with np.errstate(over="ignore", invalid="ignore"):
            fp = np.where(self.active_phi, np.exp(np.where(self.active_phi, self.sig_phi, 0.0)), 0.0)
            fs = np.where(self.active_psi, np.exp(np.where(self.active_psi, self.sig_psi, 0.0)), 0.0)
        return AdjointTuple(X.phi * fp[:, None], X.psi * fs[:, None])

    def recover(self, x):
        """``(y, z, v)`` from the (scaled) minimiser."""
        N = self.N
        X = AdjointTuple.unpack(x, self.mesh, N)
        q1, q2, _ = self.residual_maps(X.phi, X.psi)
        rs = 1.0 / np.sqrt(self.mesh.mass)
        with np.errstate(under="ignore"):
            sy = np.exp(0.5 * self.log_wy) * rs
            sz = np.exp(0.5 * self.log_wz) * rs
        y = np.zeros_like(q1)
        z = np.zeros_like(q1)
        y[1:] = sy[1:] * q1[1:]
        z[:-1] = sz[:-1] * q2[1:]
        v = np.zeros_like(q1)
        log_w = np.log(np.where(self.mesh.omega, self.mesh.w_bulk, 1.0))
        for n in range(1, N + 1):
            k = n - 1
            if not self.active_phi[k]:
                continue
            with np.errstate(divide="ignore", under="ignore", over="ignore", invalid="ignore"):
                e = self.log_wv_node[k] - log_w + self.sig_phi[k]
                fac = np.where(self.mesh.omega & np.isfinite(e), np.exp(np.minimum(e, LOG_MAX)), 0.0)
            v[n] = -fac * X.phi[k]
        return y, z, v


# ----------------------------------------------------------------------
# exact solver for the normal equations


def _mode_symbols(S, nr1, nth, dth):
    """Rotation-averaged Fourier symbols of a node matrix, shape ``(nth//2+1, nr1, nr1)``.

    For a matrix commuting with rotations the symbol of mode ``k`` maps the
    ``rfft`` coefficients of the input rings to those of the output rings
    exactly; for any other matrix this is the symbol of its rotation average.
    """
    S = S.tocoo()
    i, j = np.divmod(S.row, nth)
    i2, j2 = np.divmod(S.col, nth)
    d = (j2 - j) % nth
    nk = nth // 2 + 1
    out = np.zeros((nk, nr1, nr1))
    flat = i * nr1 + i2
    for k in range(nk):
        out[k] = np.bincount(flat, weights=np.cos(k * d * dth) * S.data / nth,
                             minlength=nr1 * nr1).reshape(nr1, nr1)
    return out


class FourierSchurSolver:
    """Direct solver for ``A = dt Q^T Q`` on the active unknowns.

    The unknowns are split into ``r`` (``psi`` on the boundary circles that
    carry ``G``) and ``i`` (everything else).  ``A_ii`` commutes with
    rotations whenever the potentials are radial, so it is block diagonal
    in the angular Fourier modes and each mode is a sparse problem of size
    ``~2 Nt (Nr+1)``.  The Schur complement

        S = A_rr - A_ri A_ii^{-1} A_ir = dt Q_r^T (I - P) Q_r

    only needs the projector ``P`` onto the range of ``Q_i`` restricted to
    the residual rings that ``Q_r`` touches, which is again block
    circulant.  ``S`` is dense of size ``Nt * Ntheta`` per circle.

    With non-radial potentials the mode matrices are rotation averages and
    the solver becomes an (SPD) approximation.
    """

    def __init__(self, hum: HUMOperator, active):
        mesh = hum.mesh
        N, dt = hum.N, hum.dt
        nth, nr1, n = mesh.nth, mesh.nr + 1, mesh.n_nodes
        self.hum, self.N, self.dt = hum, N, dt
        self.nth, self.nr1, self.n = nth, nr1, n
        self.nk = nth // 2 + 1
        Q = hum.residual_matrix()
        ncol = Q.shape[1]
        self.ncol = ncol
        self.active = np.asarray(active, dtype=bool)
        expected = np.ones(ncol, dtype=bool)
        expected[:N * n] = np.repeat(hum.active_phi[:-1], n)
        expected[N * n:] = np.repeat(hum.active_psi, n)
        if not np.array_equal(self.active, expected):
            raise LinearSolveError("Fourier-Schur solver needs whole-slice activity")

        circles = sorted({0 if name == "inner" else mesh.nr
                          for (name, _, _), used in zip(mesh.config.g_arcs, self._arc_used(mesh)) if used})
        self.circles = circles
        ring_nodes = np.concatenate([ri * nth + np.arange(nth) for ri in circles]) if circles else np.zeros(0, int)
        self.ridx = np.sort(np.concatenate(
            [N * n + m * n + ring_nodes for m in range(N + 1) if hum.active_psi[m]]
        )) if circles else np.zeros(0, dtype=int)
        is_r = np.zeros(ncol, dtype=bool)
        is_r[self.ridx] = True
        self.iidx = np.flatnonzero(self.active & ~is_r)

        # mode-space columns of the i block
        ra = np.arange(nr1)
        psi_rad = np.setdiff1d(ra, circles)
        self.psi_rad = psi_rad
        self.phi_slices = np.flatnonzero(hum.active_phi[:-1])
        self.psi_slices = np.flatnonzero(hum.active_psi)
        keep = [k * nr1 + ra for k in self.phi_slices] + [(N + k) * nr1 + psi_rad for k in self.psi_slices]
        keep = np.concatenate(keep)

        def ring(v):
            return v.reshape(nr1, nth).mean(axis=1)

        coef = {key: np.array([ring(row) for row in arr]) for key, arr in hum.coefficients.items()}
        md = ring(hum.md)
        base_sym = _mode_symbols(hum.op.base, nr1, nth, mesh.dth)
        C_sym = _mode_symbols(hum.C, nr1, nth, mesh.dth)
        react = np.array([ring(row) for row in hum.react])

        # residual rings touched by Q_r: (row block, radial index)
        if circles:
            Qr = Q[:, self.ridx].tocsc()
            rows = np.unique(Qr.nonzero()[0])
            pairs = sorted({(int(rw // n), int((rw % n) // nth)) for rw in rows})
        else:
            pairs = []
        self.pairs = pairs
        U_mode = np.array([b * nr1 + ri for b, ri in pairs], dtype=int)

        self.lus = []
        proj = []
        for k in range(self.nk):
            Ek = [sp.csr_matrix(base_sym[k] + np.diag(react[m])) for m in range(N + 1)]
            Qk = _residual_matrix(Ek, sp.csr_matrix(C_sym[k]), md, coef, N)
            Qk = Qk[:, keep].tocsc()
            Ak = (dt * (Qk.T @ Qk)).tocsc()
            try:
                lu = splu(Ak)
            except RuntimeError as exc:
                raise LinearSolveError(f"Fourier mode {k} of the HUM operator is singular: {exc}") from exc
            self.lus.append(lu)
            if pairs:
                Bk = Qk[U_mode].toarray()
                proj.append(dt * Bk @ lu.solve(np.ascontiguousarray(Bk.T)))

        if pairs:
            urows = np.array([[b * n + ri * nth + j for j in range(nth)] for b, ri in pairs]).ravel()
            Qt = Q[urows][:, self.ridx].tocoo()
            pi, jj = np.divmod(Qt.row, nth)
            S = dt * (Qt.T @ Qt).toarray()
            nr = self.ridx.size
            for k in range(self.nk):
                ck = 1.0 if (k == 0 or 2 * k == nth) else 2.0
                ph = k * mesh.dth * jj
                Xc = sp.csr_matrix((Qt.data * np.cos(ph), (pi, Qt.col)), shape=(len(pairs), nr))
                Xs = sp.csr_matrix((-Qt.data * np.sin(ph), (pi, Qt.col)), shape=(len(pairs), nr))
                Yc = proj[k] @ Xc.toarray()
                Ys = proj[k] @ Xs.toarray()
                S -= (dt * ck / nth) * (Xc.T @ Yc + Xs.T @ Ys)
            S = 0.5 * (S + S.T)
            try:
                self._S = ("chol", sla.cho_factor(S))
            except np.linalg.LinAlgError:
                self._S = ("lu", sla.lu_factor(S))
            Qi = Q[:, self.iidx]
            Qrr = Q[:, self.ridx]
            self.A_ri = (dt * (Qrr.T @ Qi)).tocsr()
            self.A_ir = self.A_ri.T.tocsr()
        else:
            self._S = None

    @staticmethod
    def _arc_used(mesh: Mesh):
        circle = np.repeat([0, 1], mesh.nth)
        from .geometry import CIRCLES
        return [bool(np.any(mesh.g_edges & (circle == CIRCLES.index(name)))) for name, _, _ in mesh.config.g_arcs]

    def _solve_S(self, v):
        kind, fac = self._S
        return sla.cho_solve(fac, v) if kind == "chol" else sla.lu_solve(fac, v)

    def solve_ii(self, v):
        N, n, nr1, nth = self.N, self.n, self.nr1, self.nth
        full = np.zeros(self.ncol)
        full[self.iidx] = v
        phi = full[:N * n].reshape(N, nr1, nth)[self.phi_slices]
        psi = full[N * n:].reshape(N + 1, nr1, nth)[self.psi_slices][:, self.psi_rad]
        P = np.fft.rfft(phi, axis=2)
        S = np.fft.rfft(psi, axis=2)
        OP = np.zeros_like(P)
        OS = np.zeros_like(S)
        nphi = P.shape[0] * nr1
        for k in range(self.nk):
            rhs = np.concatenate([P[:, :, k].ravel(), S[:, :, k].ravel()])
            sol = self.lus[k].solve(np.stack([rhs.real, rhs.imag], axis=1))
            sol = sol[:, 0] + 1j * sol[:, 1]
            OP[:, :, k] = sol[:nphi].reshape(P.shape[:2])
            OS[:, :, k] = sol[nphi:].reshape(S.shape[:2])
        out_phi = np.zeros((N, nr1, nth))
        out_phi[self.phi_slices] = np.fft.irfft(OP, n=nth, axis=2)
        out_psi = np.zeros((N + 1, nr1, nth))
        tmp = np.zeros((len(self.psi_slices), nr1, nth))
        tmp[:, self.psi_rad] = np.fft.irfft(OS, n=nth, axis=2)
        out_psi[self.psi_slices] = tmp
        out = np.concatenate([out_phi.ravel(), out_psi.ravel()])
        return out[self.iidx]

    def solve(self, b):
        """``A^{-1} b`` on the active unknowns (inactive entries set to 0)."""
        out = np.zeros_like(b)
        yi = self.solve_ii(b[self.iidx])
        if self._S is None:
            out[self.iidx] = yi
            return out
        xr = self._solve_S(b[self.ridx] - self.A_ri @ yi)
        out[self.iidx] = yi - self.solve_ii(self.A_ir @ xr)
        out[self.ridx] = xr
        return out


# ----------------------------------------------------------------------


def apply_bilinear_form(X: AdjointTuple, Y: AdjointTuple, ws: WeightSet, mesh: Mesh,
                        potentials: PotentialPair | None = None, terms=False):
    """Quadrature of ``a(X, Y)``; with ``terms=True`` also the five parts.

    The parts are the bulk and boundary shares of the ``L* phi - B psi``
    residual, the bulk and boundary shares of the ``L psi`` residual and
    the omega-localised ``phi`` term.
    """
    N = ws.params.time_steps
    if X.phi.shape != (N + 1, mesh.n_nodes) or Y.phi.shape != X.phi.shape:
        raise MeshMismatchError("adjoint tuples do not match the weight lattice")
    hum = HUMOperator(mesh, ws, potentials, scale=False)
    qx = hum.residual_maps(X.phi, X.psi)
    qy = hum.residual_maps(Y.phi, Y.psi)
    dt = hum.dt
    total = float(dt * sum(np.sum(a * b) for a, b in zip(qx, qy)))
    if not terms:
        return total
    ghat = ws.gamma_hat
    wg = np.zeros(mesh.n_nodes)
    wg[mesh.bnd_nodes] = mesh.w_bnd

    def share(k):
        bulk = mesh.w_bulk[None, :] * ghat[:, None] ** k
        return bulk / (bulk + wg[None, :])

    sy, sz = share(4.0), share(1.0)
    # q1[m] pairs with omega_y at t_m; q2[n] with omega_z at t_{n-1}
    sz_shift = np.zeros_like(sz)
    sz_shift[1:] = sz[:-1]
    p1 = qx[0] * qy[0]
    p2 = qx[1] * qy[1]
    parts = {
        "y_bulk": float(dt * np.sum(p1 * sy)),
        "y_boundary": float(dt * np.sum(p1 * (1 - sy))),
        "z_bulk": float(dt * np.sum(p2 * sz_shift)),
        "z_boundary": float(dt * np.sum(p2 * (1 - sz_shift))),
        "omega": float(dt * np.sum(qx[2] * qy[2])),
    }
    return total, parts


def linear_form(X: AdjointTuple, load0, load1, dt):
    """``G(X) = sum_n dt phi[n-1].load0[n] + sum_m dt psi[m].load1[m]``."""
    return float(dt * (np.sum(X.phi[:-1] * load0[1:]) + np.sum(X.psi[1:] * load1[1:])))


def pcg(apply_A, b, precond, active, tol=1e-8, max_iter=2000, x0=None):
    """Preconditioned CG restricted to ``active`` unknowns.

    Convergence is measured by the preconditioned residual
    ``sqrt(r.P^{-1}r) / sqrt(b.P^{-1}b)``.  Returns ``(x, iterations,
    residual, history)`` where ``residual`` is recomputed from ``b - A x``.
    """
    n = b.size
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    x[~active] = 0.0
    b = np.where(active, b, 0.0)

    def A(v):
        out = apply_A(v)
        out[~active] = 0.0
        return out

    def P(v):
        out = precond(v)
        out[~active] = 0.0
        return out

    history = []
    zb = P(b)
    bnorm = np.sqrt(max(b @ zb, 0.0))
    if bnorm == 0.0:
        return np.zeros(n), 0, 0.0, history
    r = b - A(x) if np.any(x) else b.copy()
    z = P(r)
    p = z.copy()
    rz = r @ z
    res = np.sqrt(max(rz, 0.0)) / bnorm
    history.append(float(res))
    it = 0
    while res > tol and it < max_iter:
        Ap = A(p)
        pAp = p @ Ap
        if not pAp > 0:
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        it += 1
        if it % 50 == 0:
            r = b - A(x)
        z = P(r)
        rz_new = r @ z
        res = np.sqrt(max(rz_new, 0.0)) / bnorm
        history.append(float(res))
        p = z + (rz_new / rz) * p
        rz = rz_new
    r = b - A(x)
    res = float(np.sqrt(max(r @ P(r), 0.0)) / bnorm)
    return x, it, res, history


class HUMSolver:
    """Factorised HUM problem for one mesh, weight set and potential.

    Building the solver is the expensive step; :meth:`solve` can then be
    called for many source pairs (the nonlinear control loop does).
    """

    def __init__(self, mesh: Mesh, ws: WeightSet, potentials: PotentialPair | None = None,
                 preconditioner="fourier-schur"):
        if preconditioner not in PRECONDITIONERS:
            raise ConfigError(f"unknown preconditioner {preconditioner!r}; choose from {PRECONDITIONERS}")
        if ws.eta0.shape[0] != mesh.n_nodes:
            raise MeshMismatchError("weight set was built on a different mesh")
        self.mesh, self.ws, self.potentials = mesh, ws, potentials
        self.preconditioner = preconditioner
        self.hum = HUMOperator(mesh, ws, potentials)
        self.active = self.hum.active_mask()
        if preconditioner == "jacobi":
            d = self.hum.diagonal()
            dinv = np.where(self.active & (d > 0), 1.0 / np.where(d > 0, d, 1.0), 0.0)
            self._precond = lambda v: dinv * v
        else:
            self._precond = FourierSchurSolver(self.hum, self.active).solve

    def solve(self, f0=None, f1=None, cg_tol=1e-10, cg_max_iters=2000, x0=None, raise_on_failure=True):
        """Synthesise the control for sources ``(f0, f1)``; see :func:`synthesize_control`."""
        mesh, ws, hum = self.mesh, self.ws, self.hum
        N, dt = ws.params.time_steps, ws.params.dt
        load0 = source_load(mesh, f0, N)
        load1 = source_load(mesh, f1, N)
        b = hum.rhs(load0, load1)
        with np.errstate(over="ignore", invalid="ignore"):
            x, it, res, hist = pcg(hum.apply, b, self._precond, self.active, cg_tol, cg_max_iters, x0)
        if not np.isfinite(res):
            raise WeightedSourceError(
                "the weighted source norm is not finite in floating point; the source is too large "
                "near t=0 for the weighted finiteness condition"
            )
        converged = res <= cg_tol
        if not converged and raise_on_failure:
            raise CGNonConvergence(
                f"CG reached relative residual {res:.3e} after {it} iterations (target {cg_tol:.1e}); "
                "try a larger s or a finer time step"
            )
        r = np.where(self.active, b - hum.apply(x), 0.0)
        bn = np.linalg.norm(b)
        res_l2 = float(np.linalg.norm(r) / bn) if bn > 0 else 0.0
        y_rec, z_rec, v = hum.recover(x)
        control = ControlField(v, mesh)
        cascade = solve_cascade_linear(None, control, load0, load1, self.potentials, N, dt, mesh=mesh)
        z_sim = cascade.z
        zl2 = z_sim.l2_norm()
        diff = z_rec - z_sim.nodes
        gap_num = np.sqrt(dt * np.sum(mesh.node_inner(diff, diff)))
        gap_den = np.sqrt(dt * np.sum(mesh.node_inner(z_sim.nodes, z_sim.nodes)))
        gap = float(gap_num / gap_den) if gap_den > 0 else float(gap_num)
        z0 = cascade.z0_norm()
        X = AdjointTuple.unpack(x, mesh, N)
        q = hum.residual_maps(X.phi, X.psi)
        a_val = float(dt * sum(np.sum(qi * qi) for qi in q))
        report = SynthesisReport(
            z0_norm=z0,
            z_l2_norm=zl2,
            z0_relative=float(z0 / zl2) if zl2 > 0 else 0.0,
            path_gap=gap,
            control_l2=control.l2_norm(dt),
            # ||e^{s bhat} ghat^{-9/2} v|| = sqrt(sum dt omega_v |phi|^2 on omega)
            control_weighted=float(np.sqrt(dt * np.sum(q[2] ** 2))),
            cg_iterations=int(it),
            cg_residual=float(res),
            cg_residual_l2=res_l2,
            cg_converged=bool(converged),
            a_value=a_val,
            active_unknowns=int(self.active.sum()),
            preconditioner=self.preconditioner,
            residual_history=hist,
        )
        extras = {"y": y_rec, "z": z_rec, "v": v, "x": x, "operator": hum}
        return control, cascade, report, extras


def synthesize_control(mesh: Mesh, ws: WeightSet, f0=None, f1=None, potentials=None,
                       cg_tol=1e-10, cg_max_iters=2000, x0=None, raise_on_failure=True,
                       preconditioner="fourier-schur"):
    """Penalised HUM control for the linear cascade.

    ``f0`` drives ``y`` and ``f1`` drives ``z`` (``StatePair`` batches or
    load arrays, see :func:`solvers.source_load`).  Returns ``(control,
    cascade, report, extras)`` where ``cascade`` is the re-simulation with
    the recovered control and ``extras`` holds the recovered ``(y, z, v)``
    and the scaled minimiser.
    """
    solver = HUMSolver(mesh, ws, potentials, preconditioner)
    return solver.solve(f0, f1, cg_tol, cg_max_iters, x0, raise_on_failure)


@dataclass
class NonlinearSynthesisReport:
    outer_iterations: int
    converged: bool
    control_changes: list
    z0_norm: float
    z_l2_norm: float
    z0_relative: float
    linear_reports: list = field(default_factory=list, repr=False)

    def as_dict(self):
        return {
            "outer_iterations": self.outer_iterations,
            "converged": bool(self.converged),
            "control_changes": list(self.control_changes),
            "z0_norm": self.z0_norm,
            "z_l2_norm": self.z_l2_norm,
            "z0_relative": self.z0_relative,
        }


def synthesize_nonlinear_control(mesh: Mesh, ws: WeightSet, f0=None, params: NonlinearityParams | None = None,
                                 potentials=None, outer_tol=1e-8, max_outer=20, cg_tol=1e-10, cg_max_iters=2000,
                                 preconditioner="fourier-schur", solver: HUMSolver | None = None):
    """Control for the semilinear cascade by an explicit outer iteration.

    Each sweep freezes the reaction at the previous cascade ``(y_k, z_k)``
    and solves the linear HUM problem with sources ``f0 - N(y_k)`` and
    ``-N'(y_k) z_k``; the iteration stops when the relative change of the
    control drops below ``outer_tol``.  The final control is checked
    against the fully semilinear cascade.

    Returns ``(control, fixed_point_result, report)``.
    """
    params = params or NonlinearityParams()
    N, dt = ws.params.time_steps, ws.params.dt
    solver = solver or HUMSolver(mesh, ws, potentials, preconditioner)
    load0 = source_load(mesh, f0, N)
    p, q = params.p, params.q
    control, cascade, rep, _ = solver.solve(load0, None, cg_tol, cg_max_iters)
    reports = [rep]
    changes = []
    converged = False
    it = 0
    while it < max_outer:
        y, z = cascade.y.nodes, cascade.z.nodes
        frozen0 = load0 - reaction_load(mesh, y, p, q)
        frozen1 = np.zeros_like(y)
        frozen1[1:] = -reaction_slope(mesh, y[1:], p, q) * z[:-1]
        new_control, cascade, rep, _ = solver.solve(frozen0, frozen1, cg_tol, cg_max_iters)
        reports.append(rep)
        it += 1
        diff = new_control.values - control.values
        num = np.sqrt(dt * np.sum(mesh.bulk_inner(diff, diff)))
        den = new_control.l2_norm(dt)
        change = float(num / den) if den > 0 else float(num)
        changes.append(change)
        control = new_control
        if change < outer_tol:
            converged = True
            break
    fp = fixed_point_solve(None, control, load0, None, params, potentials, N, dt, mesh)
    zt = fp.cascade.z
    z0, zl2 = zt.norms()[0], zt.l2_norm()
    report = NonlinearSynthesisReport(
        outer_iterations=it, converged=converged, control_changes=changes,
        z0_norm=float(z0), z_l2_norm=float(zl2), z0_relative=float(z0 / zl2) if zl2 > 0 else 0.0,
        linear_reports=reports,
    )
    return control, fp, report


# ----------------------------------------------------------------------
# empirical Carleman / observability ratios


@dataclass
class RatioReport:
    kind: str
    samples: int
    evaluated: int
    skipped: int
    ratios: list
    max_ratio: float
    median_ratio: float
    log10_max: float
    log10_median: float
    s: float
    lam: float

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _smoothed_normal(rng, op: StepOperator, shape):
    """Standard normal per node followed by one implicit diffusion step."""
    g = rng.standard_normal(shape)
    md = op.mesh.mass / op.dt
    if g.ndim == 1:
        return op.solve(1, md * g)
    return np.stack([op.solve(1, md * row) for row in g])


def _adjoint_sample(mesh: Mesh, op: StepOperator, smooth: StepOperator, N, seed):
    rng = np.random.default_rng(seed)
    shape = (N + 1, mesh.n_nodes)
    g0 = _smoothed_normal(rng, smooth, shape)
    g1 = _smoothed_normal(rng, smooth, shape)
    psi0 = _smoothed_normal(rng, smooth, mesh.n_nodes)
    g0[0] = 0.0
    g1[0] = 0.0
    return g0, g1, psi0


def _adjoint_cascade(mesh: Mesh, op: StepOperator, g0, g1, psi0, N):
    """``L psi = g1``, ``psi(0) = psi0``; ``L* phi = g0 + B psi``, ``phi(T) = 0``."""
    psi = _march_forward(op, psi0, g1 * mesh.mass, N)
    load = g0 * mesh.mass + _apply(mesh.coupling_matrix, psi)
    phi = _march_backward(op, np.zeros(mesh.n_nodes), load, N)
    return psi, phi


def _log_int(logw, integrand, quad):
    """``log sum_t sum_x exp(logw_t,x) * integrand * quad`` (zero-safe)."""
    vals = integrand * quad
    with np.errstate(divide="ignore"):
        lv = np.log(np.where(vals > 0, vals, 1.0))
    lv = np.where(vals > 0, lv + logw, -np.inf)
    return logsumexp(lv) if np.any(np.isfinite(lv)) else -np.inf


class _RatioContext:
    """Shared read-only data for one ratio report."""

    def __init__(self, mesh: Mesh, ws: WeightSet, potentials):
        self.mesh, self.ws = mesh, ws
        self.N, self.dt = ws.params.time_steps, ws.params.dt
        self.op = StepOperator(mesh, self.dt, potentials)
        self.smooth = StepOperator(mesh, self.dt, None)
        # prime the factorisations before threads share them
        self.op.solve(1, np.zeros(mesh.n_nodes))
        self.smooth.solve(1, np.zeros(mesh.n_nodes))
        s, lam, T = ws.params.s, ws.params.lam, ws.params.T
        t = ws.t
        with np.errstate(divide="ignore"):
            tt = t * (T - t)
            log_tt = np.log(tt)
        top = np.exp(2 * lam)

        def alpha_xi(r):
            eta = eta0_profile(r, mesh.R0, mesh.R1)
            la = np.log(top - np.exp(lam * eta))
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                m2sa = np.where(np.isfinite(log_tt)[:, None],
                                -2 * s * np.exp(la[None, :] - log_tt[:, None]), -np.inf)
                lxi = np.where(np.isfinite(log_tt)[:, None], lam * eta[None, :] - log_tt[:, None], 0.0)
            return m2sa, lxi

        self.node = alpha_xi(mesh.node_r)
        self.edge = alpha_xi(mesh.edge_r)
        self.bnd = alpha_xi(mesh.bnd_radius)


def _carleman_terms(ctx: _RatioContext, g0, g1, psi, phi):
    mesh, ws, dt = ctx.mesh, ctx.ws, ctx.dt
    s, lam = ws.params.s, ws.params.lam
    ls, ll = np.log(s), np.log(lam)
    tr = mesh.trace
    n_ = slice(1, None)                   # psi, g at t_1..t_N
    k_ = slice(0, -1)                     # phi^{m-1} pairs with t_{m-1}
    m2a, lxi = ctx.node
    m2a_e, lxi_e = ctx.edge
    m2a_b, lxi_b = ctx.bnd
    w, we, wb, wse = mesh.w_bulk * dt, mesh.w_edge * dt, mesh.w_bnd * dt, mesh.w_sedge * dt

    def W(m2sa, log_xi, e_s, e_l, p_xi, rows):
        return m2sa[rows] + e_s * ls + e_l * ll + p_xi * log_xi[rows]

    dpsi = np.diff(psi, axis=0) / dt
    gpsi = _apply(mesh.grad, psi[n_])
    lap = mesh.bulk_laplacian(psi[n_])
    psi_b = tr(psi[n_])
    dn = mesh.normal_derivative(psi[n_])
    tg = _apply(mesh.tgrad, psi_b)
    lb = mesh.laplace_beltrami(psi_b)
    dpsi_b = tr(dpsi)
    lhs = [
        _log_int(W(m2a, lxi, 4, 5, 4, n_), psi[n_] ** 2, w),
        _log_int(W(m2a_e, lxi_e, 2, 3, 2, n_), gpsi**2, we),
        _log_int(W(m2a, lxi, 0, 1, 0, n_), dpsi**2 + lap**2, w),
        _log_int(W(m2a_b, lxi_b, 4, 4, 4, n_), psi_b**2, wb),
        _log_int(W(m2a_b, lxi_b, 2, 2, 2, n_), dn**2 + tg**2, wb),
        _log_int(W(m2a_b, lxi_b, 0, 1, 0, n_), dpsi_b**2 + lb**2, wb),
    ]
    gphi = _apply(mesh.grad, phi[k_])
    phi_b = tr(phi[k_])
    tgp = _apply(mesh.tgrad, phi_b)
    lhs += [
        _log_int(W(m2a, lxi, 3, 4, 3, k_), phi[k_] ** 2, w),
        _log_int(W(m2a_e, lxi_e, 1, 2, 1, k_), gphi**2, we),
        _log_int(W(m2a_b, lxi_b, 3, 3, 3, k_), phi_b**2, wb),
        _log_int(W(m2a_b, lxi_b, 1, 2, 1, k_), tgp**2, wse),
    ]
    om = mesh.omega.astype(float)
    rhs = [
        _log_int(W(m2a, lxi, 4, 5, 4, n_), g0[n_] ** 2, w),
        _log_int(W(m2a, lxi, 1, 1, 5, n_), g1[n_] ** 2, w),
        _log_int(W(m2a_b, lxi_b, 0, 1, 0, n_), tr(g0[n_]) ** 2, wb),
        _log_int(W(m2a_b, lxi_b, 1, 1, 2, n_), tr(g1[n_]) ** 2, wb),
        _log_int(W(m2a, lxi, 9, 11, 9, k_), phi[k_] ** 2 * om, w),
    ]
    return logsumexp(lhs), logsumexp(rhs)


def _observability_terms(ctx: _RatioContext, g0, g1, psi, phi):
    mesh, ws, dt = ctx.mesh, ctx.ws, ctx.dt
    s = ws.params.s
    tr = mesh.trace
    with np.errstate(divide="ignore"):
        lstar = np.where(ws.flag_start, -np.inf, -2 * s * ws.beta_star)
        lhat = np.where(ws.flag_start, -np.inf, -2 * s * ws.beta_hat)
    lgs, lgh = np.log(ws.gamma_star), np.log(ws.gamma_hat)
    n_, k_ = slice(1, None), slice(0, -1)

    def tl(base, lg, p, rows):
        return (base + p * lg)[rows][:, None]

    w, we, wb, wse = mesh.w_bulk * dt, mesh.w_edge * dt, mesh.w_bnd * dt, mesh.w_sedge * dt
    phi_k, psi_n = phi[k_], psi[n_]
    lhs = [
        _log_int(tl(lstar, lgs, 3, k_), phi_k**2, w),
        _log_int(tl(lstar, lgs, 1, k_), _apply(mesh.grad, phi_k) ** 2, we),
        _log_int(tl(lstar, lgs, 4, n_), psi_n**2, w),
        _log_int(tl(lstar, lgs, 2, n_), _apply(mesh.grad, psi_n) ** 2, we),
        _log_int(tl(lstar, lgs, 3, k_), tr(phi_k) ** 2, wb),
        _log_int(tl(lstar, lgs, 1, k_), _apply(mesh.tgrad, tr(phi_k)) ** 2, wse),
        _log_int(tl(lstar, lgs, 4, n_), tr(psi_n) ** 2, wb),
        _log_int(tl(lstar, lgs, 2, n_), _apply(mesh.tgrad, tr(psi_n)) ** 2, wse),
    ]
    om = mesh.omega.astype(float)
    rhs = [
        _log_int(tl(lhat, lgh, 4, n_), g0[n_] ** 2, w),
        _log_int(tl(lhat, lgh, 1, n_), g1[n_] ** 2, w),
        _log_int(tl(lhat, lgh, 0, n_), tr(g0[n_]) ** 2 + tr(g1[n_]) ** 2, wb),
        _log_int(tl(lhat, lgh, 9, k_), phi_k**2 * om, w),
    ]
    return logsumexp(lhs), logsumexp(rhs)


def _ratio_report(kind, terms, mesh, ws, potentials, samples, seed, threads, zero_data):
    if int(samples) < 1:
        raise ConfigError(f"samples must be >= 1, got {samples}")
    ctx = _RatioContext(mesh, ws, potentials)
    N = ctx.N
    seeds = np.random.SeedSequence(seed).spawn(int(samples))

    def one(ss):
        if zero_data:
            g0 = np.zeros((N + 1, mesh.n_nodes))
            g1 = g0.copy()
            psi0 = np.zeros(mesh.n_nodes)
        else:
            g0, g1, psi0 = _adjoint_sample(mesh, ctx.op, ctx.smooth, N, ss)
        psi, phi = _adjoint_cascade(mesh, ctx.op, g0, g1, psi0, N)
        lhs, rhs = terms(ctx, g0, g1, psi, phi)
        if not np.isfinite(rhs):
            return None
        return float(lhs - rhs)

    workers = max(1, int(threads))
    if workers == 1:
        logs = [one(ss) for ss in seeds]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            logs = list(pool.map(one, seeds))
    good = np.array([v for v in logs if v is not None], dtype=float)
    ratios = [float(np.exp(v)) if v is not None else None for v in logs]
    if good.size:
        lmax, lmed = float(good.max()), float(np.median(good))
        mx, md = float(np.exp(lmax)), float(np.exp(lmed))
        l10max, l10med = lmax / np.log(10), lmed / np.log(10)
    else:
        mx = md = l10max = l10med = float("nan")
    return RatioReport(
        kind=kind, samples=int(samples), evaluated=int(good.size), skipped=int(samples) - int(good.size),
        ratios=ratios, max_ratio=mx, median_ratio=md, log10_max=float(l10max), log10_median=float(l10med),
        s=float(ws.params.s), lam=float(ws.params.lam),
    )


def carleman_ratio_report(samples, ws: WeightSet, mesh: Mesh, potentials=None, seed=0, threads=1,
                          zero_data=False):
    """LHS/RHS of the coupled Carleman inequality on random adjoint data.

    The constant ``C_3`` is left out, so the ratios are empirical lower
    bounds for it.  Zero data give ``0/0`` and are counted as skipped.
    """
    return _ratio_report("carleman", _carleman_terms, mesh, ws, potentials, samples, seed, threads, zero_data)


def observability_ratio_report(samples, ws: WeightSet, mesh: Mesh, potentials=None, seed=0, threads=1,
                               zero_data=False):
    """LHS/RHS of the observability inequality (``beta*``/``gamma*`` vs ``bhat``/``ghat``).

    The maximum over the samples is the empirical observability constant.
    """
    return _ratio_report("observability", _observability_terms, mesh, ws, potentials, samples, seed,
                         threads, zero_data)
