"""Carleman and HUM weight functions on the space-time lattice.

Everything is tabulated in log form first: the weights span hundreds of
orders of magnitude on desk-scale parameters and ``exp`` is only taken at
the very end (or never, for the normalised HUM weights).

Endpoint convention: ``alpha, xi`` blow up at ``t = 0`` and ``t = T``,
``beta, gamma`` and the starred/hatted envelopes only at ``t = 0``.  At a
flagged node the growing weights take the value of the nearest interior
node, while decaying factors such as ``exp(-2 s alpha)`` are stored as 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ExponentWindowError, WeightHypothesisError
from .geometry import Mesh


@dataclass(frozen=True)
class WeightParams:
    s: float = 2.0
    lam: float = 1.5
    T: float = 1.0
    time_steps: int = 100

    def __post_init__(self):
        if not (self.s > 0 and self.lam > 0 and self.T > 0):
            raise ConfigError(f"s, lambda and T must be positive, got {self.s}, {self.lam}, {self.T}")
        if int(self.time_steps) != self.time_steps or self.time_steps < 8:
            raise ConfigError(f"time_steps must be an integer >= 8, got {self.time_steps}")

    @property
    def dt(self):
        return self.T / self.time_steps

    @property
    def times(self):
        return np.linspace(0.0, self.T, int(self.time_steps) + 1)


def eta0_profile(r, R0, R1):
    """Radial quadratic ``4 (r - R0)(R1 - r) / (R1 - R0)^2`` (sup norm 1)."""
    r = np.asarray(r, dtype=float)
    return 4.0 * (r - R0) * (R1 - r) / (R1 - R0) ** 2


def build_eta0(mesh: Mesh):
    """Return ``(eta0, c)`` with ``c = min |d_r eta0|`` over the nodes outside omega'.

    Raises :class:`WeightHypothesisError` when the critical radius is not
    inside ``omega_prime`` (the gradient lower bound would fail).
    """
    R0, R1 = mesh.R0, mesh.R1
    mid = 0.5 * (R0 + R1)
    lo, hi = mesh.config.omega_prime
    if not lo < mid < hi:
        raise WeightHypothesisError(f"critical radius {mid} of eta0 lies outside omega' {(lo, hi)}")
    eta = eta0_profile(mesh.node_r, R0, R1)
    deta = np.abs(4.0 * (R0 + R1 - 2.0 * mesh.node_r) / (R1 - R0) ** 2)
    outside = ~mesh.omega_prime
    c = float(deta[outside].min())
    if not c > 0:
        raise WeightHypothesisError("|grad eta0| vanishes outside omega'")
    return eta, c


def check_exponents(p, q, window="H2-d3"):
    """Validate reaction exponents against an admissible window.

    ``H2-d3``: 5/2 < p, q <= 4 (default); ``H2-d2``: 5/2 < p, q;
    ``A2-d3``: 9/4 <= p, q <= 4; ``A2-d2``: 9/4 <= p, q.
    """
    windows = {
        "H2-d3": (lambda e: 2.5 < e <= 4.0, "(H2) exponent window 5/2 < p,q <= 4"),
        "H2-d2": (lambda e: 2.5 < e < np.inf, "(H2) exponent window 5/2 < p,q < inf"),
        "A2-d3": (lambda e: 2.25 <= e <= 4.0, "(A2) exponent window 9/4 <= p,q <= 4"),
        "A2-d2": (lambda e: 2.25 <= e < np.inf, "(A2) exponent window 9/4 <= p,q < inf"),
    }
    if window not in windows:
        raise ConfigError(f"unknown exponent window {window!r}; choose from {sorted(windows)}")
    ok, label = windows[window]
    for name, e in (("p", p), ("q", q)):
        if not ok(float(e)):
            raise ExponentWindowError(f"{name}={e} violates the {label}")


@dataclass
class WeightSet:
    params: WeightParams
    p: float
    q: float
    t: np.ndarray
    eta0: np.ndarray
    grad_bound: float
    ell: np.ndarray
    log_xi: np.ndarray          # (Nt+1, n) log xi, endpoints copied from neighbours
    alpha: np.ndarray           # (Nt+1, n)
    xi: np.ndarray
    beta: np.ndarray            # (Nt+1, n)
    gamma: np.ndarray
    beta_star: np.ndarray       # (Nt+1,)
    gamma_star: np.ndarray
    beta_hat: np.ndarray
    gamma_hat: np.ndarray
    log_mu1: np.ndarray
    log_mu2: np.ndarray
    flag_both: np.ndarray       # alpha/xi endpoint flags
    flag_start: np.ndarray      # beta/gamma endpoint flags

    @property
    def mu1(self):
        with np.errstate(over="ignore"):
            return np.exp(self.log_mu1)

    @property
    def mu2(self):
        with np.errstate(over="ignore"):
            return np.exp(self.log_mu2)


def _fill_flagged(arr, flags):
    out = np.array(arr, dtype=float, copy=True)
    good = np.flatnonzero(~flags)
    for k in np.flatnonzero(flags):
        nearest = good[np.argmin(np.abs(good - k))]
        out[k] = out[nearest]
    return out


def build_weights(mesh: Mesh, params: WeightParams, p=3.0, q=3.0, window="H2-d3") -> WeightSet:
    check_exponents(p, q, window)
    s, lam, T = params.s, params.lam, params.T
    t = params.times
    eta, c = build_eta0(mesh)
    eta_sup = 1.0

    flag_both = np.zeros(t.size, dtype=bool)
    flag_both[[0, -1]] = True
    flag_start = np.zeros(t.size, dtype=bool)
    flag_start[0] = True

    with np.errstate(divide="ignore"):
        tt = t * (T - t)
    tt = _fill_flagged(np.where(flag_both, np.nan, tt), flag_both)
    ell = np.where(t <= T / 2, t * (T - t), T**2 / 4)
    ell_f = _fill_flagged(np.where(flag_start, np.nan, ell), flag_start)

    num_alpha = np.exp(2 * lam * eta_sup) - np.exp(lam * eta)
    e_eta = np.exp(lam * eta)
    alpha = num_alpha[None, :] / tt[:, None]
    xi = e_eta[None, :] / tt[:, None]
    log_xi = lam * eta[None, :] - np.log(tt)[:, None]
    beta = num_alpha[None, :] / ell_f[:, None]
    gamma = e_eta[None, :] / ell_f[:, None]

    beta_star = beta.max(axis=1)
    gamma_star = gamma.min(axis=1)
    beta_hat = beta.min(axis=1)
    gamma_hat = gamma.max(axis=1)

    r_lo, r_hi = min(p, q), max(p, q)
    log_mu1 = s * beta_star / (2 * (r_lo - 2)) - np.log(gamma_star) / (r_hi - 2)
    log_mu2 = 3 * s * beta_star / (4 * (r_lo - 1)) - 9 * np.log(gamma_star) / (8 * (r_hi - 1))

    return WeightSet(
        params=params, p=float(p), q=float(q), t=t, eta0=eta, grad_bound=c, ell=ell,
        log_xi=log_xi, alpha=alpha, xi=xi, beta=beta, gamma=gamma,
        beta_star=beta_star, gamma_star=gamma_star, beta_hat=beta_hat, gamma_hat=gamma_hat,
        log_mu1=log_mu1, log_mu2=log_mu2, flag_both=flag_both, flag_start=flag_start,
    )


# name -> (builder of log factor, decays at flagged nodes?, flag attribute)
def _factor_table(ws: WeightSet):
    s = ws.params.s
    return {
        "exp_minus_2s_alpha": (lambda: -2 * s * ws.alpha, True, "flag_both"),
        "exp_minus_2s_beta": (lambda: -2 * s * ws.beta, True, "flag_start"),
        "exp_minus_2s_beta_star": (lambda: -2 * s * ws.beta_star, True, "flag_start"),
        "exp_minus_2s_beta_hat": (lambda: -2 * s * ws.beta_hat, True, "flag_start"),
        "xi": (lambda: ws.log_xi, False, "flag_both"),
        "gamma": (lambda: np.log(ws.gamma), False, "flag_start"),
        "gamma_star": (lambda: np.log(ws.gamma_star), False, "flag_start"),
        "gamma_hat": (lambda: np.log(ws.gamma_hat), False, "flag_start"),
        "control_weight": (lambda: -2 * s * ws.beta_hat + 9 * np.log(ws.gamma_hat), True, "flag_start"),
        "state_weight_y": (lambda: -2 * s * ws.beta_hat + 4 * np.log(ws.gamma_hat), True, "flag_start"),
        "state_weight_z": (lambda: -2 * s * ws.beta_hat + np.log(ws.gamma_hat), True, "flag_start"),
        "boundary_weight": (lambda: -2 * s * ws.beta_hat, True, "flag_start"),
        "source_weight_0": (lambda: s * ws.beta_star - 1.5 * np.log(ws.gamma_star), False, "flag_start"),
        "source_weight_1": (lambda: s * ws.beta_star - 2.0 * np.log(ws.gamma_star), False, "flag_start"),
        "mu1": (lambda: ws.log_mu1, False, "flag_start"),
        "mu2": (lambda: ws.log_mu2, False, "flag_start"),
    }


FACTOR_NAMES = (
    "exp_minus_2s_alpha", "exp_minus_2s_beta", "exp_minus_2s_beta_star", "exp_minus_2s_beta_hat",
    "xi", "gamma", "gamma_star", "gamma_hat", "control_weight", "state_weight_y",
    "state_weight_z", "boundary_weight", "source_weight_0", "source_weight_1", "mu1", "mu2",
)


def log_weight_factor(ws: WeightSet, name: str, power=1.0):
    """Natural log of ``factor**power``; ``-inf`` where a decaying factor is flagged."""
    table = _factor_table(ws)
    if name not in table:
        raise KeyError(f"unknown weight factor {name!r}; known: {', '.join(FACTOR_NAMES)}")
    build, decaying, flag_attr = table[name]
    logf = power * np.asarray(build(), dtype=float)
    flags = getattr(ws, flag_attr)
    if decaying and power > 0:
        logf = logf.copy()
        logf[flags] = -np.inf
    return logf


def weight_factor(ws: WeightSet, name: str, power=1.0):
    """``factor**power`` tabulated on the lattice (time-only factors are 1-D)."""
    with np.errstate(over="ignore", under="ignore"):
        return np.exp(log_weight_factor(ws, name, power))


def envelope_gap(ws: WeightSet):
    """Max deviation between the stored envelopes and grid min/max of beta, gamma."""
    return max(
        float(np.max(np.abs(ws.beta.max(axis=1) - ws.beta_star))),
        float(np.max(np.abs(ws.beta.min(axis=1) - ws.beta_hat))),
        float(np.max(np.abs(ws.gamma.min(axis=1) - ws.gamma_star))),
        float(np.max(np.abs(ws.gamma.max(axis=1) - ws.gamma_hat))),
    )
