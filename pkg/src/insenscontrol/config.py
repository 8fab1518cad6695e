"""Experiment configuration (TOML) and source specifications.

A configuration file has the tables ``[mesh]``, ``[weights]``,
``[nonlinear]``, ``[potentials]``, ``[source]``, ``[z_source]``,
``[control]``, ``[verify]``, ``[simulate]`` and ``[run]``; every key is
optional and missing keys take the defaults below.  Example::

    [mesh]
    radial_cells = 32
    angular_cells = 48
    g_arcs = [["outer", 0.0, 3.141592653589793]]

    [weights]
    s = 2.0
    lam = 1.5

    [source]
    kind = "angular-bump"
    amplitude = 1e-3

Source kinds (``[source]`` drives ``y``, ``[z_source]`` drives ``z``):

``zero``
    no source.
``angular-bump``
    ``amplitude * chi(t) * b(r) * ((1 + cos(theta - theta0)) / 2)^2`` with
    the radial bump ``b = sin^2(pi (r - lo) / (hi - lo))`` on ``radial``
    and the ramp ``chi = sin^2(pi/2 * clip((t - start) / ramp, 0, 1))``.
``radial-bump``
    the same without the angular factor.
``csv``
    bulk source density read from ``path`` (columns ``n,node,value``;
    missing entries are zero).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import ClassVar

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError, OutputError
from .geometry import Mesh, MeshConfig
from .nonlinear import NonlinearityParams
from .solvers import PotentialPair
from .weights import WeightParams

SOURCE_KINDS = ("zero", "angular-bump", "radial-bump", "csv")


@dataclass(frozen=True)
class SourceSpec:
    kind: str = "zero"
    amplitude: float = 1e-3
    start: float = 0.5
    ramp: float = 0.25
    radial: tuple = (1.3, 1.75)
    theta0: float = 1.0
    path: str = ""

    def __post_init__(self):
        if self.kind not in SOURCE_KINDS:
            raise ConfigError(f"unknown source kind {self.kind!r}; choose from {SOURCE_KINDS}")
        lo, hi = (float(x) for x in self.radial)
        if not lo < hi:
            raise ConfigError(f"source radial interval must satisfy lo < hi, got {self.radial}")
        object.__setattr__(self, "radial", (lo, hi))
        if not self.ramp > 0:
            raise ConfigError(f"source ramp must be positive, got {self.ramp}")
        if self.kind == "csv" and not self.path:
            raise ConfigError("csv source needs a path")

    def density(self, mesh: Mesh, times):
        """Bulk source density on the lattice, shape ``(len(times), n_nodes)``."""
        shape = (len(times), mesh.n_nodes)
        if self.kind == "zero":
            return np.zeros(shape)
        if self.kind == "csv":
            return _read_source_csv(Path(self.path), shape)
        lo, hi = self.radial
        r = mesh.node_r
        inside = (r > lo) & (r < hi)
        bump = np.where(inside, np.sin(np.pi * (r - lo) / (hi - lo)) ** 2, 0.0)
        if self.kind == "angular-bump":
            bump = bump * (0.5 + 0.5 * np.cos(mesh.node_theta - self.theta0)) ** 2
        t = np.asarray(times, dtype=float)
        chi = np.where(t < self.start, 0.0, np.sin(0.5 * np.pi * np.clip((t - self.start) / self.ramp, 0, 1)) ** 2)
        return self.amplitude * chi[:, None] * bump[None, :]

    def load(self, mesh: Mesh, times):
        """Load vectors ``W_Omega f`` (bulk sources only)."""
        return self.density(mesh, times) * mesh.w_bulk


def _read_source_csv(path: Path, shape):
    out = np.zeros(shape)
    try:
        with path.open(newline="") as fh:
            rows = csv.DictReader(row for row in fh if not row.startswith("#"))
            for row in rows:
                n, node = int(row["n"]), int(row["node"])
                if not (0 <= n < shape[0] and 0 <= node < shape[1]):
                    raise ConfigError(f"{path}: entry (n={n}, node={node}) outside the lattice {shape}")
                out[n, node] = float(row["value"])
    except OSError as exc:
        raise OutputError(f"cannot read source file {path}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: malformed source CSV ({exc}); expected columns n,node,value") from exc
    return out


@dataclass(frozen=True)
class PotentialSpec:
    R: float = 0.0
    R_gamma: float = 0.0

    def build(self, mesh: Mesh):
        return PotentialPair.constant(mesh, self.R, self.R_gamma)


@dataclass(frozen=True)
class ControlOptions:
    cg_tol: float = 1e-10
    cg_max_iters: int = 2000
    preconditioner: str = "fourier-schur"
    z0_target: float = 1e-6
    nonlinear: bool = False
    outer_tol: float = 1e-8
    max_outer: int = 20

    def __post_init__(self):
        if not 0 < self.cg_tol < 1:
            raise ConfigError(f"cg_tol must be in (0, 1), got {self.cg_tol}")
        if self.cg_max_iters < 1:
            raise ConfigError(f"cg_max_iters must be >= 1, got {self.cg_max_iters}")
        if self.preconditioner not in ("fourier-schur", "jacobi"):
            raise ConfigError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass(frozen=True)
class VerifyOptions:
    perturbations: int = 10
    tau_factor: float = 1e-4
    ratio_samples: int = 100
    linear: bool = False
    reduction_target: float = 1e3

    def __post_init__(self):
        if self.perturbations < 1 or self.ratio_samples < 1:
            raise ConfigError("perturbations and ratio_samples must be >= 1")
        if not self.tau_factor > 0:
            raise ConfigError(f"tau_factor must be positive, got {self.tau_factor}")


@dataclass(frozen=True)
class SimulateOptions:
    linear: bool = False
    refinements: tuple = ()
    time_refinements: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "refinements", tuple(int(x) for x in self.refinements))
        object.__setattr__(self, "time_refinements", tuple(int(x) for x in self.time_refinements))
        if len(self.refinements) == 1 or len(self.time_refinements) == 1:
            raise ConfigError("refinement lists need at least two entries")


@dataclass(frozen=True)
class RunOptions:
    seed: int = 0
    threads: int = 1
    out: str = "results"

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")


@dataclass(frozen=True)
class ExperimentConfig:
    mesh: MeshConfig = field(default_factory=MeshConfig)
    weights: WeightParams = field(default_factory=WeightParams)
    nonlinear: NonlinearityParams = field(default_factory=NonlinearityParams)
    potentials: PotentialSpec = field(default_factory=PotentialSpec)
    source: SourceSpec = field(default_factory=lambda: SourceSpec(kind="angular-bump"))
    z_source: SourceSpec = field(default_factory=SourceSpec)
    control: ControlOptions = field(default_factory=ControlOptions)
    verify: VerifyOptions = field(default_factory=VerifyOptions)
    simulate: SimulateOptions = field(default_factory=SimulateOptions)
    run: RunOptions = field(default_factory=RunOptions)

    SECTIONS: ClassVar[dict] = {
        "mesh": MeshConfig, "weights": WeightParams, "nonlinear": NonlinearityParams,
        "potentials": PotentialSpec, "source": SourceSpec, "z_source": SourceSpec,
        "control": ControlOptions, "verify": VerifyOptions, "simulate": SimulateOptions, "run": RunOptions,
    }

    @classmethod
    def from_dict(cls, data, base_dir: Path | None = None):
        unknown = set(data) - set(cls.SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kw = {}
        for name, typ in cls.SECTIONS.items():
            section = dict(data.get(name, {}))
            if not isinstance(data.get(name, {}), dict):
                raise ConfigError(f"section [{name}] must be a table")
            if typ is MeshConfig:
                kw[name] = MeshConfig.from_dict(section)
                continue
            known = {f.name for f in dataclasses.fields(typ)}
            bad = set(section) - known
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            if name == "source":
                section.setdefault("kind", "angular-bump")
            if name in ("source", "z_source") and section.get("path") and base_dir is not None:
                p = Path(section["path"])
                section["path"] = str(p if p.is_absolute() else base_dir / p)
            try:
                kw[name] = typ(**section)
            except TypeError as exc:
                raise ConfigError(f"invalid [{name}] section: {exc}") from exc
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def validate(self):
        for spec in (self.source, self.z_source):
            if spec.kind == "csv" and not Path(spec.path).is_file():
                raise ConfigError(f"source file {spec.path} does not exist")

    def to_dict(self):
        out = {}
        for name in self.SECTIONS:
            obj = getattr(self, name)
            out[name] = {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        return out

    def digest(self):
        """Short SHA-256 of the canonical JSON form.

        The output directory and the thread count do not change results and
        are left out.
        """
        d = self.to_dict()
        d["run"] = {k: v for k, v in d["run"].items() if k not in ("out", "threads")}
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def replace(self, dotted_key, value):
        """Copy with ``section.key`` set to ``value`` (used by sweeps)."""
        try:
            section, key = dotted_key.split(".")
        except ValueError:
            raise ConfigError(f"sweep key must look like section.key, got {dotted_key!r}") from None
        if section not in self.SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        d = self.to_dict()
        if key not in d[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        d[section][key] = value
        return ExperimentConfig.from_dict(d)


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def load_config(path) -> ExperimentConfig:
    """Parse a TOML experiment file (``None`` gives the defaults)."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} does not exist") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
    except OSError as exc:
        raise OutputError(f"cannot read {path}: {exc}") from exc
    return ExperimentConfig.from_dict(data, base_dir=path.parent)


def parse_sweep(text):
    """``"section.key=v1,v2"`` to ``(key, [values])`` with numeric parsing."""
    if "=" not in text:
        raise ConfigError(f"sweep must look like section.key=v1,v2,..., got {text!r}")
    key, vals = text.split("=", 1)
    out = []
    for tok in vals.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            out.append(int(tok))
        except ValueError:
            try:
                out.append(float(tok))
            except ValueError:
                out.append(tok)
    if not out:
        raise ConfigError(f"sweep {text!r} has no values")
    return key.strip(), out
