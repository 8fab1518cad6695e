"""Command line harness: ``insenscontrol <command> [options]``.

Commands
--------
simulate        semilinear cascade for the configured sources (plus optional
                manufactured-solution convergence tables)
synthesize      penalised HUM control and its report
verify          insensitivity check and Carleman / observability ratios
weights-report  weight tables and hypothesis checks
sweep           ratio reports over ``--sweep section.key=v1,v2,...``

Exit codes: 0 success, 2 invalid configuration or data, 3 numerical
failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, load_config, parse_sweep
from .control import (
    HUMSolver,
    carleman_ratio_report,
    observability_ratio_report,
    synthesize_nonlinear_control,
)
from .errors import ConfigError, InsensError, NumericalError, OutputError
from .geometry import Mesh
from .io import node_table, read_csv_rows, write_csv, write_json
from .nonlinear import fixed_point_solve
from .sentinel import insensitivity_check, make_perturbations
from .solvers import ControlField
from .verification import spatial_convergence, temporal_convergence
from .weights import FACTOR_NAMES, build_weights, envelope_gap, log_weight_factor

log = logging.getLogger("insenscontrol")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
FD_TOL = 1e-13


class Context:
    """Configuration plus the objects every command needs."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.hash = cfg.digest()
        self.mesh = Mesh(cfg.mesh)
        self.wp = cfg.weights
        self.N = int(self.wp.time_steps)
        self.dt = self.wp.dt
        self.times = self.wp.times
        self.potentials = cfg.potentials.build(self.mesh)

    def weights(self, params=None):
        nl = self.cfg.nonlinear
        return build_weights(self.mesh, params or self.wp, nl.p, nl.q, nl.window)

    def loads(self):
        return (self.cfg.source.load(self.mesh, self.times), self.cfg.z_source.load(self.mesh, self.times))

    def csv(self, name, columns, rows, title=""):
        return write_csv(self.out / name, columns, rows, self.hash, title)

    def json(self, name, payload, title=""):
        return write_json(self.out / name, payload, self.hash, title)


# ----------------------------------------------------------------------
# commands


def cmd_simulate(ctx: Context):
    cfg = ctx.cfg
    f0, f1 = ctx.loads()
    res = fixed_point_solve(None, None, f0, f1, cfg.nonlinear, ctx.potentials, ctx.N, ctx.dt, ctx.mesh,
                            linear=cfg.simulate.linear)
    cols = ("n", "t", "node", "r", "theta", "value")
    ctx.csv("trajectory_y.csv", cols, node_table(ctx.mesh, res.cascade.y.nodes, ctx.times), "state y")
    ctx.csv("trajectory_z.csv", cols, node_table(ctx.mesh, res.cascade.z.nodes, ctx.times), "adjoint state z")
    ctx.csv("fixed_point_log.csv", ("iteration", "change", "ratio"), res.log_rows(), "Picard iterations")
    summary = {
        "energy": res.cascade.y.energy,
        "fixed_point": {
            "iterations": res.iterations, "converged": res.converged, "residual_y": res.residual_y,
            "residual_z": res.residual_z, "data_scale": res.data_scale, "linear": cfg.simulate.linear,
        },
        "norms": {
            "y_l2": res.cascade.y.l2_norm(), "z_l2": res.cascade.z.l2_norm(), "z0": res.cascade.z0_norm(),
        },
    }
    if cfg.simulate.refinements:
        rows, orders = spatial_convergence(cfg.simulate.refinements, cfg.mesh)
        ctx.csv("convergence_space.csv", ("radial_cells", "angular_cells", "h", "error", "order"),
                [(*row, orders[k - 1] if k else float("nan")) for k, row in enumerate(rows)],
                "manufactured solution, spatial refinement")
        summary["spatial_orders"] = list(orders)
    if cfg.simulate.time_refinements:
        rows, orders = temporal_convergence(cfg.simulate.time_refinements, cfg.mesh)
        ctx.csv("convergence_time.csv", ("time_steps", "error", "order"),
                [(*row, orders[k - 1] if k else float("nan")) for k, row in enumerate(rows)],
                "manufactured solution, time refinement")
        summary["temporal_orders"] = list(orders)
    ctx.json("simulate_report.json", summary, "simulate")
    return EXIT_OK


def _synthesize(ctx: Context):
    cfg = ctx.cfg
    ws = ctx.weights()
    f0, f1 = ctx.loads()
    solver = HUMSolver(ctx.mesh, ws, ctx.potentials, cfg.control.preconditioner)
    control, _cascade, report, _ = solver.solve(f0, f1, cfg.control.cg_tol, cfg.control.cg_max_iters)
    nl_report = None
    if cfg.control.nonlinear:
        if np.any(f1):
            raise ConfigError("the nonlinear control loop supports a y source only")
        control, _, nl_report = synthesize_nonlinear_control(
            ctx.mesh, ws, f0, cfg.nonlinear, ctx.potentials, cfg.control.outer_tol, cfg.control.max_outer,
            cfg.control.cg_tol, cfg.control.cg_max_iters, solver=solver)
    return control, report, nl_report


def _write_synthesis(ctx: Context, control, report, nl_report):
    target = ctx.cfg.control.z0_target
    payload = {"report": report.as_dict(), "z0_target": target, "z0_below_target": report.z0_relative <= target}
    if nl_report is not None:
        payload["nonlinear"] = nl_report.as_dict()
        payload["nonlinear"]["z0_below_target"] = nl_report.z0_relative <= target
    ctx.json("synthesis_report.json", payload, "synthesize")
    omega = np.flatnonzero(ctx.mesh.omega)
    ctx.csv("control.csv", ("n", "t", "node", "r", "theta", "value"),
            node_table(ctx.mesh, control.values, ctx.times, omega), "control v on omega")
    ctx.csv("cg_history.csv", ("iteration", "residual"), enumerate(report.residual_history), "CG residuals")


def cmd_synthesize(ctx: Context):
    control, report, nl_report = _synthesize(ctx)
    _write_synthesis(ctx, control, report, nl_report)
    target = ctx.cfg.control.z0_target
    achieved = nl_report.z0_relative if nl_report is not None else report.z0_relative
    if achieved > target:
        log.error("z(0) relative norm %.3e exceeds the target %.1e", achieved, target)
        return EXIT_NUMERICAL
    return EXIT_OK


def _read_control(ctx: Context, path):
    values = np.zeros((ctx.N + 1, ctx.mesh.n_nodes))
    try:
        for row in read_csv_rows(path):
            values[int(row["n"]), int(row["node"])] = float(row["value"])
    except (KeyError, ValueError, IndexError) as exc:
        raise ConfigError(f"{path}: malformed control CSV ({exc})") from exc
    return ControlField(values, ctx.mesh)


def _ratio_rows(key, value, reports):
    for rep in reports:
        yield (key, value, rep.kind, rep.s, rep.lam, rep.samples, rep.evaluated, rep.skipped,
               rep.max_ratio, rep.median_ratio, rep.log10_max, rep.log10_median)


RATIO_COLUMNS = ("sweep_key", "sweep_value", "kind", "s", "lam", "samples", "evaluated", "skipped",
                 "max_ratio", "median_ratio", "log10_max", "log10_median")


def _ratio_reports(ctx: Context, cfg: ExperimentConfig):
    mesh = Mesh(cfg.mesh)
    nl = cfg.nonlinear
    ws = build_weights(mesh, cfg.weights, nl.p, nl.q, nl.window)
    pots = cfg.potentials.build(mesh)
    kw = {"potentials": pots, "seed": cfg.run.seed, "threads": cfg.run.threads}
    n = cfg.verify.ratio_samples
    return [carleman_ratio_report(n, ws, mesh, **kw), observability_ratio_report(n, ws, mesh, **kw)]


def cmd_verify(ctx: Context, control_path=None, sweep=None):
    cfg = ctx.cfg
    if control_path is not None:
        control = _read_control(ctx, control_path)
    else:
        control, report, nl_report = _synthesize(ctx)
        _write_synthesis(ctx, control, report, nl_report)
    f0, _ = ctx.loads()
    perts = make_perturbations(ctx.mesh, cfg.verify.perturbations, cfg.run.seed, ctx.dt)
    scale = abs(cfg.source.amplitude) if cfg.source.kind != "zero" else 1.0
    tau = cfg.verify.tau_factor * (scale if scale > 0 else 1.0)
    # sentinel differences need state solves well below the FD signal
    params = dataclasses.replace(cfg.nonlinear, fixed_point_tol=min(cfg.nonlinear.fixed_point_tol, FD_TOL))
    sr = insensitivity_check(control, f0, perts, tau, params, ctx.mesh, ctx.N, ctx.dt, ctx.potentials,
                             linear=cfg.verify.linear, threads=cfg.run.threads)
    rows = [(r.label, r.d1_fd, r.d2_fd, r.d1_dual, r.d2_dual, r.base_d1_fd, r.base_d2_fd, r.base_d1_dual,
             r.base_d2_dual) for r in sr.rows]
    ctx.csv("sentinel_table.csv", ("perturbation", "d1_fd", "d2_fd", "d1_dual", "d2_dual", "base_d1_fd",
                                   "base_d2_fd", "base_d1_dual", "base_d2_dual"), rows,
            "sentinel derivatives, controlled vs v=0")
    payload = sr.as_dict()
    payload["reduction_target"] = cfg.verify.reduction_target
    payload["reduction_met"] = sr.reduction >= cfg.verify.reduction_target
    ctx.json("sentinel_report.json", payload, "verify")

    ratio_rows = list(_ratio_rows("", "", _ratio_reports(ctx, cfg)))
    if sweep is not None:
        key, values = sweep
        for v in values:
            ratio_rows += list(_ratio_rows(key, v, _ratio_reports(ctx, cfg.replace(key, v))))
    ctx.csv("ratio_report.csv", RATIO_COLUMNS, ratio_rows, "Carleman and observability ratios")
    if not payload["reduction_met"]:
        log.error("derivative reduction %.3e below the target %.1e", sr.reduction, cfg.verify.reduction_target)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_weights_report(ctx: Context):
    ws = ctx.weights()
    t = ws.t
    cols = ["t"]
    data = []
    for name in FACTOR_NAMES:
        lf = np.asarray(log_weight_factor(ws, name)) / np.log(10.0)
        if lf.ndim == 1:
            lo = hi = lf
        else:
            lo, hi = lf.min(axis=1), lf.max(axis=1)
        cols += [f"{name}_log10_min", f"{name}_log10_max"]
        data += [lo, hi]
    rows = ([t[n]] + [col[n] for col in data] for n in range(t.size))
    ctx.csv("weights.csv", cols, rows, "log10 min/max of each weight over the grid")
    mesh = ctx.mesh
    masks = ("omega", "omega_prime", "omega_second", "observation")
    ctx.csv("mesh.csv", ("node", "r", "theta", "mass", "eta0") + masks,
            ((k, mesh.node_r[k], mesh.node_theta[k], mesh.mass[k], ws.eta0[k],
              *(int(getattr(mesh, m)[k]) for m in masks)) for k in range(mesh.n_nodes)), "mesh nodes")
    ctx.json("weights_report.json", {
        "grad_bound": ws.grad_bound, "envelope_gap": envelope_gap(ws),
        "p": ws.p, "q": ws.q, "window": ctx.cfg.nonlinear.window,
        "s": ws.params.s, "lam": ws.params.lam, "T": ws.params.T, "time_steps": ws.params.time_steps,
    }, "weights-report")
    return EXIT_OK


def cmd_sweep(ctx: Context, sweep):
    if sweep is None:
        raise ConfigError("sweep needs --sweep section.key=v1,v2,...")
    key, values = sweep
    rows = []
    for v in values:
        rows += list(_ratio_rows(key, v, _ratio_reports(ctx, ctx.cfg.replace(key, v))))
    ctx.csv("ratio_sweep.csv", RATIO_COLUMNS, rows, f"ratio reports over {key}")
    return EXIT_OK


# ----------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="insenscontrol", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML experiment file (defaults if omitted)")
    common.add_argument("--out", type=Path, help="output directory (overrides [run] out)")
    common.add_argument("--seed", type=int, help="random seed (overrides [run] seed)")
    common.add_argument("--threads", type=int, help="worker threads (overrides [run] threads)")
    common.add_argument("--sweep", help="section.key=v1,v2,... parameter sweep")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub.add_parser("simulate", parents=[common], help="simulate the semilinear cascade")
    sub.add_parser("synthesize", parents=[common], help="synthesize the insensitizing control")
    p = sub.add_parser("verify", parents=[common], help="check insensitivity and inequality ratios")
    p.add_argument("--control", type=Path, help="control CSV written by synthesize (otherwise recomputed)")
    sub.add_parser("weights-report", parents=[common], help="tabulate the weight functions")
    sub.add_parser("sweep", parents=[common], help="ratio reports over a parameter sweep")
    return parser


def _apply_overrides(cfg: ExperimentConfig, args):
    run = cfg.run
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.threads is not None:
        changes["threads"] = args.threads
    if args.out is not None:
        changes["out"] = str(args.out)
    if changes:
        cfg = dataclasses.replace(cfg, run=dataclasses.replace(run, **changes))
    return cfg


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    cfg = _apply_overrides(load_config(args.config), args)
    sweep = parse_sweep(args.sweep) if args.sweep else None
    if sweep is not None:
        for v in sweep[1]:
            cfg.replace(sweep[0], v)          # validate every sweep point up front
    ctx = Context(cfg, Path(cfg.run.out))
    log.info("insenscontrol %s, config %s, output %s", __version__, ctx.hash, ctx.out)
    if args.command == "simulate":
        return cmd_simulate(ctx)
    if args.command == "synthesize":
        return cmd_synthesize(ctx)
    if args.command == "verify":
        return cmd_verify(ctx, args.control, sweep)
    if args.command == "weights-report":
        return cmd_weights_report(ctx)
    return cmd_sweep(ctx, sweep)


def main(argv=None):
    try:
        return run(argv)
    except InsensError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return OutputError.exit_code
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return NumericalError.exit_code


if __name__ == "__main__":
    sys.exit(main())
