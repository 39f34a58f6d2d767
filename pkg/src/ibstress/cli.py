"""Command-line front end: config parsing, dispatch, and provenance-stamped output.

Exit codes: 0 success, 2 usage error (bad flags, bad config values, missing
matrix file), 3 divergence abort (too many non-finite trials).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analytic import (
    correlation_quadrature,
    stress_expectation,
    stress_from_correlations,
    stochvol_correction,
)
from .errors import DimensionError, DivergenceError, ToleranceError
from .experiments import (
    SweepResult,
    fig2_gamma_sweep,
    fig3_nonlinearity_sweep,
    figA1_eigen_correlation,
    variance_law_check,
)
from .model import ModelParams, NonlinearSpec, sample_gaussian_matrix, zero_diagonal
from .simulate import (
    Observable,
    SimConfig,
    estimate_observable,
    matrix_generator,
    paired_stochvol_delta,
    resolve_steps,
)
from . import report


class UsageError(Exception):
    """Invalid invocation; maps to exit code 2."""


MATRIX_SOURCES = ("gaussian", "gaussian-zero-diag", "identity", "file")
SWEEP_COMMANDS = ("fig2", "fig3", "figA1", "variance-check")


@dataclass
class RunConfig:
    command: str
    params: ModelParams
    sim: SimConfig
    matrix_source: str
    matrix_path: str | None
    output_path: str | None
    output_format: str
    threads: int
    plot: bool
    extras: dict = field(default_factory=dict)


def _build_parser(suppress: bool = False) -> argparse.ArgumentParser:
    """The CLI grammar.  With ``suppress=True`` every default is removed so a
    second parse reveals which flags were given explicitly (config-file values
    must not override explicit flags)."""

    def d(value):
        return argparse.SUPPRESS if suppress else value

    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("model")
    g.add_argument("--n", type=int, default=d(10), help="network size N")
    g.add_argument("--sigma", type=float, default=d(1.0), help="per-bank volatility")
    g.add_argument("--beta", type=float, default=d(0.1), help="inverse memory timescale")
    g.add_argument("--gamma", type=float, default=d(0.5), help="interaction strength")
    g.add_argument("--volvol", type=float, default=d(0.0), help="volatility of volatility")
    g = common.add_argument_group("simulation")
    g.add_argument("--t", type=float, default=d(1.0), help="horizon")
    g.add_argument("--dt", type=float, default=d(None),
                   help="step size (default min(t/500, 0.05/beta))")
    g.add_argument("--trials", type=int, default=d(1000), help="Monte Carlo trials")
    g.add_argument("--seed", type=int, default=d(12345), help="root seed (64-bit)")
    g.add_argument("--stochastic-vol", action="store_true", default=d(False),
                   help="evolve volatility as a lognormal process")
    g.add_argument("--antithetic", action="store_true", default=d(False),
                   help="pair trials with mirrored noise")
    g.add_argument("--nl-sensitivity", type=float, default=d(None),
                   help="exposure nonlinearity sensitivity k (enables the factor)")
    g.add_argument("--nl-cap", type=float, default=d(1.0),
                   help="exposure nonlinearity cap l")
    g.add_argument("--nl-maturity", type=float, default=d(0.1),
                   help="bond maturity label for the nonlinearity")
    g = common.add_argument_group("matrix")
    g.add_argument("--matrix", choices=MATRIX_SOURCES, default=d("gaussian"),
                   help="interaction matrix source")
    g.add_argument("--matrix-path", default=d(None),
                   help="path to a whitespace-delimited N x N matrix (with --matrix file)")
    g = common.add_argument_group("output")
    g.add_argument("--output", default=d(None),
                   help="output file (default: print to stdout)")
    g.add_argument("--format", choices=("csv", "json"), default=d("csv"),
                   help="output format")
    g.add_argument("--no-plot", action="store_true", default=d(False),
                   help="skip the PNG figure next to sweep outputs")
    g.add_argument("--threads", type=int,
                   default=d(int(os.environ.get("IBSTRESS_THREADS", "1"))),
                   help="worker threads (results are independent of this)")
    g.add_argument("--config", default=d(None),
                   help="JSON config file; explicit flags take precedence")

    parser = argparse.ArgumentParser(
        prog="ibstress",
        description="Simulation and analytics for a minimal interbank "
                    "stress-propagation model.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    kw = dict(parents=[common], formatter_class=argparse.ArgumentDefaultsHelpFormatter)

    p = sub.add_parser("simulate", help="Monte Carlo estimate of an observable", **kw)
    p.add_argument("--observable", choices=[o.value for o in Observable],
                   default=d(Observable.STRESS.value))
    sub.add_parser("expansion", help="closed-form stress expectation breakdown", **kw)
    p = sub.add_parser("quadrature",
                       help="quadrature oracle vs the closed-form expansion", **kw)
    p.add_argument("--tol", type=float, default=d(1e-10), help="per-entry quadrature tolerance")
    p = sub.add_parser("fig2", help="interaction-correction scaling sweep", **kw)
    p.add_argument("--gammas", type=float, nargs="+",
                   default=d([0.5, 1.0, 2.0, 3.0, 4.0]))
    p.add_argument("--n-matrices", type=int, default=d(1000))
    p = sub.add_parser("fig3", help="exposure-nonlinearity sweep", **kw)
    p.add_argument("--cells", nargs="+",
                   default=d(["0.5:1", "0.5:3", "1:1", "1:3", "2:1", "2:3"]),
                   help="nonlinearity cells as sensitivity:cap[:maturity]; pick "
                        "sensitivity ~ 1/(sigma*sqrt(t)) for a visible effect")
    p = sub.add_parser("figA1", help="eigenvalue-statistics correlation sweep", **kw)
    p.add_argument("--n-matrices", type=int, default=d(1000))
    p = sub.add_parser("variance-check", help="ensemble variance law check", **kw)
    p.add_argument("--n-matrices", type=int, default=d(10000))
    p.add_argument("--halvings", type=int, default=d(1),
                   help="also check t/2, t/4, ... (one row per horizon)")
    p.add_argument("--mc-route", action="store_true", default=d(False),
                   help="add a slow Monte Carlo route row per horizon")
    sub.add_parser("stochvol-check",
                   help="paired stochastic-volatility correction estimate", **kw)
    return parser


def _merge_config_file(ns: argparse.Namespace, explicit: set[str]) -> None:
    path = Path(ns.config)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        values = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(values, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    known = set(vars(ns)) - {"command", "config"}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise UsageError(f"unknown config key: {key}")
        if dest not in explicit:
            setattr(ns, dest, value)


def _parse_cells(raw_cells) -> list[NonlinearSpec]:
    cells = []
    for raw in raw_cells:
        parts = str(raw).split(":")
        if len(parts) not in (2, 3):
            raise UsageError(f"cell {raw!r} must look like sensitivity:cap[:maturity]")
        try:
            sens, cap = float(parts[0]), float(parts[1])
            maturity = float(parts[2]) if len(parts) == 3 else 0.1
            cells.append(NonlinearSpec(sens, cap, maturity))
        except ValueError as exc:
            raise UsageError(f"bad cell {raw!r}: {exc}") from exc
    return cells


def parse_config(argv) -> RunConfig:
    """Parse flags (and the optional JSON config file) into a validated RunConfig."""
    parser = _build_parser(suppress=False)
    ns = parser.parse_args(argv)
    explicit = set(vars(_build_parser(suppress=True).parse_args(argv)))
    if getattr(ns, "config", None):
        _merge_config_file(ns, explicit)

    try:
        params = ModelParams(
            n_banks=int(ns.n), sigma=float(ns.sigma), beta=float(ns.beta),
            gamma=float(ns.gamma), volvol=float(ns.volvol),
        )
        nonlinear = None
        if ns.nl_sensitivity is not None:
            nonlinear = NonlinearSpec(
                float(ns.nl_sensitivity), float(ns.nl_cap), float(ns.nl_maturity)
            )
        sim = SimConfig(
            horizon=float(ns.t),
            n_trials=int(ns.trials),
            seed=int(ns.seed),
            dt=None if ns.dt is None else float(ns.dt),
            use_stochastic_vol=bool(ns.stochastic_vol),
            nonlinear=nonlinear,
            antithetic=bool(ns.antithetic),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

    if ns.matrix_path is not None and ns.matrix != "file":
        raise UsageError("--matrix-path is only valid with --matrix file")
    if ns.matrix == "file" and ns.matrix_path is None:
        raise UsageError("--matrix file requires --matrix-path")
    threads = int(ns.threads)
    if threads < 1:
        raise UsageError(f"--threads must be >= 1, got {threads}")

    extras = {}
    if ns.command == "simulate":
        extras["observable"] = Observable(ns.observable)
    elif ns.command == "quadrature":
        extras["tol"] = float(ns.tol)
    elif ns.command == "fig2":
        extras["gammas"] = [float(g) for g in ns.gammas]
        extras["n_matrices"] = int(ns.n_matrices)
    elif ns.command == "fig3":
        extras["cells"] = _parse_cells(ns.cells)
    elif ns.command == "figA1":
        extras["n_matrices"] = int(ns.n_matrices)
    elif ns.command == "variance-check":
        extras["n_matrices"] = int(ns.n_matrices)
        extras["halvings"] = int(ns.halvings)
        extras["mc_route"] = bool(ns.mc_route)
        if extras["halvings"] < 1:
            raise UsageError("--halvings must be >= 1")

    return RunConfig(
        command=ns.command, params=params, sim=sim,
        matrix_source=ns.matrix, matrix_path=ns.matrix_path,
        output_path=ns.output, output_format=ns.format,
        threads=threads, plot=not ns.no_plot, extras=extras,
    )


def _load_matrix(rc: RunConfig) -> np.ndarray:
    n = rc.params.n_banks
    if rc.matrix_source == "identity":
        return np.eye(n)
    if rc.matrix_source == "file":
        path = Path(rc.matrix_path)
        if not path.exists():
            raise UsageError(f"matrix file not found: {path}")
        try:
            m = np.loadtxt(path, ndmin=2)
        except ValueError as exc:
            raise UsageError(f"matrix file {path} is not numeric: {exc}") from exc
        if m.shape != (n, n):
            raise UsageError(
                f"matrix file {path} has shape {m.shape}, expected ({n}, {n})"
            )
        if not np.isfinite(m).all():
            raise UsageError(f"matrix file {path} contains non-finite entries")
        return m
    sampled = sample_gaussian_matrix(n, matrix_generator(rc.sim.seed, 0))
    if rc.matrix_source == "gaussian-zero-diag":
        return zero_diagonal(sampled)
    return sampled


def _base_metadata(rc: RunConfig) -> dict:
    n_steps, dt = resolve_steps(rc.sim, rc.params)
    meta = {
        "command": rc.command,
        "version": __version__,
        "n_banks": rc.params.n_banks,
        "sigma": rc.params.sigma,
        "beta": rc.params.beta,
        "gamma": rc.params.gamma,
        "volvol": rc.params.volvol,
        "horizon": rc.sim.horizon,
        "dt": dt,
        "n_steps": n_steps,
        "n_trials": rc.sim.n_trials,
        "seed": rc.sim.seed,
        "use_stochastic_vol": rc.sim.use_stochastic_vol,
        "antithetic": rc.sim.antithetic,
        "matrix_source": rc.matrix_source,
    }
    if rc.matrix_path:
        meta["matrix_path"] = str(rc.matrix_path)
    if rc.sim.nonlinear is not None:
        meta["nonlinear"] = {
            "sensitivity": rc.sim.nonlinear.sensitivity,
            "cap": rc.sim.nonlinear.cap,
            "maturity": rc.sim.nonlinear.maturity,
        }
    return meta


def _emit_record(rc: RunConfig, record: dict, metadata: dict) -> None:
    text = (
        report.record_to_json(record, metadata)
        if rc.output_format == "json"
        else report.record_to_csv(record, metadata)
    )
    if rc.output_path:
        report.write_output(text, rc.output_path)
    else:
        sys.stdout.write(text)


def _emit_sweep(rc: RunConfig, result: SweepResult) -> None:
    result.metadata.setdefault("command", rc.command)
    result.metadata.setdefault("version", __version__)
    text = (
        report.sweep_to_json(result)
        if rc.output_format == "json"
        else report.sweep_to_csv(result)
    )
    if rc.output_path:
        report.write_output(text, rc.output_path)
        if rc.plot:
            report.render_sweep_figure(result, Path(rc.output_path).with_suffix(".png"))
    else:
        sys.stdout.write(text)


def run(rc: RunConfig) -> int:
    """Execute a parsed run; returns the process exit code."""
    started = time.perf_counter()
    if rc.command == "simulate":
        est = estimate_observable(
            rc.params, _load_matrix(rc), rc.sim, rc.extras["observable"],
            threads=rc.threads,
        )
        meta = _base_metadata(rc)
        meta["observable"] = rc.extras["observable"].value
        _emit_record(rc, {
            "mean": est.mean, "std_error": est.std_error,
            "n_trials": est.n_trials, "n_diverged": est.n_diverged,
        }, meta)
    elif rc.command == "expansion":
        breakdown = stress_expectation(rc.params, _load_matrix(rc), rc.sim.horizon)
        _emit_record(rc, {
            "order1": breakdown.order1,
            "order_gamma": breakdown.order_gamma,
            "order_gamma2": breakdown.order_gamma2,
            "total": breakdown.total,
        }, _base_metadata(rc))
    elif rc.command == "quadrature":
        m = _load_matrix(rc)
        t = rc.sim.horizon
        corr = correlation_quadrature(rc.params, m, t, tol=rc.extras["tol"])
        exact = stress_from_correlations(corr, rc.params, t)
        expansion = stress_expectation(rc.params, m, t).total
        record = {
            "stress_quadrature": exact,
            "stress_expansion": expansion,
            "gap": exact - expansion,
            "tol": rc.extras["tol"],
        }
        if rc.output_format == "json":
            record["ws"] = corr.ws.tolist()
            record["ss"] = corr.ss.tolist()
        _emit_record(rc, record, _base_metadata(rc))
    elif rc.command == "stochvol-check":
        m = _load_matrix(rc)
        t = rc.sim.horizon
        est = paired_stochvol_delta(rc.params, m, rc.sim, threads=rc.threads)
        printed = stochvol_correction(rc.params, m, t)
        nu = rc.params.volvol
        gamma_free = (
            rc.params.sigma**2 * (math.expm1(nu * nu * t) / (nu * nu) - t)
            if nu > 0 else 0.0
        )
        _emit_record(rc, {
            "mc_mean": est.mean,
            "mc_stderr": est.std_error,
            "n_trials": est.n_trials,
            "n_diverged": est.n_diverged,
            "theory_printed": printed,
            "theory_contracted": printed / (rc.params.n_banks - 1),
            "gamma_free_delta": gamma_free,
        }, _base_metadata(rc))
    elif rc.command == "fig2":
        _emit_sweep(rc, fig2_gamma_sweep(
            rc.params, rc.extras["gammas"], rc.sim.horizon, rc.sim,
            rc.extras["n_matrices"], threads=rc.threads,
        ))
    elif rc.command == "fig3":
        matrix = None if rc.matrix_source == "gaussian" else _load_matrix(rc)
        _emit_sweep(rc, fig3_nonlinearity_sweep(
            rc.params, rc.extras["cells"], rc.sim, matrix=matrix, threads=rc.threads,
        ))
    elif rc.command == "figA1":
        _emit_sweep(rc, figA1_eigen_correlation(
            rc.params.n_banks, rc.extras["n_matrices"], rc.sim,
        ))
    elif rc.command == "variance-check":
        parts = [
            variance_law_check(
                rc.params, rc.sim.horizon / 2**i, rc.extras["n_matrices"], rc.sim,
                mc_route=rc.extras["mc_route"], threads=rc.threads,
            )
            for i in range(rc.extras["halvings"])
        ]
        merged = parts[0]
        for extra in parts[1:]:
            merged.axis += extra.axis
            merged.mc_mean += extra.mc_mean
            merged.mc_stderr += extra.mc_stderr
            merged.theory += extra.theory
            merged.n_diverged += extra.n_diverged
        merged.metadata["horizons"] = merged.axis.copy()
        _emit_sweep(rc, merged)
    else:  # unreachable: argparse restricts the choices
        raise UsageError(f"unknown command {rc.command!r}")
    print(
        f"[ibstress] {rc.command} finished in {time.perf_counter() - started:.2f}s",
        file=sys.stderr,
    )
    return 0


def main(argv=None) -> int:
    try:
        rc = parse_config(sys.argv[1:] if argv is None else argv)
        return run(rc)
    except UsageError as exc:
        print(f"ibstress: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, DimensionError) as exc:
        print(f"ibstress: error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"ibstress: divergence abort: {exc}", file=sys.stderr)
        return 3
    except ToleranceError as exc:
        print(f"ibstress: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
