"""Command-line surface: reproducible, file-emitting experiments.

Every subcommand resolves its configuration (including ``--beta critical``,
looked up at run time), executes one experiment, and writes

* a data file -- CSV with a header row, full 17-significant-digit decimals
  so reruns are byte-identical, or JSON with the same fields;
* a metadata sidecar ``<output>.meta.json`` -- the fully resolved config,
  the constants used, column units/definitions, wall time, and versions.

Exit codes: 0 success, 1 invalid configuration, 2 an internal convergence
diagnostic failed.  The default output directory is taken from the
PINLAB_OUTPUT_DIR environment variable when set.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from .lattice import CoarseGridError, TimeGrid
from .kernels import (ConvergenceError, inverse_laplace_diag, partition_curve,
                      partition_large_t, solve_pinned_diag)
from .spectral import (NoEigenvalueError, NonNormalizableError,
                       asymptotic_expansion_check, critical_beta,
                       eigenfunction, moment_scan, rep_multiplicity,
                       stationary_measure)
from .montecarlo import (LowESSError, endpoint_statistics,
                         estimate_escape_probability, limit_endpoint_cf,
                         sample_pinned_paths, sigma_distribution,
                         simulate_h_chain)

COMMANDS = ["critical-beta", "i-lambda", "eigenfunction", "heat-kernel",
            "partition", "asymptotics", "sigma-dist", "clt", "h-chain",
            "moments", "escape"]


class ConfigError(ValueError):
    """Invalid command-line configuration (exit code 1)."""


@dataclass
class RunConfig:
    """Fully resolved run configuration; echoed into every metadata sidecar."""

    command: str
    dim: int = 3
    beta: str = "critical"
    t: float = 100.0
    step: float = 0.01
    samples: int = 100000
    seed: int = 7
    box_radius: int = 10
    t_cut: float = 1e4
    lambdas: str = ""
    bins: int = 40
    k_moments: str = "1"
    method: str = "auto"
    window: float = 0.25
    output: str = ""
    format: str = ""

    def resolved_beta(self) -> float:
        if self.beta == "critical":
            return critical_beta(self.dim).beta_c
        try:
            return float(self.beta)
        except ValueError as exc:
            raise ConfigError(f"--beta must be a number or 'critical', got "
                              f"{self.beta!r}") from exc


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _write_table(path: str, columns, rows, fmt: str):
    if fmt == "csv":
        with open(path, "w") as fh:
            fh.write(",".join(columns) + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
    else:
        payload = [dict(zip(columns, [
            (int(v) if isinstance(v, (int, np.integer)) else float(v))
            for v in row])) for row in rows]
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _write_scalar(path: str, payload: dict):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def emit_plotdata(path: str, columns, rows, fmt: str = "csv",
                  sidecar: dict | None = None):
    """Write a tidy long-format table: one row per (abscissa, observed, predicted).

    This is the uniform output shape of the curve-producing commands, so any
    plotting tool can consume the files directly.
    """
    _write_table(path, columns, rows, fmt)
    if sidecar is not None:
        _write_scalar(path + ".meta.json", sidecar)


def _sidecar(config: RunConfig, constants: dict, columns: dict,
             wall: float) -> dict:
    import scipy

    return {
        "config": asdict(config),
        "constants": constants,
        "columns": columns,
        "wall_time_s": wall,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pinlab": __version__,
        },
    }


def _parse_lambdas(config: RunConfig):
    if config.lambdas:
        try:
            return [float(v) for v in config.lambdas.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad --lambdas list: {config.lambdas!r}") from exc
    return list(np.geomspace(1e-4, 0.1, 13))


# ----------------------------------------------------------------------
# experiment implementations
# ----------------------------------------------------------------------

def _run_critical_beta(config: RunConfig):
    tab = critical_beta(config.dim)
    payload = {
        "dim": tab.dim,
        "beta_c": tab.beta_c,
        "i0": None if math.isinf(tab.i0) else tab.i0,
        "e_d": tab.escape_prob,
        "c_d": None if math.isnan(tab.c_d) else tab.c_d,
        "d_d": None if math.isnan(tab.d_d) else tab.d_d,
        "note": tab.note or ("" if config.dim >= 3 else "recurrent"),
    }
    constants = {"beta_c": tab.beta_c, "i0": payload["i0"]}
    columns = {
        "beta_c": {"unit": "coupling", "definition": "1/I(0) = 2d e_d"},
        "i0": {"unit": "time", "definition": "diagonal free resolvent at 0"},
        "e_d": {"unit": "1", "definition": "never-return probability"},
        "c_d": {"unit": "mixed", "definition": "critical kernel tail constant"},
        "d_d": {"unit": "mixed", "definition": "partition tail constant"},
    }
    return payload, None, constants, columns, "json"


def _run_i_lambda(config: RunConfig):
    from .spectral import I_lambda

    lams = _parse_lambdas(config)
    rows = [(lam, I_lambda(lam, config.dim)) for lam in lams]
    columns = {
        "lam": {"unit": "1/time", "definition": "spectral parameter"},
        "i_lambda": {"unit": "time", "definition": "(2pi)^-d int dphi/(lam+Phi)"},
    }
    return None, (["lam", "i_lambda"], rows), {}, columns, "csv"


def _run_eigenfunction(config: RunConfig):
    beta = config.resolved_beta()
    pair = eigenfunction(beta, config.dim, box_radius=config.box_radius)
    reps, vals = pair.field.reps_array()
    rows = [tuple(r) + (rep_multiplicity(tuple(r)), v)
            for r, v in zip(reps, vals)]
    cols = [f"v{j+1}" for j in range(config.dim)] + ["multiplicity", "psi"]
    constants = {"beta": beta, "lambda0": pair.lam0,
                 "square_summable": pair.square_summable,
                 "tail_constant": pair.field.tail_constant}
    columns = {"v*": {"unit": "lattice", "definition": "sorted |coordinates|"},
               "psi": {"unit": "1", "definition": "eigenfunction, psi(0)=1"}}
    return None, (cols, rows), constants, columns, "csv"


def _heat_kernel_prediction(dim: int, beta: float):
    tab = critical_beta(dim)
    critical = dim >= 3 and abs(beta - tab.beta_c) <= 1e-9 * tab.beta_c
    if not critical:
        return None, None, None
    if dim == 3:
        return "c3_over_sqrt_t", (lambda t: tab.c_d / math.sqrt(t)), tab.c_d
    if dim == 4:
        return "c4_over_ln_t", (lambda t: tab.c_d / math.log(max(t, 1.001))), tab.c_d
    return "c5_const", (lambda t: tab.c_d), tab.c_d


def _run_heat_kernel(config: RunConfig):
    beta = config.resolved_beta()
    d = config.dim
    name, predict, c = _heat_kernel_prediction(d, beta)
    rows = []
    if config.method in ("auto", "volterra"):
        grid = TimeGrid(config.t, config.step)
        kg = solve_pinned_diag(beta, grid, d, refine_check=True)
        ts = grid.values
        keep = max(1, len(ts) // 2000)
        for i in range(0, len(ts), keep):
            if ts[i] <= 0.0:
                continue
            pred = predict(ts[i]) if predict else float("nan")
            ratio = kg.pbeta_diag[i] / pred if predict else float("nan")
            rows.append((ts[i], kg.pbeta_diag[i], pred, ratio))
    else:
        for t in np.geomspace(max(10.0, config.t / 1e3), config.t, 13):
            p = inverse_laplace_diag(beta, float(t), d)
            pred = predict(t) if predict else float("nan")
            rows.append((t, p, pred, p / pred if predict else float("nan")))
    cols = ["t", "p_beta", name or "prediction", "ratio"]
    constants = {"beta": beta, "tail_constant": c}
    columns = {"t": {"unit": "time", "definition": "elapsed time"},
               "p_beta": {"unit": "1", "definition": "pinned kernel p(t,0,0)"},
               cols[2]: {"unit": "1", "definition": "critical tail prediction"},
               "ratio": {"unit": "1", "definition": "p_beta / prediction"}}
    return None, (cols, rows), constants, columns, "csv"


def _run_partition(config: RunConfig):
    beta = config.resolved_beta()
    d = config.dim
    tab = critical_beta(d)
    critical = d >= 3 and abs(beta - tab.beta_c) <= 1e-9 * tab.beta_c
    if critical and d == 3:
        name, predict = "d3_sqrt_t", lambda t: tab.d_d * math.sqrt(t)
    elif critical and d == 4:
        name, predict = "d4_t_over_lnt", lambda t: tab.d_d * t / math.log(max(t, 1.001))
    elif critical and d >= 5:
        name, predict = "d5_t", lambda t: tab.d_d * t
    else:
        name, predict = "prediction", None
    rows = []
    if config.method in ("auto", "volterra"):
        grid = TimeGrid(config.t, config.step)
        zc = partition_curve(beta, grid, d)
        ts = grid.values
        keep = max(1, len(ts) // 2000)
        for i in range(0, len(ts), keep):
            if ts[i] <= 0.0:
                continue
            pred = predict(ts[i]) if predict else float("nan")
            rows.append((ts[i], zc.z_values[i], pred,
                         zc.z_values[i] / pred if predict else float("nan")))
    else:
        for t in np.geomspace(max(10.0, config.t / 1e3), config.t, 13):
            z = partition_large_t(beta, float(t), d)
            pred = predict(t) if predict else float("nan")
            rows.append((t, z, pred, z / pred if predict else float("nan")))
    cols = ["t", "Z", name, "ratio"]
    constants = {"beta": beta, "partition_constant": tab.d_d if critical else None}
    columns = {"t": {"unit": "time", "definition": "horizon"},
               "Z": {"unit": "1", "definition": "partition function at the origin"},
               name: {"unit": "1", "definition": "critical growth prediction"},
               "ratio": {"unit": "1", "definition": "Z / prediction"}}
    return None, (cols, rows), constants, columns, "csv"


def _run_asymptotics(config: RunConfig):
    lams = [l for l in _parse_lambdas(config) if 0 < l <= 0.1]
    rep = asymptotic_expansion_check(config.dim, lams)
    rows = list(zip(rep.lam, rep.diff, rep.reference, rep.ratio))
    constants = {"fitted_slope": rep.slope}
    columns = {"lam": {"unit": "1/time", "definition": "spectral parameter"},
               "diff": {"unit": "time", "definition": "I(0) - I(lam)"},
               "reference": {"unit": "time", "definition": "small-lam law"},
               "ratio": {"unit": "1", "definition": "diff / reference -> 1"}}
    return None, (["lam", "diff", "reference", "ratio"], rows), constants, columns, "csv"


def _run_sigma_dist(config: RunConfig):
    beta = config.resolved_beta()
    ens = sample_pinned_paths(config.t, config.samples, beta, config.dim,
                              config.seed, window=config.window)
    rep = sigma_distribution(ens, bins=config.bins)
    mids = 0.5 * (rep.bin_edges[1:] + rep.bin_edges[:-1])
    limit = rep.limit_density if rep.limit_density is not None \
        else np.full_like(mids, float("nan"))
    ks = rep.ks_stat if rep.ks_stat is not None else float("nan")
    rows = [(m, wd, ld, ks) for m, wd, ld in zip(mids, rep.weighted_density, limit)]
    cols = ["u_bin", "weighted_density", "limit_density", "ks_stat"]
    constants = {"beta": beta, "ess": rep.ess, "weighted_mean": rep.weighted_mean,
                 "z_estimate": ens.z_estimate,
                 "n_resamplings": ens.n_resamplings}
    columns = {"u_bin": {"unit": "1", "definition": "bin midpoint of sigma_t/t"},
               "weighted_density": {"unit": "1", "definition": "weighted histogram density"},
               "limit_density": {"unit": "1", "definition": "critical limit density"},
               "ks_stat": {"unit": "1", "definition": "weighted KS distance (scalar)"}}
    return None, (cols, rows), constants, columns, "csv"


def _run_clt(config: RunConfig):
    beta = config.resolved_beta()
    ens = sample_pinned_paths(config.t, config.samples, beta, config.dim,
                              config.seed, window=config.window)
    rep = endpoint_statistics(ens)
    limit = rep.limit_cf if rep.limit_cf is not None else \
        np.full_like(rep.phi_norms, float("nan"))
    rows = list(zip(rep.phi_norms, rep.ecf_axis, limit))
    cols = ["phi_norm", "ecf_real", "limit_cf"]
    constants = {"beta": beta, "ess": rep.ess,
                 "second_moment_ratios": {str(k): v for k, v in
                                          rep.second_moment_ratios.items()},
                 "max_offdiag_over_t": rep.max_offdiag_over_t,
                 "sup_cf_distance": rep.sup_cf_distance}
    columns = {"phi_norm": {"unit": "1", "definition": "|phi| along the first axis"},
               "ecf_real": {"unit": "1", "definition": "Re E w e^{i phi . x/sqrt(t)}"},
               "limit_cf": {"unit": "1", "definition": "Gaussian-mixture limit CF"}}
    return None, (cols, rows), constants, columns, "csv"


def _run_h_chain(config: RunConfig):
    beta = config.resolved_beta()
    pair = eigenfunction(beta, config.dim, box_radius=config.box_radius)
    run = simulate_h_chain(pair, config.t, config.seed)
    sm = stationary_measure(pair)
    rows = []
    for site, occ in sorted(run.occupation.items(),
                            key=lambda kv: -kv[1])[:2000]:
        rows.append(tuple(site) + (occ / run.clock, sm.prob(np.array(site))))
    cols = [f"x{j+1}" for j in range(config.dim)] + \
        ["occupation_fraction", "pi_predicted"]
    constants = {"beta": beta,
                 "origin_fraction": run.origin_fraction,
                 "origin_fraction_stderr": run.origin_fraction_stderr,
                 "pi0_predicted": 1.0 / sm.norm_sq,
                 "max_rate_error": run.max_rate_error,
                 "n_jumps": run.n_jumps,
                 "max_radius": run.max_radius,
                 "moment_k1_checkpoints": list(map(float, run.moment_checkpoints)),
                 "moment_k1_values": list(map(float, run.moment_k1))}
    columns = {"x*": {"unit": "lattice", "definition": "site coordinates"},
               "occupation_fraction": {"unit": "1", "definition": "time fraction at site"},
               "pi_predicted": {"unit": "1", "definition": "psi^2/||psi||^2"}}
    return None, (cols, rows), constants, columns, "csv"


def _run_moments(config: RunConfig):
    beta = config.resolved_beta()
    pair = eigenfunction(beta, config.dim, box_radius=config.box_radius)
    sm = stationary_measure(pair)
    try:
        ks = [int(v) for v in config.k_moments.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --k-moments: {config.k_moments!r}") from exc
    rows, slopes = [], {}
    for k in ks:
        scan = moment_scan(sm, k)
        slopes[str(k)] = {"increment_slope": scan.increment_slope,
                          "converges": bool(scan.converges)}
        for r, ps, inc in zip(scan.radii, scan.partial_sums,
                              scan.shell_increments):
            rows.append((k, int(r), ps, inc))
    cols = ["k", "radius", "partial_sum", "shell_increment"]
    constants = {"beta": beta, "slopes": slopes, "norm_sq": sm.norm_sq}
    columns = {"k": {"unit": "1", "definition": "moment order"},
               "radius": {"unit": "lattice", "definition": "sup-norm box radius"},
               "partial_sum": {"unit": "1", "definition": "sum |x|^k pi(x) over box"},
               "shell_increment": {"unit": "1", "definition": "shell contribution"}}
    return None, (cols, rows), constants, columns, "csv"


def _run_escape(config: RunConfig):
    est = estimate_escape_probability(config.dim, config.t_cut, config.samples,
                                      config.seed)
    payload = {"dim": est.dim, "t_cut": est.t_cut, "n": est.n,
               "estimate": est.value, "stderr": est.stderr,
               "bias_estimate": est.bias_estimate, "corrected": est.corrected,
               "note": est.note}
    columns = {"estimate": {"unit": "1",
                            "definition": "fraction avoiding 0 up to t_cut"},
               "bias_estimate": {"unit": "1",
                                 "definition": "P(T in (t_cut, inf)) tail model"}}
    return payload, None, {"beta_c_over_2d": critical_beta(config.dim).escape_prob
                           if config.dim >= 3 else 0.0}, columns, "json"


_RUNNERS = {
    "critical-beta": _run_critical_beta,
    "i-lambda": _run_i_lambda,
    "eigenfunction": _run_eigenfunction,
    "heat-kernel": _run_heat_kernel,
    "partition": _run_partition,
    "asymptotics": _run_asymptotics,
    "sigma-dist": _run_sigma_dist,
    "clt": _run_clt,
    "h-chain": _run_h_chain,
    "moments": _run_moments,
    "escape": _run_escape,
}


def run(config: RunConfig) -> int:
    """Execute one experiment; returns the process exit code."""
    if config.command not in _RUNNERS:
        raise ConfigError(f"unknown command {config.command!r}")
    if config.dim < 1:
        raise ConfigError("--dim must be >= 1")
    if config.samples < 1 or config.seed < 0:
        raise ConfigError("--samples must be >= 1 and --seed >= 0")
    if config.step <= 0 or config.t <= 0:
        raise ConfigError("--t and --step must be positive")
    t0 = time.time()
    payload, table, constants, columns, default_fmt = _RUNNERS[config.command](config)
    fmt = config.format or default_fmt
    if fmt not in ("csv", "json"):
        raise ConfigError(f"--format must be csv or json, got {config.format!r}")
    outdir = os.environ.get("PINLAB_OUTPUT_DIR", ".")
    path = config.output or os.path.join(
        outdir, f"{config.command}-d{config.dim}.{fmt}")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    if table is not None:
        _write_table(path, table[0], table[1], fmt)
    else:
        _write_scalar(path, payload)
    sidecar = _sidecar(config, constants, columns, wall=time.time() - t0)
    _write_scalar(path + ".meta.json", sidecar)
    print(path)
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pinlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--dim", type=int, default=3)
        sp.add_argument("--beta", default="critical",
                        help="coupling strength, or 'critical'")
        sp.add_argument("--t", type=float, default=None,
                        help="time horizon (grid t_max / MC horizon / chain length)")
        sp.add_argument("--step", type=float, default=None, help="grid step")
        sp.add_argument("--samples", type=int, default=None)
        sp.add_argument("--seed", type=int, default=7)
        sp.add_argument("--box-radius", type=int, default=None)
        sp.add_argument("--t-cut", type=float, default=1e4)
        sp.add_argument("--lambdas", default="",
                        help="comma-separated spectral parameters")
        sp.add_argument("--bins", type=int, default=40)
        sp.add_argument("--k-moments", default="1")
        sp.add_argument("--method", choices=["auto", "volterra", "laplace"],
                        default="auto")
        sp.add_argument("--window", type=float, default=0.25)
        sp.add_argument("--output", default="")
        sp.add_argument("--format", choices=["csv", "json"], default="")
    return p


_DEFAULTS = {
    "heat-kernel": {"t": 1000.0, "step": 0.1},
    "partition": {"t": 1000.0, "step": 0.1},
    "sigma-dist": {"t": 400.0, "samples": 1000000},
    "clt": {"t": 400.0, "samples": 1000000},
    "h-chain": {"t": 1e5, "box_radius": 12},
    "moments": {"box_radius": 15},
    "escape": {"samples": 1000000},
    "eigenfunction": {"box_radius": 10},
}


def config_from_args(args) -> RunConfig:
    d = vars(args).copy()
    cmd = d.pop("command")
    defaults = _DEFAULTS.get(cmd, {})
    merged = {}
    for fname in ("dim", "beta", "t", "step", "samples", "seed", "box_radius",
                  "t_cut", "lambdas", "bins", "k_moments", "method", "window",
                  "output", "format"):
        v = d.get(fname)
        if v is None:
            v = defaults.get(fname, getattr(RunConfig, fname))
        merged[fname] = v
    return RunConfig(command=cmd, **merged)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        config = config_from_args(args)
        return run(config)
    except (ConfigError, NoEigenvalueError, NonNormalizableError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 1
    except (ConvergenceError, CoarseGridError, LowESSError) as exc:
        print(f"error: convergence diagnostic failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
