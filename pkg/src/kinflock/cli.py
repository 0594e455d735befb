"""Command-line entry point: ``kinflock SUBCOMMAND [CONFIG] [--key value ...]``.

Config files are INI: sections ``model``, ``grid``, ``run`` plus one section
per subcommand.  A bare override ``--key value`` resolves first in the
subcommand's section, then in ``model``, ``grid``, ``run``; ``--section.key``
is always unambiguous.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .errors import ConfigError, NumericalError
from .homogeneous import VDensity, VGrid, cumulants_to_moments, evolve, moment_trajectory, moments_to_cumulants
from .model import HerdingFunction, InteractionKernel, ModelParams
from .pde import DensityField, PhaseGrid, picard_iterate, solve, write_snapshot, x_cell_average_cos
from .particles import SdeConfig, sample_ensemble, simulate

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
SUBCOMMANDS = ("homogeneous", "solve-pde", "picard", "particles", "meanfield", "stationary", "perturb")
COMMON = ("model", "grid", "run")

# ---------------------------------------------------------------------------
# schema: key -> (parser, default, rule, message)


def _float(s: str) -> float:
    x = float(s)
    if not math.isfinite(x):
        raise ValueError("not finite")
    return x


def _int(s: str) -> int:
    return int(s)


def _bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("not a boolean")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(_float(t) for t in s.split(",") if t.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(t) for t in s.split(",") if t.strip())


def _choice(*opts: str) -> Callable[[str], str]:
    def parse(s: str) -> str:
        s = s.strip().lower()
        if s not in opts:
            raise ValueError(f"must be one of {', '.join(opts)}")
        return s
    return parse


def _pos(x):
    return x > 0


def _dt(x):
    return 0 < x <= 0.1


def _amp(x):
    return abs(x) < 1


SCHEMA: dict[str, dict[str, tuple]] = {
    "model": {
        "sigma": (_float, 0.25, _pos, "sigma must be > 0"),
        "herding": (_choice("rational", "tabulated"), "rational", None, ""),
        "beta": (_float, 1.0, _pos, "beta must be > 0"),
        "table_u": (_floats, (), None, ""),
        "table_g": (_floats, (), None, ""),
        "kernel": (_choice("vonmises", "cosine", "uniform"), "vonmises", None, ""),
        "kappa": (_float, 4.0, _pos, "kappa must be > 0"),
        "lambda": (_float, 0.5, None, ""),
        "k": (_int, 1, lambda k: k >= 1, "k must be >= 1"),
    },
    "grid": {
        "n_x": (_int, 64, lambda n: n >= 16 and n & (n - 1) == 0, "n_x must be a power of 2 and >= 16"),
        "n_v": (_int, 256, lambda n: n >= 16, "n_v must be >= 16"),
    },
    "run": {
        "seed": (_int, 0, lambda s: s >= 0, "seed must be >= 0"),
        "record_every": (_int, 10, lambda r: r >= 1, "record_every must be >= 1"),
        "snapshots": (_bool, False, None, ""),
    },
    "homogeneous": {
        "m1": (_float, 0.5, None, ""),
        "b0": (_float, 0.25, _pos, "b0 must be > 0"),
        "t": (_float, 30.0, _pos, "t must be > 0"),
        "dt": (_float, 1e-2, _dt, "dt must be in (0, 0.1]"),
        "order": (_int, 6, lambda k: k >= 2, "order must be >= 2"),
    },
    "solve-pde": {
        "m1": (_float, 0.5, None, ""),
        "b0": (_float, 0.25, _pos, "b0 must be > 0"),
        "x_amp": (_float, 0.5, _amp, "x_amp must be < 1 in magnitude"),
        "t": (_float, 5.0, _pos, "t must be > 0"),
        "dt": (_float, 5e-3, _dt, "dt must be in (0, 0.1]"),
    },
    "picard": {
        "iters": (_int, 6, lambda n: n >= 2, "iters must be >= 2"),
        "m1": (_float, 0.3, None, ""),
        "shear": (_float, 0.4, None, ""),
        "b0": (_float, 0.25, _pos, "b0 must be > 0"),
        "x_amp": (_float, 0.5, _amp, "x_amp must be < 1 in magnitude"),
        "t": (_float, 1.0, _pos, "t must be > 0"),
        "dt": (_float, 1e-2, _dt, "dt must be in (0, 0.1]"),
    },
    "particles": {
        "n": (_int, 2000, lambda n: n >= 2, "n must be >= 2"),
        "seeds": (_int, 20, lambda n: n >= 1, "seeds must be >= 1"),
        "m1": (_float, 0.5, None, ""),
        "v_var": (_float, 0.25, _pos, "v_var must be > 0"),
        "x_amp": (_float, 0.0, _amp, "x_amp must be < 1 in magnitude"),
        "t": (_float, 20.0, _pos, "t must be > 0"),
        "dt": (_float, 1e-2, lambda x: 0 < x <= 0.05, "dt must be in (0, 0.05]"),
        "force_path": (_choice("fourier", "direct"), "fourier", None, ""),
    },
    "meanfield": {
        "ns": (_ints, (500, 2000, 8000), lambda ns: len(ns) >= 2 and min(ns) >= 2,
               "ns needs at least two sizes, each >= 2"),
        "seeds": (_int, 20, lambda n: n >= 1, "seeds must be >= 1"),
        "m1": (_float, 0.5, None, ""),
        "v_var": (_float, 0.25, _pos, "v_var must be > 0"),
        "x_amp": (_float, 0.5, _amp, "x_amp must be < 1 in magnitude"),
        "t": (_float, 5.0, _pos, "t must be > 0"),
        "dt": (_float, 2e-3, lambda x: 0 < x <= 0.05, "dt must be in (0, 0.05]"),
    },
    "stationary": {
        "control_mean": (_float, 0.3, None, ""),
        "levels": (_int, 2, lambda n: 1 <= n <= 4, "levels must be in [1, 4]"),
    },
    "perturb": {
        "lambdas": (_floats, (0.05, 0.1, 0.2), lambda ls: len(ls) >= 1 and all(0 < x <= 0.5 for x in ls),
                    "lambdas must lie in (0, 0.5]"),
        "k": (_int, 1, lambda k: k >= 1, "k must be >= 1"),
        "perturbation": (_float, 0.3, _amp, "perturbation must be < 1 in magnitude"),
        "dt": (_float, 1e-2, _dt, "dt must be in (0, 0.1]"),
        "tol": (_float, 1e-8, _pos, "tol must be > 0"),
        "max_steps": (_int, 50_000, lambda n: n >= 1, "max_steps must be >= 1"),
    },
}


def default_config_text() -> str:
    """INI text holding every default."""
    cp = configparser.ConfigParser()
    for sec, keys in SCHEMA.items():
        cp[sec] = {k: _format_value(spec[1]) for k, spec in keys.items()}
    buf = []
    for sec in cp.sections():
        buf.append(f"[{sec}]")
        buf.extend(f"{k} = {v}" for k, v in cp[sec].items())
        buf.append("")
    return "\n".join(buf)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]]
    params: ModelParams

    def section(self, name: str) -> dict[str, Any]:
        return self.values[name]

    def echo(self) -> dict[str, dict[str, Any]]:
        return {s: {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()} for s, d in self.values.items()}


def _read_raw(path: str | os.PathLike | None) -> dict[str, dict[str, str]]:
    if path is None:
        return {}
    cp = configparser.ConfigParser(interpolation=None)
    with open(path, encoding="utf-8") as fh:  # OSError propagates: distinct from validation failures
        try:
            cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError([f"{path}: {exc.message if hasattr(exc, 'message') else exc}"]) from None
    return {s: dict(cp[s]) for s in cp.sections()}


def _resolve_override(key: str, subcommand: str | None) -> tuple[str, str] | None:
    if "." in key:
        sec, _, k = key.partition(".")
        return (sec, k) if sec in SCHEMA and k in SCHEMA[sec] else None
    order = ([subcommand] if subcommand else []) + list(COMMON)
    for sec in order:
        if key in SCHEMA[sec]:
            return sec, key
    return None


def build_config(raw: dict[str, dict[str, str]], overrides: dict[str, str] | None = None,
                 subcommand: str | None = None) -> RunConfig:
    """Typed, validated config from raw INI sections plus flag overrides."""
    errors: list[str] = []
    raw = {s: dict(d) for s, d in raw.items()}
    for sec, d in raw.items():
        if sec not in SCHEMA:
            errors.append(f"{sec}: unknown section")
            continue
        for k in d:
            if k not in SCHEMA[sec]:
                errors.append(f"{sec}.{k}: unknown key")
    for key, val in (overrides or {}).items():
        where = _resolve_override(key, subcommand)
        if where is None:
            errors.append(f"--{key}: unknown key")
            continue
        raw.setdefault(where[0], {})[where[1]] = val
    values: dict[str, dict[str, Any]] = {}
    for sec, keys in SCHEMA.items():
        values[sec] = {}
        for k, (parse, default, rule, msg) in keys.items():
            text = raw.get(sec, {}).get(k)
            if text is None:
                v = default
            else:
                try:
                    v = parse(text)
                except ValueError as exc:
                    errors.append(f"{sec}.{k}: cannot parse {text!r} ({exc})")
                    continue
            if rule is not None and not rule(v):
                errors.append(f"{sec}.{k}: {msg}")
                continue
            values[sec][k] = v
    params = None
    if not errors:
        params, perr = _model_params(values["model"])
        errors.extend(perr)
    if errors:
        raise ConfigError(errors)
    return RunConfig(values, params)


def _model_params(m: dict[str, Any]) -> tuple[ModelParams | None, list[str]]:
    errors = []
    try:
        if m["herding"] == "rational":
            h = HerdingFunction.rational(m["beta"])
        else:
            h = HerdingFunction.tabulated(m["table_u"], m["table_g"])
    except ConfigError as exc:
        errors.extend(f"model.herding: {e}" for e in exc.errors)
        h = None
    kern = None
    if m["kernel"] == "cosine" and not 0 < m["lambda"] < 1:
        errors.append("model.lambda: lambda in (0,1) required for φ ≥ ε > 0")
    else:
        try:
            kern = {"vonmises": lambda: InteractionKernel.von_mises(m["kappa"]),
                    "cosine": lambda: InteractionKernel.cosine(m["lambda"], m["k"]),
                    "uniform": InteractionKernel.uniform}[m["kernel"]]()
        except ConfigError as exc:
            errors.extend(f"model.kernel: {e}" for e in exc.errors)
    if errors:
        return None, errors
    return ModelParams(m["sigma"], h, kern), []


def validate_config(path: str | os.PathLike, overrides: dict[str, str] | None = None,
                    subcommand: str | None = None) -> RunConfig:
    """Read and validate ``path``.

    Raises ``OSError`` if the file cannot be read and :class:`ConfigError`
    (with one ``section.key: rule`` entry per problem) if it is invalid.
    """
    return build_config(_read_raw(path), overrides, subcommand)


# ---------------------------------------------------------------------------
# output


class RunWriter:
    def __init__(self, out: Path):
        self.out = out
        self.outputs: list[str] = []
        self.checks: dict[str, bool] = {}
        self.summary: dict[str, Any] = {}

    def csv(self, name: str, header, rows) -> None:
        with open(self.out / name, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_cell(x) for x in r])
        self.outputs.append(name)

    def snapshot(self, name: str, f: DensityField) -> None:
        write_snapshot(self.out / name, f)
        self.outputs.append(name)

    def check(self, name: str, ok) -> None:
        self.checks[name] = bool(ok)


def _cell(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_manifest(out: Path, manifest: dict) -> Path:
    path = out / "manifest.json"
    fd, tmp = tempfile.mkstemp(dir=out, prefix=".manifest-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _pool_map(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, jobs))
    return [fn(j) for j in jobs]


# ---------------------------------------------------------------------------
# subcommands


def _vgrid(cfg: RunConfig, mean: float, n_v: int | None = None) -> VGrid:
    return VGrid.for_model(cfg.params.sigma, mean, n_v or cfg.values["grid"]["n_v"])


def _pgrid(cfg: RunConfig, mean: float) -> PhaseGrid:
    g = cfg.values["grid"]
    return PhaseGrid(g["n_x"], _vgrid(cfg, mean))


def cmd_homogeneous(cfg: RunConfig, w: RunWriter, workers: int) -> None:
    s = cfg.section("homogeneous")
    p, every = cfg.params, cfg.values["run"]["record_every"]
    f0 = VDensity.gaussian(_vgrid(cfg, s["m1"]), s["m1"], s["b0"])
    c = np.zeros(s["order"])  # Gaussian: cumulants beyond the second vanish
    c[0], c[1] = s["m1"], s["b0"]
    s0 = cumulants_to_moments(c)
    times, states = moment_trajectory(s0, p, s["t"], s["dt"], record_every=every)
    rows = []
    for t, m in zip(times, states):
        cum = moments_to_cumulants(m).cumulants
        rows.append((t, *m[1:], *cum[1:]))
    k = s["order"]
    w.csv("moments.csv", ["t"] + [f"M{i}" for i in range(1, k + 1)] + [f"C{i}" for i in range(2, k + 1)], rows)
    traj = evolve(f0, p, s["t"], s["dt"], record_every=every)
    w.csv("trajectory.csv", traj.columns, traj.rows)
    S = traj.column("S")
    w.check("mass_conserved", abs(traj.final.mass() - 1.0) <= 1e-10)
    w.check("entropy_nonincreasing", np.all(np.diff(S) <= 64 * np.finfo(float).eps * max(1.0, np.abs(S).max())))
    w.check("production_nonnegative", np.all(traj.column("D_S") >= 0))
    w.summary.update(final_M1_moments=float(states[-1][1]), final_M1_pde=float(traj.final.mean))


def cmd_solve_pde(cfg: RunConfig, w: RunWriter, workers: int) -> None:
    s = cfg.section("solve-pde")
    g = _pgrid(cfg, s["m1"])
    f0 = DensityField.gaussian(g, s["m1"], s["b0"], x_cell_average_cos(g, s["x_amp"]))
    res = solve(f0, cfg.params, s["t"], s["dt"], record_every=cfg.values["run"]["record_every"])
    w.csv("timeseries.csv", res.columns, res.rows())
    if cfg.values["run"]["snapshots"]:
        w.snapshot("final.kflk", res.final)
    w.check("mass_conserved", max(abs(m - 1.0) for m in res.mass) <= 1e-10)
    w.check("nonnegative", res.final.values.min() >= 0)
    w.summary.update(final_mean_velocity=res.mean_velocity[-1])


def cmd_picard(cfg: RunConfig, w: RunWriter, workers: int) -> None:
    s = cfg.section("picard")
    g = _pgrid(cfg, abs(s["m1"]) + abs(s["shear"]))
    means = s["m1"] + s["shear"] * np.sin(2 * np.pi * g.x)
    f0 = DensityField.local_gaussian(g, means, s["b0"], x_cell_average_cos(g, s["x_amp"]))
    rep = picard_iterate(f0, cfg.params, s["t"], s["dt"], s["iters"])
    w.csv("picard.csv", ["n", "xi", "ratio"], rep.rows())
    if cfg.values["run"]["snapshots"]:
        w.snapshot("final_iterate.kflk", rep.final_iterate)
    w.check("gaps_finite", np.all(np.isfinite(rep.gaps)))
    w.check("contracting_tail", rep.gaps[-1] < rep.gaps[-2])
    w.summary.update(gaps=rep.gaps.tolist())


def _particles_job(args):
    p, s, seed = args
    cfg = SdeConfig(dt=s["dt"], t_final=s["t"], seed=seed, force_path=s["force_path"])
    e0 = sample_ensemble(s["n"], s["m1"], s["v_var"], seed, s["x_amp"])
    res = simulate(e0, p, cfg, record_every=max(1, int(round(0.1 / s["dt"]))))
    return seed, list(res.rows()), res.final


def cmd_particles(cfg: RunConfig, w: RunWriter, workers: int) -> None:
    s = cfg.section("particles")
    base = cfg.values["run"]["seed"]
    jobs = [(cfg.params, s, base + i) for i in range(s["seeds"])]
    results = _pool_map(_particles_job, jobs, workers)
    w.csv("timeseries.csv", ["seed", "t", "mean_v", "var_v", "order_param"],
          [(seed, *r) for seed, rows, _ in results for r in rows])
    finals = [(seed, float(e.velocities.mean())) for seed, _, e in results]
    w.csv("final.csv", ["seed", "mean_v"], finals)
    w.check("finite", all(np.all(np.isfinite(e.velocities)) for _, _, e in results))
    band = 3 * math.sqrt(cfg.params.sigma / s["n"])
    w.summary.update(seeds_within_band=sum(abs(abs(m) - 1) <= band for _, m in finals), band=band)


def cmd_meanfield(cfg: RunConfig, w: RunWriter, workers: int) -> None:
    from .meanfield import InitialData, meanfield_experiment
    s = cfg.section("meanfield")
    base = cfg.values["run"]["seed"]
    init = InitialData(s["m1"], s["v_var"], s["x_amp"])
    rep = meanfield_experiment(cfg.params, s["ns"], [base + i for i in range(s["seeds"])], s["t"], s["dt"],
                               _pgrid(cfg, s["m1"]), init, workers=workers)
    w.csv("runs.csv", rep.columns, rep.rows)
    w.csv("summary.csv", ["N", "gap", "w1", "martingale_rms"],
          [(n, rep.gap_by_n[n], rep.w1_by_n[n], rep.martingale_rms_by_n[n]) for n in s["ns"]])
    w.check("finite", all(np.all(np.isfinite(r[2:])) for r in rep.rows))
    w.summary.update(gap_order=rep.gap_order, martingale_order=rep.martingale_order)


def cmd_stationary(cfg: RunConfig, w: RunWriter, workers: int) -> None:
    from .stationary import residual_scan
    s = cfg.section("stationary")
    g = _pgrid(cfg, 1.0)
    rows = []
    for _ in range(s["levels"]):
        r = residual_scan(cfg.params, g, s["control_mean"])
        rows.append((g.n_x, g.vgrid.n_points, r.zero, r.plus, r.minus, r.control))
        g = g.refined()
    w.csv("residuals.csv", ["n_x", "n_v", "zero", "plus", "minus", "control"], rows)
    w.check("control_exceeds_branches", all(r[5] > max(r[2:5]) for r in rows))
    w.check("plus_minus_symmetric", all(abs(r[3] - r[4]) <= 1e-12 for r in rows))


def _perturb_job(args):
    from .stationary import perturbed_steady_state
    p, g, s = args
    return perturbed_steady_state(p, g, s["dt"], s["tol"], s["max_steps"], s["perturbation"])


def cmd_perturb(cfg: RunConfig, w: RunWriter, workers: int) -> None:
    from .stationary import PerturbationResult
    s = cfg.section("perturb")
    g = _pgrid(cfg, 1.0)
    base = cfg.params
    kernels = [InteractionKernel.uniform()] + [InteractionKernel.cosine(lam, s["k"]) for lam in s["lambdas"]]
    jobs = [(ModelParams(base.sigma, base.herding, k), g, s) for k in kernels]
    results = _pool_map(_perturb_job, jobs, workers)
    w.csv("perturb.csv", PerturbationResult.columns, [r.row() for r in results])
    w.csv("alpha.csv", ["x"] + [f"alpha_lambda_{r.lam!r}" for r in results],
          zip(g.x, *[r.alpha for r in results]))
    if cfg.values["run"]["snapshots"]:
        for i, r in enumerate(results):
            w.snapshot(f"steady_{i}.kflk", r.steady)
    h = base.herding
    w.check("alpha_constant", all(r.alpha_variation <= 1e-6 for r in results))
    w.check("alpha_fixed_point", all(abs(h(r.alpha.mean()) - r.alpha.mean()) <= 1e-4 for r in results))
    baseline = results[0].deviation_continuum
    w.summary.update(baseline=baseline, max_ratio=max(r.deviation_continuum / baseline for r in results[1:]))


COMMANDS: dict[str, Callable[[RunConfig, RunWriter, int], None]] = {
    "homogeneous": cmd_homogeneous,
    "solve-pde": cmd_solve_pde,
    "picard": cmd_picard,
    "particles": cmd_particles,
    "meanfield": cmd_meanfield,
    "stationary": cmd_stationary,
    "perturb": cmd_perturb,
}


# ---------------------------------------------------------------------------
# entry point


@dataclass
class CliArgs:
    command: str
    config: str | None
    out: str | None
    threads: int | None
    overrides: dict[str, str]


def parse_args(argv: list[str]) -> CliArgs:
    """Split ``SUBCOMMAND [CONFIG] [--out DIR] [--threads N] [--key value ...]``.

    Override values are taken verbatim, so negative numbers need no quoting.
    """
    if not argv or argv[0] not in SUBCOMMANDS:
        make_parser().parse_args(argv)  # prints help/usage and exits
        raise ConfigError([f"unknown subcommand {argv[0]!r}"])
    command, rest = argv[0], argv[1:]
    if any(a in ("-h", "--help") for a in rest):
        make_parser().parse_args([command, "--help"])
    config = out = threads = None
    overrides: dict[str, str] = {}
    i = 0
    while i < len(rest):
        tok = rest[i]
        if tok.startswith("--") and len(tok) > 2:
            key, eq, val = tok[2:].partition("=")
            if not eq:
                if i + 1 >= len(rest):
                    raise ConfigError([f"--{key}: missing value"])
                val = rest[i + 1]
                i += 1
            if key == "out":
                out = val
            elif key == "threads":
                try:
                    threads = int(val)
                except ValueError:
                    raise ConfigError([f"--threads: cannot parse {val!r}"]) from None
            else:
                overrides[key if "." in key else key.replace("-", "_")] = val
        elif config is None:
            config = tok
        else:
            raise ConfigError([f"unexpected argument {tok!r}"])
        i += 1
    return CliArgs(command, config, out, threads, overrides)


def _threads(arg: int | None) -> int:
    if arg is not None:
        n = arg
    else:
        env = os.environ.get("KFLK_THREADS", "").strip()
        try:
            n = int(env) if env else 1
        except ValueError:
            raise ConfigError([f"KFLK_THREADS: cannot parse {env!r}"]) from None
    if n < 1:
        raise ConfigError(["threads must be >= 1"])
    return n


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kinflock", description="Kinetic flocking model experiments.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("config", nargs="?", help="INI config file (defaults apply if omitted)")
        sp.add_argument("--out", help="output directory (default ./out/<timestamp>)")
        sp.add_argument("--threads", type=int, help="worker cap (fallback: KFLK_THREADS)")
        sp.add_argument("overrides", nargs="*", metavar="--KEY VALUE", help="override any config key")
    return ap


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else list(argv))
        workers = _threads(args.threads)
        cfg = validate_config(args.config, args.overrides, args.command) if args.config else \
            build_config({}, args.overrides, args.command)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out) if args.out else Path("out") / datetime.now().strftime("%Y%m%dT%H%M%S")
    out.mkdir(parents=True, exist_ok=True)
    writer = RunWriter(out)
    started = datetime.now(timezone.utc).isoformat()
    start = time.perf_counter()
    status, code, error = "ok", EXIT_OK, None
    try:
        COMMANDS[args.command](cfg, writer, workers)
        if not all(writer.checks.values()):
            failed = [k for k, v in writer.checks.items() if not v]
            status, code, error = "invariant_violation", EXIT_NUMERICAL, f"failed checks: {', '.join(failed)}"
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        status, code, error = "numerical_failure", EXIT_NUMERICAL, f"{type(exc).__name__}: {exc}"
    if error:
        print(f"numerical failure: {error}", file=sys.stderr)
    write_manifest(out, {
        "subcommand": args.command,
        "config": cfg.echo(),
        "version": __version__,
        "started": started,
        "duration_s": time.perf_counter() - start,
        "outputs": writer.outputs,
        "checks": writer.checks,
        "status": status,
        "error": error,
        "summary": writer.summary,
        "threads": workers,
    })
    return code


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
