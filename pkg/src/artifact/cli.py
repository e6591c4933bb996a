"""Command-line entry point: ``artifact <command> [--config FILE] [overrides]``.

Configs are INI files with a fixed key schema; unknown sections or keys are
errors. Every run writes into its own directory: the resolved config, the
outputs, a plain-text summary and ``manifest.json`` with the content hashes
of the config and of every output file. File contents depend only on the
config and seeds, never on ``--workers`` or the clock.
"""

from __future__ import annotations

import argparse
import configparser
import datetime as _dt
import hashlib
import io
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .drift import DRIFT_NAMES, SIGMA_NAMES, DriftValidationError, make_drift
from .el_solver import (MinimizationKind, MinimizationProblem, MinimizeOptions, SolverError,
                        directional_derivative, el_residual, minimize_action,
                        random_test_functions, write_iteration_log)
from .fbm import FbmSampler, SamplerMethod, sample_fbm, write_batch, write_paths_csv
from .grid_core import Grid, HolderNorm, HurstParams, PathSample
from .mc_harness import (ComponentMode, StatisticalError, epsilon_ladder, gamma_ratio,
                         smallball_scaling, write_gamma_csv, write_smallball_csv)
from .om_action import (ProblemKind, StructuralError, build_reference_path,
                        om_action_degenerate, om_action_nondegenerate)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STRUCTURAL = 3
EXIT_SOLVER = 4
EXIT_STATISTICAL = 5

COMMANDS = ("fbm-sample", "action-eval", "mpp", "gamma", "smallball")


class ConfigError(ValueError):
    def __init__(self, section: str, key: str, message: str):
        super().__init__(f"[{section}] {key}: {message}")
        self.section, self.key = section, key


# schema -------------------------------------------------------------------

def _float(text: str) -> float:
    return float(text)


def _int(text: str) -> int:
    return int(text)


def _floats(text: str) -> tuple:
    text = text.strip()
    return tuple(float(v) for v in text.split(",")) if text else ()


def _opt_float(text: str):
    text = text.strip()
    return None if text in ("", "none") else float(text)


def _choice(*options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return text
    return parse


def _commands(text: str) -> tuple:
    items = tuple(v.strip() for v in text.split(",") if v.strip())
    for v in items:
        if v not in COMMANDS:
            raise ValueError(f"unknown command {v!r}; choose from {', '.join(COMMANDS)}")
    return items


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class _Key:
    parse: Callable
    default: object


SCHEMA = {
    "model": {
        "kind": _Key(_choice("nondegenerate", "degenerate"), "nondegenerate"),
        "hurst": _Key(_float, 0.35),
        "regime": _Key(_choice("auto", "singular", "regular"), "auto"),
        "t_end": _Key(_float, 1.0),
        "n_steps": _Key(_int, 256),
        "drift": _Key(_choice(*DRIFT_NAMES), "doubleWell"),
        "lam": _Key(_float, -1.0),
        "coeffs": _Key(_floats, ()),
        "sigma": _Key(_choice(*SIGMA_NAMES), "zero"),
        "x0": _Key(_float, 0.0),
        "y0": _Key(_float, 1.0),
    },
    "path": {
        "phi2_dot": _Key(_floats, (0.0,)),
        "phi2_dot_file": _Key(str, ""),
    },
    "solver": {
        "terminal": _Key(_opt_float, None),
        "max_iters": _Key(_int, 2000),
        "grad_tol": _Key(_float, 1e-10),
        "init_amplitude": _Key(_float, 0.5),
        "n_test_functions": _Key(_int, 20),
    },
    "mc": {
        "n_paths": _Key(_int, 2000),
        "seed": _Key(_int, 0),
        "method": _Key(_choice(*(m.value for m in SamplerMethod)), "cholesky"),
        "norm": _Key(_choice("sup", "holder"), "sup"),
        "beta": _Key(_float, 0.05),
        "eps0": _Key(_float, 1.0),
        "eps_count": _Key(_int, 8),
        "eps_factor": _Key(_float, 0.5),
        "component_mode": _Key(_choice(*(m.value for m in ComponentMode)), "full_z"),
    },
    "run": {
        "pipeline": _Key(_commands, ("action-eval",)),
    },
}


class RunConfig:
    """Typed view of a config file; ``to_text`` is the canonical form."""

    def __init__(self, values: dict):
        self.values = values

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({s: {k: spec.default for k, spec in keys.items()} for s, keys in SCHEMA.items()})

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError("file", "syntax", str(exc).splitlines()[0]) from None
        cfg = cls.defaults()
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(section, "*", f"unknown section; expected one of {', '.join(SCHEMA)}")
            for key, raw in parser.items(section):
                cfg.set(section, key, raw)
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def set(self, section: str, key: str, raw: str) -> None:
        keys = SCHEMA.get(section)
        if keys is None:
            raise ConfigError(section, key, "unknown section")
        if key not in keys:
            raise ConfigError(section, key, f"unknown key; expected one of {', '.join(keys)}")
        try:
            self.values[section][key] = keys[key].parse(str(raw).strip())
        except ValueError as exc:
            raise ConfigError(section, key, f"cannot parse {raw!r}: {exc}") from None

    def __getitem__(self, item):
        section, key = item
        return self.values[section][key]

    def to_text(self) -> str:
        out = io.StringIO()
        for i, (section, keys) in enumerate(SCHEMA.items()):
            if i:
                out.write("\n")
            out.write(f"[{section}]\n")
            for key in keys:
                value = _fmt(self.values[section][key])
                out.write(f"{key} = {value}\n" if value else f"{key} =\n")
        return out.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


# model assembly -------------------------------------------------------------

def _hurst(cfg: RunConfig, theorem: bool) -> HurstParams:
    try:
        hp = HurstParams(cfg["model", "hurst"])
        if theorem:
            hp.require_theorem_range()
    except ValueError as exc:
        raise ConfigError("model", "hurst", str(exc)) from None
    regime = cfg["model", "regime"]
    if regime != "auto" and regime != hp.regime.value:
        raise ConfigError("model", "regime",
                          f"H = {hp.H} is in the {hp.regime.value} regime, not {regime}")
    return hp


def _grid(cfg: RunConfig) -> Grid:
    try:
        return Grid(cfg["model", "t_end"], cfg["model", "n_steps"])
    except ValueError as exc:
        key = "n_steps" if "step" in str(exc) else "t_end"
        raise ConfigError("model", key, str(exc)) from None


def _kind(cfg: RunConfig) -> ProblemKind:
    return ProblemKind(cfg["model", "kind"])


def _drift(cfg: RunConfig):
    degenerate = _kind(cfg) is ProblemKind.DEGENERATE
    sigma = cfg["model", "sigma"]
    if degenerate and sigma == "zero":
        raise ConfigError("model", "sigma", "degenerate systems need a sigma")
    try:
        return make_drift(cfg["model", "drift"], degenerate=degenerate, lam=cfg["model", "lam"],
                          coeffs=cfg["model", "coeffs"], sigma=sigma)
    except (ValueError, DriftValidationError) as exc:
        raise ConfigError("model", "drift", str(exc)) from None


def _initial(cfg: RunConfig) -> tuple:
    if _kind(cfg) is ProblemKind.DEGENERATE:
        return cfg["model", "x0"], cfg["model", "y0"]
    return (cfg["model", "y0"],)


def _norm(cfg: RunConfig):
    if cfg["mc", "norm"] == "sup":
        return "sup"
    beta = cfg["mc", "beta"]
    lo, hi = _hurst(cfg, theorem=False).holder_window()
    # open window; the endpoint H - 1/4 is excluded
    if not lo < beta < hi:
        raise ConfigError("mc", "beta", f"must lie in ({lo:g}, {hi:g}) for H = {cfg['model', 'hurst']}")
    return HolderNorm(beta)


def _phi2_dot(cfg: RunConfig, grid: Grid) -> np.ndarray:
    fname = cfg["path", "phi2_dot_file"]
    if fname:
        try:
            data = np.loadtxt(fname, delimiter=",", ndmin=2, comments="#")
        except (OSError, ValueError) as exc:
            raise ConfigError("path", "phi2_dot_file", str(exc)) from None
        values = data[:, -1]
        if len(values) != len(grid):
            raise ConfigError("path", "phi2_dot_file",
                              f"has {len(values)} rows, grid has {len(grid)} nodes")
        return values
    coeffs = cfg["path", "phi2_dot"]
    if not coeffs:
        raise ConfigError("path", "phi2_dot", "needs at least one coefficient")
    return np.polynomial.polynomial.polyval(grid.nodes, coeffs)


def _reference(cfg: RunConfig, hp: HurstParams, drift, grid: Grid):
    return build_reference_path(_kind(cfg), drift, grid, hp, _initial(cfg),
                                phi2_dot=_phi2_dot(cfg, grid))


# outputs --------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class RunDir:
    def __init__(self, root: Path, command: str, name: str | None):
        root.mkdir(parents=True, exist_ok=True)
        if name is None:
            stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
            name = f"{command}-{stamp}"
            k = 1
            while (root / name).exists():
                k += 1
                name = f"{command}-{stamp}-{k}"
        self.path = root / name
        self.path.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def file(self, name: str) -> Path:
        self.files.append(name)
        return self.path / name

    def write_text(self, name: str, text: str) -> None:
        self.file(name).write_text(text)

    def finish(self, cfg: RunConfig, command: str, extra: dict) -> None:
        manifest = {
            "command": command,
            "config_sha256": cfg.digest(),
            "hurst": cfg["model", "hurst"],
            "t_end": cfg["model", "t_end"],
            "n_steps": cfg["model", "n_steps"],
            "drift": cfg["model", "drift"],
            "seed": cfg["mc", "seed"],
            "n_paths": cfg["mc", "n_paths"],
            "norm": cfg["mc", "norm"],
            "files": {f: _sha256(self.path / f) for f in sorted(self.files)},
        }
        manifest.update(extra)
        (self.path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# commands -------------------------------------------------------------------

def cmd_fbm_sample(cfg: RunConfig, run: RunDir, workers: int) -> dict:
    hp = _hurst(cfg, theorem=False)
    grid = _grid(cfg)
    n_paths, seed = cfg["mc", "n_paths"], cfg["mc", "seed"]
    if n_paths < 1:
        raise ConfigError("mc", "n_paths", "must be at least 1")
    batch = sample_fbm(FbmSampler(grid, hp, cfg["mc", "method"], seed), n_paths, workers)
    write_paths_csv(batch, run.file("paths.csv"))
    write_batch(batch, run.file("paths.fbmb"))
    run.write_text("summary.txt",
                   f"fBm sample: H = {hp.H}, T = {grid.t_end}, N = {grid.n_steps}, "
                   f"{n_paths} paths, seed {seed}, method {cfg['mc', 'method']}\n"
                   f"mean |B_T| = {np.mean(np.abs(batch.paths[:, -1])):.6g}, "
                   f"theory sqrt(2/pi) T^H = {np.sqrt(2 / np.pi) * grid.t_end ** hp.H:.6g}\n")
    return {}


def _action(cfg, hp, drift, ref):
    if ref.kind is ProblemKind.DEGENERATE:
        return om_action_degenerate(ref, drift, hp)
    return om_action_nondegenerate(ref, drift, hp)


def cmd_action_eval(cfg: RunConfig, run: RunDir, workers: int) -> dict:
    hp = _hurst(cfg, theorem=True)
    grid = _grid(cfg)
    drift = _drift(cfg)
    ref = _reference(cfg, hp, drift, grid)
    report = _action(cfg, hp, drift, ref)
    run.write_text("report.json", report.to_json() + "\n")
    ref.phi.to_csv(run.file("path.csv"))
    run.write_text("summary.txt",
                   f"action of the reference path ({ref.kind.value}, {hp.regime.value}, "
                   f"H = {hp.H}, N = {grid.n_steps})\n"
                   f"total = {report.total:.12g}\n"
                   f"quadratic term = {report.quadratic_term:.12g}\n"
                   f"divergence term = {report.divergence_term:.12g}\n"
                   f"d_H * T = {hp.d_H * grid.t_end:.12g}\n")
    return {"total": report.total}


def cmd_mpp(cfg: RunConfig, run: RunDir, workers: int) -> dict:
    hp = _hurst(cfg, theorem=True)
    grid = _grid(cfg)
    drift = _drift(cfg)
    kind = _kind(cfg)
    degenerate = kind is ProblemKind.DEGENERATE
    try:
        problem = MinimizationProblem(MinimizationKind.infer(degenerate, hp), drift, grid, hp,
                                      _initial(cfg), cfg["solver", "terminal"])
    except ValueError as exc:
        raise ConfigError("model", "sigma" if degenerate else "kind", str(exc)) from None
    t = grid.nodes
    y0 = cfg["model", "y0"]
    term = cfg["solver", "terminal"]
    base = y0 + (0.0 if term is None else (term - y0) * t / grid.t_end)
    guess2 = base + cfg["solver", "init_amplitude"] * np.sin(np.pi * t / grid.t_end)
    if degenerate:
        guess = PathSample(grid, (problem.phi1_of(guess2), guess2))
    else:
        guess = PathSample(grid, (guess2,))
    opts = MinimizeOptions(cfg["solver", "max_iters"], cfg["solver", "grad_tol"])
    result = minimize_action(problem, guess, opts)
    path, report = result.path, result.report
    I = -report.total
    psis = random_test_functions(grid, cfg["solver", "n_test_functions"], seed=cfg["mc", "seed"])
    norm_l2 = np.sqrt(grid.step * np.sum(psis ** 2, axis=1))
    dd = [abs(directional_derivative(path, problem, p)) / (n * (1 + abs(I)))
          for p, n in zip(psis, norm_l2)]
    r0, r1 = el_residual(guess, problem), el_residual(path, problem)
    path.to_csv(run.file("path.csv"))
    write_iteration_log(result.trace, run.file("iterations.csv"))
    run.write_text("report.json", report.to_json() + "\n")
    np.savetxt(run.file("el_residual.csv"), np.column_stack([r1.nodes, r1.values]),
               delimiter=",", header="t,residual", comments="", fmt="%.17g")
    run.write_text("summary.txt",
                   f"most probable path ({problem.kind.value}, H = {hp.H}, N = {grid.n_steps})\n"
                   f"converged = {result.converged} after {len(result.trace) - 1} iterations "
                   f"({result.message})\n"
                   f"I = -L = {I:.12g}\n"
                   f"max scaled directional derivative = {max(dd):.3e}\n"
                   f"Euler-Lagrange residual (l2): initial {r0.norm_l2:.3e}, "
                   f"minimizer {r1.norm_l2:.3e}\n")
    return {"I": I, "converged": bool(result.converged)}


def cmd_gamma(cfg: RunConfig, run: RunDir, workers: int) -> dict:
    hp = _hurst(cfg, theorem=True)
    grid = _grid(cfg)
    drift = _drift(cfg)
    ref = _reference(cfg, hp, drift, grid)
    L = _action(cfg, hp, drift, ref).total
    eps = epsilon_ladder(cfg["mc", "eps0"], cfg["mc", "eps_count"], cfg["mc", "eps_factor"])
    n_paths = cfg["mc", "n_paths"]
    try:
        rows = gamma_ratio(ref, drift, hp, eps, _norm(cfg), n_paths, cfg["mc", "seed"], workers,
                           cfg["mc", "component_mode"])
    except ValueError as exc:
        raise ConfigError("mc", "n_paths", str(exc)) from None
    write_gamma_csv(rows, run.file("gamma.csv"))
    feasible = [r for r in rows if r.feasible]
    lines = [f"gamma ratio ({ref.kind.value}, H = {hp.H}, N = {grid.n_steps}, "
             f"{n_paths} paths, seed {cfg['mc', 'seed']}, norm {cfg['mc', 'norm']})",
             f"action L = {L:.12g}, exp(L) = {np.exp(L):.6g}",
             f"feasible radii (>= 30 hits on both sides): {len(feasible)} of {len(rows)}"]
    lines += [f"  eps = {r.epsilon:.6g}: ratio = {r.ratio:.6g} +- {r.std_err:.2g}" for r in feasible]
    run.write_text("summary.txt", "\n".join(lines) + "\n")
    if not feasible:
        raise StatisticalError("no radius reached 30 hits on both sides")
    return {"L": L, "feasible": len(feasible)}


def cmd_smallball(cfg: RunConfig, run: RunDir, workers: int) -> dict:
    hp = _hurst(cfg, theorem=False)
    grid = _grid(cfg)
    eps = epsilon_ladder(cfg["mc", "eps0"], cfg["mc", "eps_count"], cfg["mc", "eps_factor"])
    try:
        fit = smallball_scaling(hp, _norm(cfg), eps, cfg["mc", "n_paths"], cfg["mc", "seed"],
                                grid, workers)
    except ValueError as exc:
        raise ConfigError("mc", "n_paths" if "n_paths" in str(exc) else "beta", str(exc)) from None
    write_smallball_csv(fit, run.file("smallball.csv"))
    run.write_text("fit.json", json.dumps({
        "norm": fit.norm, "H": fit.H, "kappa": fit.kappa, "slope": fit.slope,
        "intercept": fit.intercept, "r2": fit.r2, "slope_std_err": fit.slope_std_err,
        "rate_constant": fit.rate_constant}, indent=2, sort_keys=True) + "\n")
    run.write_text("summary.txt",
                   f"small-ball fit, {fit.norm} norm, H = {fit.H}: log p = "
                   f"{fit.intercept:.6g} + ({fit.slope:.6g}) * eps^(-1/{fit.kappa:g})\n"
                   f"R^2 = {fit.r2:.6f}, radii used = {len(fit.estimates)}\n")
    return {"slope": fit.slope, "r2": fit.r2}


HANDLERS = {
    "fbm-sample": cmd_fbm_sample,
    "action-eval": cmd_action_eval,
    "mpp": cmd_mpp,
    "gamma": cmd_gamma,
    "smallball": cmd_smallball,
}


# argument parsing -------------------------------------------------------------

_OVERRIDES = (
    ("--hurst", "model", "hurst"),
    ("--regime", "model", "regime"),
    ("--t-end", "model", "t_end"),
    ("--n", "model", "n_steps"),
    ("--drift", "model", "drift"),
    ("--paths", "mc", "n_paths"),
    ("--seed", "mc", "seed"),
    ("--norm", "mc", "norm"),
    ("--beta", "mc", "beta"),
    ("--eps0", "mc", "eps0"),
    ("--eps-count", "mc", "eps_count"),
    ("--eps-factor", "mc", "eps_factor"),
    ("--terminal", "solver", "terminal"),
)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="artifact", description="Onsager-Machlup tools for fBm-driven SDEs")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS + ("run",):
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="INI config file")
        for flag, section, key in _OVERRIDES:
            sp.add_argument(flag, dest=f"{section}.{key}", metavar=key.upper(),
                            help=f"override [{section}] {key}")
        sp.add_argument("--out", type=Path, default=Path("runs"), help="parent output directory")
        sp.add_argument("--run-name", help="run directory name (default: command and timestamp)")
        sp.add_argument("--workers", type=int, default=1, help="threads for sampling")
        sp.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
    return p


def _resolve(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig.defaults()
    for _, section, key in _OVERRIDES:
        raw = getattr(args, f"{section}.{key}")
        if raw is not None:
            cfg.set(section, key, raw)
    return cfg


def _validate(cfg: RunConfig, command: str) -> None:
    """Cheap checks that do not build operators."""
    theorem = command in ("action-eval", "mpp", "gamma")
    _hurst(cfg, theorem)
    _grid(cfg)
    if command in ("action-eval", "mpp", "gamma"):
        _drift(cfg)
    if command in ("gamma", "smallball"):
        _norm(cfg)
        epsilon_ladder(cfg["mc", "eps0"], cfg["mc", "eps_count"], cfg["mc", "eps_factor"])


def _run_one(cfg: RunConfig, command: str, args, name: str | None) -> int:
    run = RunDir(args.out, command, name)
    run.write_text("config.cfg", cfg.to_text())
    extra = HANDLERS[command](cfg, run, args.workers)
    run.finish(cfg, command, {k: v for k, v in extra.items()})
    print(f"{command}: wrote {run.path}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        commands = cfg["run", "pipeline"] if args.command == "run" else (args.command,)
        for c in commands:
            _validate(cfg, c)
        if args.workers < 1:
            raise ConfigError("cli", "--workers", "must be at least 1")
        if args.dry_run:
            print(f"plan: {', '.join(commands)} -> {args.out}/")
            sys.stdout.write(cfg.to_text())
            return EXIT_OK
        for c in commands:
            name = args.run_name if args.command != "run" or args.run_name is None else f"{args.run_name}-{c}"
            _run_one(cfg, c, args, name)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StructuralError as exc:
        print(f"structural error: {exc}", file=sys.stderr)
        return EXIT_STRUCTURAL
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except StatisticalError as exc:
        print(f"statistical failure: {exc}", file=sys.stderr)
        return EXIT_STATISTICAL
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
