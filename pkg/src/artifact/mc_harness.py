"""Monte Carlo tube probabilities, the ratio gamma_eps and small-ball fits.

Simulated paths are stored as ``Y = y + D + B`` with ``D`` the accumulated
drift and ``B`` the fBm path, and tube deviations are formed as
``B + (D - (phi - y))``. With ``b = 0`` and ``phi = y`` this is ``B``
bit for bit, so the numerator and denominator events coincide exactly.
"""

from __future__ import annotations

import csv
import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import stats

from .drift import DriftSpec
from .fbm import BLOCK_SIZE, FbmSampler, SamplerMethod, sample_fbm
from .grid_core import Grid, HolderNorm, HurstParams, holder_seminorm_batch
from .om_action import ProblemKind, ReferencePath

__all__ = [
    "Integrator",
    "ComponentMode",
    "SdeSimConfig",
    "SdeBatch",
    "TubeEstimate",
    "GammaRow",
    "SmallBallFit",
    "StatisticalError",
    "MIN_HITS",
    "MIN_PATHS",
    "simulate_sde",
    "deviation_norms",
    "tube_probability",
    "tube_probabilities",
    "equivalence_constant",
    "gamma_ratio",
    "smallball_scaling",
    "epsilon_ladder",
    "write_gamma_csv",
    "write_smallball_csv",
]

MIN_HITS = 30
MIN_PATHS = 100

Norm = Union[str, HolderNorm]


class StatisticalError(RuntimeError):
    """Too few tube hits for the requested estimate."""


class Integrator(str, enum.Enum):
    EULER_EXPLICIT = "euler_explicit"


class ComponentMode(str, enum.Enum):
    FULL_Z = "full_z"
    Y_ONLY = "y_only"


def _norm_label(norm: Norm) -> str:
    if isinstance(norm, HolderNorm):
        return f"holder({norm.beta:g})"
    if norm != "sup":
        raise ValueError(f"norm must be 'sup' or HolderNorm, got {norm!r}")
    return "sup"


@dataclass(frozen=True)
class SdeSimConfig:
    drift: DriftSpec
    kind: ProblemKind
    initial: tuple
    grid: Grid
    H: float
    n_paths: int
    seed: int
    integrator: Integrator = Integrator.EULER_EXPLICIT
    method: SamplerMethod = SamplerMethod.CHOLESKY_EXACT
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", ProblemKind(self.kind))
        object.__setattr__(self, "integrator", Integrator(self.integrator))
        object.__setattr__(self, "method", SamplerMethod(self.method))
        init = tuple(float(v) for v in np.atleast_1d(self.initial))
        object.__setattr__(self, "initial", init)
        if self.kind is ProblemKind.DEGENERATE:
            if len(init) != 2:
                raise ValueError("degenerate systems need initial = (x, y)")
            if not self.drift.has_sigma:
                raise ValueError("degenerate systems need sigma")
        elif len(init) != 1:
            raise ValueError("non-degenerate systems need initial = (y,)")
        if self.n_paths < 1:
            raise ValueError(f"n_paths must be >= 1, got {self.n_paths}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")

    @property
    def hurst(self) -> HurstParams:
        return HurstParams(self.H)


@dataclass(frozen=True)
class SdeBatch:
    """Simulated paths, ``Y = y + drift_part + noise`` row by row.

    ``x`` is ``None`` for non-degenerate systems. Rows listed in
    ``aborted`` left the finite range and are NaN from that step on.
    """

    grid: Grid
    hurst: HurstParams
    kind: ProblemKind
    initial: tuple
    noise: np.ndarray
    drift_part: np.ndarray
    x: Optional[np.ndarray]
    aborted: np.ndarray
    seed: int

    @property
    def n_paths(self) -> int:
        return self.noise.shape[0]

    @property
    def y(self) -> np.ndarray:
        return self.initial[-1] + self.drift_part + self.noise

    @property
    def n_aborted(self) -> int:
        return int(self.aborted.sum())


def _euler_block(cfg: SdeSimConfig, sampler: FbmSampler, block: int, size: int):
    B, _ = sampler._block(block, size)
    h = cfg.grid.step
    n = cfg.grid.n_steps
    y0 = cfg.initial[-1]
    D = np.zeros_like(B)
    X = None
    degenerate = cfg.kind is ProblemKind.DEGENERATE
    if degenerate:
        X = np.empty_like(B)
        X[:, 0] = cfg.initial[0]
    dead = np.zeros(size, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n):
            y = y0 + D[:, i] + B[:, i]
            xi = X[:, i] if degenerate else np.zeros(size)
            D[:, i + 1] = D[:, i] + np.asarray(cfg.drift.b(xi, y), dtype=float) * h
            if degenerate:
                X[:, i + 1] = X[:, i] + np.asarray(cfg.drift.sigma(xi, y), dtype=float) * h
            bad = ~np.isfinite(D[:, i + 1])
            if degenerate:
                bad |= ~np.isfinite(X[:, i + 1])
            fresh = bad & ~dead
            if fresh.any():
                dead |= fresh
                D[fresh, i + 1:] = np.nan
                if degenerate:
                    X[fresh, i + 1:] = np.nan
    return B, D, X, dead


def simulate_sde(config: SdeSimConfig) -> SdeBatch:
    """Explicit Euler scheme driven by exact fBm increments.

    ``Y_{i+1} = Y_i + b(X_i, Y_i) h + (B_{i+1} - B_i)`` and, for degenerate
    systems, ``X_{i+1} = X_i + sigma(X_i, Y_i) h``. Blocks of paths have their
    own RNG stream, so the result does not depend on ``workers``.
    """
    hp = config.hurst
    sampler = FbmSampler(config.grid, hp, config.method, config.seed)
    sampler._factor  # build once before fanning out
    n = config.n_paths
    jobs = [(k // BLOCK_SIZE, min(BLOCK_SIZE, n - k)) for k in range(0, n, BLOCK_SIZE)]
    if config.workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            parts = list(pool.map(lambda job: _euler_block(config, sampler, *job), jobs))
    else:
        parts = [_euler_block(config, sampler, *job) for job in jobs]
    B = np.concatenate([p[0] for p in parts])
    D = np.concatenate([p[1] for p in parts])
    X = None
    if config.kind is ProblemKind.DEGENERATE:
        X = np.concatenate([p[2] for p in parts])
    dead = np.concatenate([p[3] for p in parts])
    return SdeBatch(config.grid, hp, config.kind, config.initial, B, D, X, dead, int(config.seed))


def deviation_norms(dev: np.ndarray, grid: Grid, norm: Norm) -> np.ndarray:
    """Row-wise norm of sampled deviations; NaN rows give ``inf``."""
    label = _norm_label(norm)
    dev = np.atleast_2d(dev)
    out = np.abs(dev).max(axis=1)
    if label != "sup":
        out = out + holder_seminorm_batch(dev, grid.nodes, norm.beta)
    out[~np.isfinite(out)] = np.inf
    return out


@dataclass(frozen=True)
class TubeEstimate:
    epsilon: float
    norm: str
    n_paths: int
    n_hits: int

    @property
    def p_hat(self) -> float:
        return self.n_hits / self.n_paths

    @property
    def std_err(self) -> float:
        p = self.p_hat
        return math.sqrt(p * (1.0 - p) / self.n_paths)


def _tube_norms(batch: SdeBatch, phi: ReferencePath, norm: Norm, mode: ComponentMode):
    if batch.grid != phi.grid:
        raise ValueError("batch and reference path live on different grids")
    if batch.kind is not phi.kind:
        raise ValueError("batch and reference path are of different kinds")
    y0 = batch.initial[-1]
    dy = batch.noise + (batch.drift_part - (phi.phi2 - y0))
    ny = deviation_norms(dy, batch.grid, norm)
    if mode is ComponentMode.Y_ONLY or batch.kind is ProblemKind.NONDEGENERATE:
        return ny
    nx = deviation_norms(batch.x - phi.phi1, batch.grid, norm)
    return np.hypot(nx, ny)


def tube_probabilities(batch: SdeBatch, phi: ReferencePath, epsilons: Sequence[float],
                       norm: Norm = "sup",
                       component_mode: ComponentMode = ComponentMode.FULL_Z) -> list:
    """Tube estimates for several radii on one batch (nested events)."""
    mode = ComponentMode(component_mode)
    norms = _tube_norms(batch, phi, norm, mode)
    label = _norm_label(norm)
    return [TubeEstimate(float(e), label, batch.n_paths, int(np.count_nonzero(norms <= e)))
            for e in epsilons]


def tube_probability(batch: SdeBatch, phi: ReferencePath, epsilon: float, norm: Norm = "sup",
                     component_mode: ComponentMode = ComponentMode.FULL_Z) -> TubeEstimate:
    """Fraction of paths with ``||Z - phi|| <= epsilon``.

    ``FULL_Z`` combines the component norms by root-sum-square;
    ``Y_ONLY`` uses the second component alone. Aborted paths never hit.
    """
    return tube_probabilities(batch, phi, [epsilon], norm, component_mode)[0]


def equivalence_constant(batch: SdeBatch, phi: ReferencePath, epsilon: float,
                         norm: Norm = "sup") -> tuple[float, int]:
    """Largest ``||X - phi1|| / epsilon`` among paths with ``||Y - phi2|| <= epsilon``.

    Returns ``(constant, n_hits)``; the constant is NaN without hits.
    """
    if batch.kind is not ProblemKind.DEGENERATE:
        raise ValueError("the equivalence constant needs a degenerate system")
    ny = _tube_norms(batch, phi, norm, ComponentMode.Y_ONLY)
    hit = ny <= epsilon
    if not hit.any():
        return float("nan"), 0
    nx = deviation_norms(batch.x[hit] - phi.phi1, batch.grid, norm)
    return float(nx.max() / epsilon), int(hit.sum())


@dataclass(frozen=True)
class GammaRow:
    epsilon: float
    n_paths: int
    hits_num: int
    hits_den: int
    hits_both: int

    @property
    def p_num(self) -> float:
        return self.hits_num / self.n_paths

    @property
    def p_den(self) -> float:
        return self.hits_den / self.n_paths

    @property
    def feasible(self) -> bool:
        return min(self.hits_num, self.hits_den) >= MIN_HITS

    @property
    def ratio(self) -> float:
        return self.p_num / self.p_den if self.hits_den else float("nan")

    @property
    def log_ratio(self) -> float:
        if self.hits_num == 0 or self.hits_den == 0:
            return float("nan")
        return math.log(self.ratio)

    @property
    def std_err(self) -> float:
        """Delta-method standard error of the ratio with the joint-hit covariance."""
        if self.hits_num == 0 or self.hits_den == 0:
            return float("nan")
        # integer numerator, so identical events give exactly zero
        n, A, B, C = self.n_paths, self.hits_num, self.hits_den, self.hits_both
        num = (n - A) * B + (n - B) * A - 2 * (n * C - A * B)
        var_log = num / (n * A * B)
        return self.ratio * math.sqrt(max(var_log, 0.0))


def gamma_ratio(phi: ReferencePath, drift: DriftSpec, H, epsilon_list: Sequence[float],
                norm: Norm = "sup", n_paths: int = 2000, seed: int = 0, workers: int = 1,
                component_mode: ComponentMode = ComponentMode.FULL_Z,
                batch: Optional[SdeBatch] = None) -> list:
    """``P(||Z - phi|| <= eps) / P(||B^H|| <= eps)`` on one shared fBm batch.

    The denominator reuses the numerator's noise (common random numbers).
    Rows with fewer than ``MIN_HITS`` hits on either side are kept but
    marked infeasible.
    """
    if n_paths < MIN_PATHS:
        raise ValueError(f"probability estimates need n_paths >= {MIN_PATHS}")
    hp = H if isinstance(H, HurstParams) else HurstParams(H)
    if hp.H != phi.hurst.H:
        raise ValueError("reference path and H disagree")
    if batch is None:
        cfg = SdeSimConfig(drift, phi.kind, phi.initial, phi.grid, hp.H, n_paths, seed,
                           workers=workers)
        batch = simulate_sde(cfg)
    mode = ComponentMode(component_mode)
    num = _tube_norms(batch, phi, norm, mode)
    den = deviation_norms(batch.noise, batch.grid, norm)
    rows = []
    for e in epsilon_list:
        hn, hd = num <= e, den <= e
        rows.append(GammaRow(float(e), batch.n_paths, int(hn.sum()), int(hd.sum()),
                             int((hn & hd).sum())))
    return rows


def epsilon_ladder(eps0: float, n: int, factor: float = 0.5) -> list:
    """Geometric ladder ``eps0 * factor**k`` for ``k = 0..n-1``."""
    if not 0.0 < factor < 1.0:
        raise ValueError(f"factor must lie in (0, 1), got {factor}")
    if eps0 <= 0.0 or n < 1:
        raise ValueError("eps0 must be positive and n >= 1")
    return [eps0 * factor ** k for k in range(n)]


@dataclass(frozen=True)
class SmallBallFit:
    """Least-squares fit of ``log p_hat = intercept + slope * eps**(-1/kappa)``.

    ``kappa`` is ``H`` (sup norm) or ``H - beta`` (Hölder norm); the
    small-ball laws predict a negative slope whose magnitude is the rate
    constant.
    """

    norm: str
    H: float
    kappa: float
    slope: float
    intercept: float
    r2: float
    slope_std_err: float
    estimates: tuple = field(default_factory=tuple)

    @property
    def rate_constant(self) -> float:
        return -self.slope


def smallball_scaling(H, norm: Norm, epsilon_list: Sequence[float], n_paths: int, seed: int = 0,
                      grid: Optional[Grid] = None, workers: int = 1,
                      min_hits: int = MIN_HITS) -> SmallBallFit:
    """Fit the small-ball law of fBm over the feasible part of an epsilon ladder.

    Radii are used in decreasing order until one has fewer than
    ``min_hits`` hits; at least four feasible radii are required.
    """
    if n_paths < MIN_PATHS:
        raise ValueError(f"probability estimates need n_paths >= {MIN_PATHS}")
    hp = H if isinstance(H, HurstParams) else HurstParams(H)
    label = _norm_label(norm)
    kappa = hp.H - norm.beta if isinstance(norm, HolderNorm) else hp.H
    if kappa <= 0.0:
        raise ValueError(f"Hölder exponent must be below H = {hp.H}")
    grid = grid if grid is not None else Grid(1.0, 256)
    sampler = FbmSampler(grid, hp, rng_seed=seed)
    paths = sample_fbm(sampler, n_paths, workers).paths
    norms = deviation_norms(paths, grid, norm)
    used = []
    for e in sorted(epsilon_list, reverse=True):
        hits = int(np.count_nonzero(norms <= e))
        if hits < min_hits:
            break
        used.append(TubeEstimate(float(e), label, n_paths, hits))
    if len(used) < 4:
        raise StatisticalError(
            f"only {len(used)} radii reach {min_hits} hits; need 4 (enlarge epsilons or n_paths)")
    x = np.array([u.epsilon ** (-1.0 / kappa) for u in used])
    ylog = np.log([u.p_hat for u in used])
    fit = stats.linregress(x, ylog)
    return SmallBallFit(label, hp.H, kappa, float(fit.slope), float(fit.intercept),
                        float(fit.rvalue ** 2), float(fit.stderr), tuple(used))


def write_gamma_csv(rows: Sequence[GammaRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epsilon", "p_num", "p_den", "ratio", "log_ratio", "stderr",
                    "hits_num", "hits_den", "feasible"])
        for r in rows:
            w.writerow([repr(r.epsilon), repr(r.p_num), repr(r.p_den), repr(r.ratio),
                        repr(r.log_ratio), repr(r.std_err), r.hits_num, r.hits_den,
                        int(r.feasible)])


def write_smallball_csv(fit: SmallBallFit, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epsilon", "n_paths", "n_hits", "p_hat", "std_err", "log_p_hat"])
        for e in fit.estimates:
            w.writerow([repr(e.epsilon), e.n_paths, e.n_hits, repr(e.p_hat), repr(e.std_err),
                        repr(math.log(e.p_hat))])
