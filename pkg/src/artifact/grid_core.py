"""Time grids, sampled paths, discrete norms and special-function helpers."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

__all__ = [
    "MIN_STEPS",
    "Grid",
    "PathSample",
    "Regime",
    "HurstParams",
    "HolderNorm",
    "sup_norm",
    "holder_norm",
    "holder_seminorm_batch",
    "gamma_fn",
    "beta_fn",
    "hurst_constants",
]

MIN_STEPS = 8
MAX_HORIZON = 4.0


@dataclass(frozen=True)
class Grid:
    """Uniform partition of ``[0, t_end]`` into ``n_steps`` cells."""

    t_end: float
    n_steps: int

    def __post_init__(self):
        if not np.isfinite(self.t_end) or self.t_end <= 0.0:
            raise ValueError(f"t_end must be positive and finite, got {self.t_end}")
        if int(self.n_steps) != self.n_steps or self.n_steps < MIN_STEPS:
            raise ValueError(f"n_steps must be an integer >= {MIN_STEPS}, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "t_end", float(self.t_end))

    @property
    def t_start(self) -> float:
        return 0.0

    @property
    def step(self) -> float:
        return self.t_end / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        # i*h rather than linspace so node spacing is exactly uniform in i
        nodes = np.arange(self.n_steps + 1) * self.step
        nodes[-1] = self.t_end
        return nodes

    def __len__(self) -> int:
        return self.n_steps + 1

    def refine(self, factor: int = 2) -> "Grid":
        return Grid(self.t_end, self.n_steps * factor)

    def sample(self, f) -> np.ndarray:
        """Evaluate a vectorised callable at the nodes."""
        return np.asarray(f(self.nodes), dtype=float) * np.ones(len(self))


@dataclass(frozen=True)
class PathSample:
    """One or two scalar components sampled on a grid."""

    grid: Grid
    components: tuple = field(default_factory=tuple)

    def __post_init__(self):
        comps = tuple(np.array(c, dtype=float) for c in self.components)
        if len(comps) not in (1, 2):
            raise ValueError(f"a path has 1 or 2 components, got {len(comps)}")
        for k, c in enumerate(comps):
            if c.shape != (len(self.grid),):
                raise ValueError(
                    f"component {k} has shape {c.shape}, expected ({len(self.grid)},)"
                )
            if not np.all(np.isfinite(c)):
                raise ValueError(f"component {k} has non-finite values")
            c.setflags(write=False)
        object.__setattr__(self, "components", comps)

    @classmethod
    def from_arrays(cls, grid: Grid, *arrays) -> "PathSample":
        return cls(grid, tuple(arrays))

    @property
    def dim(self) -> int:
        return len(self.components)

    def component(self, index: int) -> np.ndarray:
        if not 0 <= index < self.dim:
            raise IndexError(f"component {index} out of range for a {self.dim}-component path")
        return self.components[index]

    def to_csv(self, path) -> None:
        cols = [self.grid.nodes, *self.components]
        header = "t," + ",".join(f"c{k}" for k in range(self.dim))
        np.savetxt(path, np.column_stack(cols), delimiter=",", header=header,
                   comments="", fmt="%.17g")


class Regime(str, enum.Enum):
    SINGULAR = "singular"
    REGULAR = "regular"


def hurst_constants(H: float) -> tuple[float, float]:
    """Return ``(c_H, d_H)`` for the Volterra kernel of fBm."""
    g = special.gamma
    num = 2.0 * H * g(1.5 - H)
    c_H = np.sqrt(num / (g(H + 0.5) * g(2.0 - 2.0 * H)))
    d_H = np.sqrt(num * g(H + 0.5) / g(2.0 - 2.0 * H))
    return float(c_H), float(d_H)


@dataclass(frozen=True)
class HurstParams:
    """Hurst index with the derived kernel constants.

    Any ``H`` in (0, 1) other than 1/2 is accepted so that limits can be
    probed; :meth:`require_theorem_range` checks the window in which the
    action functional is defined (1/4 < H < 1/2 or 1/2 < H < 1).
    """

    H: float

    def __post_init__(self):
        H = float(self.H)
        if not (0.0 < H < 1.0) or H == 0.5:
            raise ValueError(f"H must lie in (0, 1) excluding 1/2, got {self.H}")
        object.__setattr__(self, "H", H)

    @property
    def alpha(self) -> float:
        return abs(self.H - 0.5)

    @property
    def regime(self) -> Regime:
        return Regime.SINGULAR if self.H < 0.5 else Regime.REGULAR

    @property
    def c_H(self) -> float:
        return hurst_constants(self.H)[0]

    @property
    def d_H(self) -> float:
        return hurst_constants(self.H)[1]

    def in_theorem_range(self) -> bool:
        return 0.25 < self.H < 0.5 or 0.5 < self.H < 1.0

    def require_theorem_range(self) -> "HurstParams":
        if not self.in_theorem_range():
            raise ValueError(
                f"H = {self.H} is outside the admissible windows 1/4 < H < 1/2 and 1/2 < H < 1"
            )
        return self

    def holder_window(self) -> tuple[float, float]:
        """Open interval of Hölder exponents admissible for this regime."""
        lo = 0.0 if self.regime is Regime.SINGULAR else self.H - 0.5
        return lo, self.H - 0.25


@dataclass(frozen=True)
class HolderNorm:
    beta: float

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")

    def __call__(self, p: PathSample, component: int = 0) -> float:
        return holder_norm(p, component, self.beta)


def sup_norm(p: PathSample, component: int = 0) -> float:
    return float(np.max(np.abs(p.component(component))))


def holder_seminorm_batch(values: np.ndarray, nodes: np.ndarray, beta: float,
                          chunk: int = 64) -> np.ndarray:
    """Max over node pairs of ``|x_j - x_i| / (t_j - t_i)**beta`` for each row.

    O(N^2) per path; work is split over lags so memory stays at
    ``chunk * n_paths * N`` floats.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    x = np.atleast_2d(np.asarray(values, dtype=float))
    n = x.shape[1]
    out = np.zeros(x.shape[0])
    h = nodes[1] - nodes[0]
    for lo in range(1, n, chunk):
        lags = range(lo, min(lo + chunk, n))
        for lag in lags:
            d = np.abs(x[:, lag:] - x[:, :-lag]).max(axis=1) / (lag * h) ** beta
            np.maximum(out, d, out=out)
    return out


def holder_norm(p: PathSample, component: int = 0, beta: float = 0.5) -> float:
    """Sup norm plus the discrete Hölder seminorm over all node pairs."""
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    x = p.component(component)
    semi = holder_seminorm_batch(x[None, :], p.grid.nodes, beta)[0]
    return float(np.max(np.abs(x)) + semi)


def gamma_fn(x):
    """Euler Gamma function on positive arguments."""
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError("gamma_fn requires positive arguments")
    out = special.gamma(x)
    return float(out) if out.ndim == 0 else out


def beta_fn(a, b):
    """Euler Beta function on positive arguments."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(~(a > 0)) or np.any(~(b > 0)):
        raise ValueError("beta_fn requires positive arguments")
    out = special.beta(a, b)
    return float(out) if out.ndim == 0 else out


def as_path(grid: Grid, values: Sequence[float] | np.ndarray) -> PathSample:
    return PathSample(grid, (np.asarray(values, dtype=float),))
