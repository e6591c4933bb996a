"""Riemann–Liouville fractional integrals and derivatives on a uniform grid.

All operators use product integration: the input ``g`` is interpolated
linearly between nodes and, for the weighted variants, multiplied by the
exact power ``u**p``. The singular moments

    m_q[n, k] = int_k^{k+1} (n - eta)**(beta - 1) * eta**q  d eta

are computed once per ``(N, alpha, p, kind)`` in dimensionless units with
Gauss–Jacobi rules on the cells touching a singularity and Gauss–Legendre
rules elsewhere, then scaled by the appropriate power of the step.

The derivative of an absolutely continuous ``F`` with ``F(0) = 0`` is taken
as ``I^{1-alpha} F'``, which for a piecewise-linear ``g`` is the closed form
of the Weyl hypersingular integral. Constant parts go through the exact
monomial rule, so ``g(0) != 0`` is handled analytically.

Unweighted right-sided operators reuse the left-sided weights through
``t -> T - t``. A weight ``u**p`` is not reflection invariant, so weighted
right-sided operators get their own product-integration weights, built row
by row with the exact power inside the cell integrals.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass

import numpy as np
from scipy import special

from .grid_core import Grid

__all__ = [
    "Side",
    "Kind",
    "FracOp",
    "FracResult",
    "frac_integral",
    "frac_derivative",
    "weighted_frac_op",
    "frac_norm_bound_check",
    "unit_weights",
    "right_unit_weights",
]


class Side(str, enum.Enum):
    LEFT_PLUS = "left"
    RIGHT_MINUS = "right"


class Kind(str, enum.Enum):
    INTEGRAL = "integral"
    DERIVATIVE = "derivative"


_N_LEGENDRE = 8
_N_JACOBI = 12


def _check_alpha(alpha: float) -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return alpha


def _jacobi01(n: int, a: float, b: float):
    """Nodes and weights for int_0^1 (1-w)**a * w**b * g(w) dw."""
    x, w = special.roots_jacobi(n, a, b)
    return 0.5 * (x + 1.0), w * 0.5 ** (a + b + 1.0)


def _legendre01(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def _row_moments(n: int, beta: float, q: float) -> np.ndarray:
    """m_q[n, k] for k = 0..n-1 (cell 0 is zero when q <= -1)."""
    out = np.zeros(n)
    if n == 1:
        if q > -1.0:
            out[0] = special.beta(q + 1.0, beta)
        return out
    # cell 0: weight w**q, smooth remainder (n - w)**(beta - 1)
    if q > -1.0:
        w0, c0 = _jacobi01(_N_JACOBI, 0.0, q)
        out[0] = np.dot(c0, (n - w0) ** (beta - 1.0))
    # last cell: weight (1 - w)**(beta - 1), remainder (k + w)**q
    wl, cl = _jacobi01(_N_JACOBI, beta - 1.0, 0.0)
    out[n - 1] = np.dot(cl, (n - 1.0 + wl) ** q)
    if n > 2:
        wg, cg = _legendre01(_N_LEGENDRE)
        eta = np.arange(1, n - 1)[:, None] + wg[None, :]
        out[1:n - 1] = ((n - eta) ** (beta - 1.0) * eta ** q) @ cg
    return out


def _monomial_factor(p: float, alpha: float, kind: Kind) -> float:
    if kind is Kind.INTEGRAL:
        return float(special.gamma(p + 1.0) * special.rgamma(p + 1.0 + alpha))
    return float(special.gamma(p + 1.0) * special.rgamma(p + 1.0 - alpha))


def _build_unit_weights(n_steps: int, alpha: float, p: float, kind: Kind) -> np.ndarray:
    N = n_steps
    W = np.zeros((N + 1, N + 1))
    mono = _monomial_factor(p, alpha, kind)
    if kind is Kind.INTEGRAL:
        beta = alpha
        scale = 1.0 / special.gamma(alpha)
    else:
        beta = 1.0 - alpha
        scale = 1.0 / special.gamma(1.0 - alpha)
    for n in range(1, N + 1):
        j = np.arange(1, n + 1)
        m_p = _row_moments(n, beta, p)
        if kind is Kind.INTEGRAL:
            m_hi = _row_moments(n, beta, p + 1.0)
            rising = m_hi[j - 1] - (j - 1) * m_p[j - 1]
            falling = np.zeros(n)
            falling[:-1] = (j[:-1] + 1) * m_p[j[:-1]] - m_hi[j[:-1]]
        else:
            m_lo = _row_moments(n, beta, p - 1.0) if p != 0.0 else np.zeros(n)
            m_lo[0] = 0.0  # only ever multiplied by p * (j - 1) = 0
            rising = (p + 1.0) * m_p[j - 1] - p * (j - 1) * m_lo[j - 1]
            falling = np.zeros(n)
            jj = j[:-1]
            falling[:-1] = p * (jj + 1) * m_lo[jj] - (p + 1.0) * m_p[jj]
        W[n, 1:n + 1] = scale * (rising + falling)
        W[n, 0] = mono * n ** (p + alpha if kind is Kind.INTEGRAL else p - alpha) - W[n, 1:n + 1].sum()
    return W


def _build_right_weights(n_steps: int, alpha: float, p: float, kind: Kind) -> np.ndarray:
    """Dimensionless weights of ``Op_{N-}[y**p g]`` at nodes ``1..N-1``.

    Rows 0 and ``N`` are left at zero; callers fill those endpoint values.
    The derivative uses ``D_{N-} F(i) = (F(N) (N - i)**(-a) - int_i^N
    (y - i)**(-a) F'(y) dy) / Gamma(1 - a)`` with ``F = y**p g``.
    """
    N = n_steps
    W = np.zeros((N + 1, N + 1))
    beta = alpha if kind is Kind.INTEGRAL else 1.0 - alpha
    scale = 1.0 / special.gamma(beta)
    wj, cj = _jacobi01(_N_JACOBI, 0.0, beta - 1.0)
    wg, cg = _legendre01(_N_LEGENDRE)
    for i in range(1, N):
        # adjacent cell first (Jacobi weight), then the rest (Legendre)
        parts = [(np.array([i]), wj[None, :], cj[None, :], np.ones((1, len(wj))))]
        if i + 1 < N:
            k = np.arange(i + 1, N)
            eta = k[:, None] + wg[None, :]
            parts.append((k, wg[None, :], cg[None, :], (eta - i) ** (beta - 1.0)))
        for k, x, c, ker in parts:
            eta = k[:, None] + x
            ker = ker * c
            if kind is Kind.INTEGRAL:
                lo = (ker * eta ** p * (1.0 - x)).sum(axis=1)
                hi = (ker * eta ** p * x).sum(axis=1)
            else:
                dp = p * eta ** (p - 1.0)
                lo = -(ker * (dp * (1.0 - x) - eta ** p)).sum(axis=1)
                hi = -(ker * (dp * x + eta ** p)).sum(axis=1)
            W[i, k] += lo
            W[i, k + 1] += hi
        if kind is Kind.DERIVATIVE:
            W[i, N] += float(N) ** p * (N - i) ** (-alpha)
        W[i] *= scale
    return W


class _WeightCache:
    """Bounded map with insert-if-absent semantics under a lock."""

    def __init__(self, maxsize: int = 24):
        self._data: dict = {}
        self._lock = threading.Lock()
        self._maxsize = maxsize

    def get(self, key, factory):
        with self._lock:
            hit = self._data.get(key)
        if hit is not None:
            return hit
        value = factory()
        value.setflags(write=False)
        with self._lock:
            if key not in self._data:
                if len(self._data) >= self._maxsize:
                    self._data.pop(next(iter(self._data)))
                self._data[key] = value
            return self._data[key]

    def clear(self):
        with self._lock:
            self._data.clear()


_CACHE = _WeightCache()


def unit_weights(n_steps: int, alpha: float, p: float = 0.0,
                 kind: Kind = Kind.INTEGRAL) -> np.ndarray:
    """Dimensionless left-sided weights (grid step 1), read-only and cached.

    Row ``n`` maps node values of ``g`` to ``Op[y**p g](n)``.
    """
    alpha = _check_alpha(alpha)
    kind = Kind(kind)
    if p <= -1.0:
        raise ValueError(f"inner power must exceed -1, got {p}")
    key = (int(n_steps), round(alpha, 15), round(float(p), 15), kind)
    return _CACHE.get(key, lambda: _build_unit_weights(int(n_steps), alpha, float(p), kind))


def right_unit_weights(n_steps: int, alpha: float, p: float = 0.0,
                       kind: Kind = Kind.INTEGRAL) -> np.ndarray:
    """Dimensionless right-sided weights with the exact power ``y**p``.

    Row ``i`` maps node values of ``g`` to ``Op_{N-}[y**p g](i)`` for
    ``0 < i < N``; the endpoint rows are zero.
    """
    alpha = _check_alpha(alpha)
    kind = Kind(kind)
    key = ("right", int(n_steps), round(alpha, 15), round(float(p), 15), kind)
    return _CACHE.get(key, lambda: _build_right_weights(int(n_steps), alpha, float(p), kind))


@dataclass(frozen=True)
class FracOp:
    """Left- or right-sided fractional operator of order ``alpha`` on ``grid``.

    ``power`` is the exact weight ``u**power`` folded into the left-sided
    weights; right-sided operators are built with ``power = 0``.
    """

    grid: Grid
    alpha: float
    side: Side = Side.LEFT_PLUS
    kind: Kind = Kind.INTEGRAL
    power: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "alpha", _check_alpha(self.alpha))
        object.__setattr__(self, "side", Side(self.side))
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.side is Side.RIGHT_MINUS and self.power != 0.0:
            raise ValueError("weighted right-sided operators go through weighted_frac_op")

    @property
    def order_exponent(self) -> float:
        sign = 1.0 if self.kind is Kind.INTEGRAL else -1.0
        return self.power + sign * self.alpha

    @property
    def weights(self) -> np.ndarray:
        W = unit_weights(self.grid.n_steps, self.alpha, self.power, self.kind)
        W = W * self.grid.step ** self.order_exponent
        if self.side is Side.RIGHT_MINUS:
            W = W[::-1, ::-1]
        return W

    def __call__(self, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.shape[-1] != len(self.grid):
            raise ValueError(f"expected {len(self.grid)} samples, got {f.shape[-1]}")
        W = unit_weights(self.grid.n_steps, self.alpha, self.power, self.kind)
        h = self.grid.step ** self.order_exponent
        if self.side is Side.LEFT_PLUS:
            return h * (f @ W.T)
        return h * (f[..., ::-1] @ W.T)[..., ::-1]


@dataclass(frozen=True)
class FracResult:
    values: np.ndarray
    extrapolated: tuple  # node indices filled by quadratic extrapolation


def _extrapolate_start(v: np.ndarray) -> float:
    return 3.0 * v[1] - 3.0 * v[2] + v[3]


def _extrapolate_end(v: np.ndarray) -> float:
    return 3.0 * v[-2] - 3.0 * v[-3] + v[-4]


def weighted_frac_op(f, grid: Grid, alpha: float, inner_power: float = 0.0,
                     outer_power: float = 0.0, side: Side = Side.LEFT_PLUS,
                     kind: Kind = Kind.INTEGRAL, return_info: bool = False):
    """Nodewise ``s**outer_power * Op[u**inner_power * f(u)](s)``.

    Values that are not defined by an analytic limit (a singular endpoint)
    are filled by quadratic extrapolation and listed in
    ``FracResult.extrapolated`` when ``return_info`` is set.
    """
    alpha = _check_alpha(alpha)
    side, kind = Side(side), Kind(kind)
    if inner_power <= -1.0:
        raise ValueError(f"inner_power must exceed -1, got {inner_power}")
    f = np.asarray(f, dtype=float)
    t = grid.nodes
    extrapolated = []
    with np.errstate(divide="ignore", invalid="ignore"):
        if side is Side.LEFT_PLUS:
            out = FracOp(grid, alpha, side, kind, inner_power)(f)
            out[1:] *= t[1:] ** outer_power
            sign = 1.0 if kind is Kind.INTEGRAL else -1.0
            lead = outer_power + inner_power + sign * alpha
            if lead > 0.0 or f[0] == 0.0 and lead == 0.0:
                out[0] = 0.0
            elif lead == 0.0:
                out[0] = f[0] * _monomial_factor(inner_power, alpha, kind)
            else:
                out[0] = _extrapolate_start(out)
                extrapolated.append(0)
        else:
            if inner_power == 0.0:
                out = FracOp(grid, alpha, side, kind)(f)
            else:
                W = right_unit_weights(grid.n_steps, alpha, inner_power, kind)
                sign = 1.0 if kind is Kind.INTEGRAL else -1.0
                out = grid.step ** (inner_power + sign * alpha) * (f @ W.T)
            if kind is Kind.INTEGRAL:
                out[-1] = 0.0
            else:
                out[-1] = _extrapolate_end(out)
                extrapolated.append(grid.n_steps)
            out[1:] *= t[1:] ** outer_power
            if outer_power > 0.0:
                out[0] = 0.0
            elif outer_power < 0.0 or inner_power != 0.0:
                out[0] = _extrapolate_start(out)
                extrapolated.append(0)
    if return_info:
        return FracResult(out, tuple(sorted(extrapolated)))
    return out


def frac_integral(f, grid: Grid, alpha: float, side: Side = Side.LEFT_PLUS) -> np.ndarray:
    """Riemann–Liouville fractional integral of order ``alpha``."""
    return weighted_frac_op(f, grid, alpha, side=side, kind=Kind.INTEGRAL)


def frac_derivative(f, grid: Grid, alpha: float, side: Side = Side.LEFT_PLUS,
                    return_info: bool = False):
    """Riemann–Liouville (Weyl) fractional derivative of order ``alpha``.

    The value at the base point is infinite when ``f`` does not vanish there;
    it is then replaced by extrapolation and reported when ``return_info``.
    """
    return weighted_frac_op(f, grid, alpha, side=side, kind=Kind.DERIVATIVE,
                            return_info=return_info)


def _trapezoid(y: np.ndarray, h: float) -> float:
    return float(h * (y.sum() - 0.5 * (y[0] + y[-1])))


def frac_norm_bound_check(f, grid: Grid, alpha: float, p: float = 2.0) -> tuple[float, float]:
    """Return ``(||I^alpha f||_p, T**alpha / (alpha Gamma(alpha)) ||f||_p)``."""
    if p < 1.0:
        raise ValueError(f"p must be >= 1, got {p}")
    alpha = _check_alpha(alpha)
    f = np.asarray(f, dtype=float)
    If = frac_integral(f, grid, alpha)
    lhs = _trapezoid(np.abs(If) ** p, grid.step) ** (1.0 / p)
    norm_f = _trapezoid(np.abs(f) ** p, grid.step) ** (1.0 / p)
    rhs = grid.t_end ** alpha / (alpha * special.gamma(alpha)) * norm_f
    return lhs, float(rhs)
