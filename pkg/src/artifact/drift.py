"""Drift and diffusion coefficients with their partial derivatives."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.polynomial import polynomial as P

__all__ = ["DriftSpec", "DriftValidationError", "polynomial_drift", "make_drift",
           "make_sigma", "DRIFT_NAMES", "SIGMA_NAMES"]

Fn = Callable[[np.ndarray, np.ndarray], np.ndarray]

DRIFT_NAMES = ("zero", "doubleWell", "linear", "polynomial")
SIGMA_NAMES = ("zero", "identity_y")


class DriftValidationError(ValueError):
    pass


def _zero(x, y):
    return np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape)


@dataclass(frozen=True)
class DriftSpec:
    """Drift ``b(x, y)`` and optional ``sigma(x, y)`` with partials.

    Non-degenerate problems carry the scalar state in the ``y`` slot (see
    :meth:`scalar`). Callables must be vectorised and free of side effects.
    """

    b: Fn
    b_x: Fn = _zero
    b_y: Fn = _zero
    b_xx: Fn = _zero
    b_xy: Fn = _zero
    b_yy: Fn = _zero
    sigma: Optional[Fn] = None
    sigma_x: Fn = _zero
    sigma_y: Fn = _zero
    name: str = "custom"
    lipschitz_hint: Optional[tuple] = None
    validation_box: tuple = (-2.0, 2.0)
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        if self.validate:
            check_partials(self)

    @classmethod
    def scalar(cls, f: Fn, df: Fn, d2f: Fn, name: str = "custom", **kw) -> "DriftSpec":
        """Drift of a scalar state ``y``: ``b(x, y) = f(y)``."""
        return cls(b=lambda x, y: f(y), b_y=lambda x, y: df(y),
                   b_yy=lambda x, y: d2f(y), name=name, **kw)

    @property
    def has_sigma(self) -> bool:
        return self.sigma is not None

    def state_drift(self, y):
        """``b`` along a scalar state held in the ``y`` slot."""
        y = np.asarray(y, dtype=float)
        return self.b(np.zeros_like(y), y)

    def state_partials(self, y):
        y = np.asarray(y, dtype=float)
        z = np.zeros_like(y)
        return self.b_y(z, y), self.b_yy(z, y)


def _fd(f, x, y, dx, dy):
    return (f(x + dx, y + dy) - f(x - dx, y - dy)) / (2.0 * np.hypot(dx, dy))


def check_partials(spec: DriftSpec, n_points: int = 100, tol: float = 1e-5, seed: int = 0) -> None:
    """Compare supplied partials with central differences at random points.

    Errors are measured relative to ``max(1, |value|)``; the callables are
    evaluated twice to check they are free of side effects.
    """
    rng = np.random.default_rng(seed)
    lo, hi = spec.validation_box
    x = rng.uniform(lo, hi, n_points)
    y = rng.uniform(lo, hi, n_points)
    step = 1e-5 * (1.0 + np.maximum(np.abs(x), np.abs(y)))
    pairs = [("b", spec.b, "b_x", spec.b_x, "b_y", spec.b_y),
             ("b_x", spec.b_x, "b_xx", spec.b_xx, "b_xy", spec.b_xy),
             ("b_y", spec.b_y, "b_xy", spec.b_xy, "b_yy", spec.b_yy)]
    if spec.sigma is not None:
        pairs.append(("sigma", spec.sigma, "sigma_x", spec.sigma_x, "sigma_y", spec.sigma_y))
    for fname, f, gx_name, gx, gy_name, gy in pairs:
        v1 = np.asarray(f(x, y), dtype=float)
        v2 = np.asarray(f(x, y), dtype=float)
        if not np.array_equal(v1 * np.ones(n_points), v2 * np.ones(n_points)):
            raise DriftValidationError(f"{fname} is not deterministic")
        for dname, d, dx, dy in ((gx_name, gx, step, 0.0), (gy_name, gy, 0.0, step)):
            exact = np.asarray(d(x, y), dtype=float) * np.ones(n_points)
            approx = _fd(f, x, y, dx, dy) * np.ones(n_points)
            err = np.abs(exact - approx) / np.maximum(1.0, np.abs(exact))
            if not np.all(err <= tol):
                k = int(np.argmax(err))
                raise DriftValidationError(
                    f"{dname} disagrees with finite differences of {fname} at "
                    f"(x={x[k]:.4g}, y={y[k]:.4g}): relative error {err[k]:.2e}"
                )


def _poly_fns(coeffs: Sequence[float]):
    c = np.asarray(coeffs, dtype=float)
    c1 = P.polyder(c) if len(c) > 1 else np.zeros(1)
    c2 = P.polyder(c1) if len(c1) > 1 else np.zeros(1)
    return (lambda z: P.polyval(z, c), lambda z: P.polyval(z, c1), lambda z: P.polyval(z, c2))


def polynomial_drift(coeffs: Sequence[float], arg: str = "y", name: str = "polynomial",
                     sigma: str = "zero") -> DriftSpec:
    """``b = sum_k coeffs[k] * z**k`` with ``z`` the ``x`` or ``y`` slot."""
    f, df, d2f = _poly_fns(coeffs)
    sig = make_sigma(sigma)
    if arg == "y":
        return DriftSpec(b=lambda x, y: f(y) + 0.0 * x, b_y=lambda x, y: df(y) + 0.0 * x,
                         b_yy=lambda x, y: d2f(y) + 0.0 * x, name=name, **sig)
    if arg == "x":
        return DriftSpec(b=lambda x, y: f(x) + 0.0 * y, b_x=lambda x, y: df(x) + 0.0 * y,
                         b_xx=lambda x, y: d2f(x) + 0.0 * y, name=name, **sig)
    raise ValueError(f"arg must be 'x' or 'y', got {arg!r}")


def make_sigma(name: str) -> dict:
    if name == "zero":
        return {}
    if name == "identity_y":
        return {"sigma": lambda x, y: np.asarray(y, dtype=float) + 0.0 * x,
                "sigma_y": lambda x, y: np.ones(np.broadcast(np.asarray(x), np.asarray(y)).shape)}
    raise ValueError(f"unknown sigma {name!r}; choose from {SIGMA_NAMES}")


def make_drift(name: str, degenerate: bool = False, lam: float = -1.0,
               coeffs: Sequence[float] = (), sigma: str = "zero") -> DriftSpec:
    """Registry lookup.

    ``doubleWell`` is ``z - z**3`` in the observed state: ``x`` for degenerate
    systems, the scalar state otherwise. ``linear`` is ``lam * y``.
    ``polynomial`` uses ``coeffs`` in the same slot as ``doubleWell``.
    """
    slot = "x" if degenerate else "y"
    if name == "zero":
        return polynomial_drift([0.0], "y", name="zero", sigma=sigma)
    if name == "doubleWell":
        return polynomial_drift([0.0, 1.0, 0.0, -1.0], slot, name="doubleWell", sigma=sigma)
    if name == "linear":
        return polynomial_drift([0.0, lam], "y", name="linear", sigma=sigma)
    if name == "polynomial":
        if len(coeffs) == 0:
            raise ValueError("polynomial drift needs at least one coefficient")
        return polynomial_drift(coeffs, slot, name="polynomial", sigma=sigma)
    raise ValueError(f"unknown drift {name!r}; choose from {DRIFT_NAMES}")
