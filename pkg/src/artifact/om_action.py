"""Reference paths and the Onsager–Machlup action in all four regimes."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np
from scipy import special

from .drift import DriftSpec
from .fbm import apply_K, apply_K_inverse, inverse_composite
from .grid_core import Grid, HurstParams, PathSample, Regime

__all__ = [
    "ProblemKind",
    "StructuralError",
    "ReferencePath",
    "ActionReport",
    "build_reference_path",
    "action_weights",
    "om_action_nondegenerate",
    "om_action_degenerate",
    "second_order_action",
    "trapezoid_derivative",
    "trace_divergence_check",
    "trace_kernel",
    "classical_action",
    "STRUCTURAL_RTOL",
    "ROUNDTRIP_TOL",
]

STRUCTURAL_RTOL = 1e-6
ROUNDTRIP_TOL = 2e-2
MAX_FIXED_POINT = 100


class ProblemKind(str, enum.Enum):
    NONDEGENERATE = "nondegenerate"
    DEGENERATE = "degenerate"


class StructuralError(ValueError):
    """A reference path violates the structure the action assumes."""


def _hurst(H) -> HurstParams:
    return H if isinstance(H, HurstParams) else HurstParams(H)


@dataclass(frozen=True)
class ReferencePath:
    kind: ProblemKind
    phi: PathSample
    phi2_dot: np.ndarray
    initial: tuple
    hurst: HurstParams
    structural_residual: float = 0.0
    roundtrip_residual: float = 0.0

    @property
    def grid(self) -> Grid:
        return self.phi.grid

    @property
    def phi2(self) -> np.ndarray:
        return self.phi.components[-1]

    @property
    def phi1(self) -> np.ndarray:
        if self.kind is not ProblemKind.DEGENERATE:
            raise AttributeError("non-degenerate paths have a single component")
        return self.phi.components[0]


@dataclass(frozen=True)
class ActionReport:
    quadratic_term: float
    divergence_term: float
    regime: Regime
    H: float
    grid: Grid
    structural_residual: float = 0.0

    @property
    def total(self) -> float:
        return self.quadratic_term + self.divergence_term

    def to_dict(self) -> dict:
        return {"regime": self.regime.value, "H": self.H, "N": self.grid.n_steps,
                "T": self.grid.t_end, "total": self.total,
                "quadratic_term": self.quadratic_term,
                "divergence_term": self.divergence_term,
                "structural_residual": self.structural_residual}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _cumtrapz(f: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros_like(f)
    out[1:] = np.cumsum(0.5 * h * (f[1:] + f[:-1]))
    return out


def trapezoid_derivative(phi1: np.ndarray, h: float, start: float) -> np.ndarray:
    """Exact inverse of the cumulative trapezoid rule with ``f(0) = start``."""
    d = 2.0 * np.diff(phi1) / h
    out = np.empty_like(phi1)
    out[0] = start
    for i in range(len(d)):
        out[i + 1] = d[i] - out[i]
    return out


def _integrate_structure(sigma, x0, phi2, h):
    phi1 = np.empty_like(phi2)
    phi1[0] = x0
    for i in range(len(phi2) - 1):
        left = phi1[i] + 0.5 * h * sigma(phi1[i], phi2[i])
        nxt = phi1[i]
        for _ in range(MAX_FIXED_POINT):
            new = left + 0.5 * h * sigma(nxt, phi2[i + 1])
            if abs(new - nxt) <= 1e-15 * (1.0 + abs(new)):
                nxt = new
                break
            nxt = new
        else:
            raise StructuralError(
                f"fixed-point iteration for phi1 did not converge at node {i + 1}; "
                "sigma is too stiff for this grid"
            )
        phi1[i + 1] = nxt
    return phi1


def structural_residual(drift: DriftSpec, phi1, phi2, x0, h) -> float:
    sig = np.asarray(drift.sigma(phi1, phi2), dtype=float) * np.ones_like(phi1)
    res = np.abs(phi1 - x0 - _cumtrapz(sig, h))
    return float(np.max(res) / (1.0 + np.max(np.abs(phi1))))


def build_reference_path(kind, drift: DriftSpec, grid: Grid, H, initial,
                         phi2_dot=None, phi2=None, phi1=None) -> ReferencePath:
    """Assemble a reference path and check its structural invariants.

    Give ``phi2_dot`` (the density with ``K^H phi2_dot = phi2 - y``) or
    ``phi2``; when both are given ``phi2_dot`` wins. For degenerate
    problems ``phi1`` is integrated from ``phi1' = sigma(phi)`` unless
    supplied, in which case the supplied one is validated.
    """
    kind = ProblemKind(kind)
    hp = _hurst(H)
    if kind is ProblemKind.DEGENERATE:
        if not drift.has_sigma:
            raise ValueError("degenerate problems need sigma")
        x0, y0 = (float(v) for v in initial)
    else:
        y0 = float(initial[0] if np.ndim(initial) else initial)
    roundtrip = 0.0
    if phi2_dot is not None:
        phi2_dot = np.asarray(phi2_dot, dtype=float).copy()
        if not np.all(np.isfinite(phi2_dot)):
            raise StructuralError("phi2_dot is not finite")
        phi2 = y0 + apply_K(phi2_dot, grid, hp)
    elif phi2 is not None:
        phi2 = np.asarray(phi2, dtype=float)
        if abs(phi2[0] - y0) > 1e-12 * (1.0 + abs(y0)):
            raise StructuralError(f"phi2(0) = {phi2[0]} differs from y = {y0}")
        g = phi2 - y0
        g[0] = 0.0
        phi2_dot = apply_K_inverse(g, grid, hp)
        err = np.abs(apply_K(phi2_dot, grid, hp) - g)
        roundtrip = float(np.max(err[1:]) / (1.0 + np.max(np.abs(g))))
    else:
        raise ValueError("give phi2_dot or phi2")
    if not np.all(np.isfinite(phi2_dot)):
        raise StructuralError("phi2_dot is not finite")
    if kind is ProblemKind.NONDEGENERATE:
        return ReferencePath(kind, PathSample(grid, (phi2,)), phi2_dot, (y0,), hp,
                             0.0, roundtrip)
    if phi1 is None:
        phi1 = _integrate_structure(drift.sigma, x0, phi2, grid.step)
    phi1 = np.asarray(phi1, dtype=float)
    resid = structural_residual(drift, phi1, phi2, x0, grid.step)
    if resid > STRUCTURAL_RTOL:
        raise StructuralError(
            f"phi1 - x - int sigma(phi) has relative residual {resid:.2e} > {STRUCTURAL_RTOL}"
        )
    return ReferencePath(kind, PathSample(grid, (phi1, phi2)), phi2_dot, (x0, y0), hp,
                         resid, roundtrip)


def action_weights(grid: Grid, gamma: float = 0.0) -> np.ndarray:
    """Quadrature weights that never touch node 0.

    Trapezoid from node 1 on, plus ``int_0^h c s**gamma ds = h f(h) / (1 + gamma)``
    for the first cell, i.e. an integrand behaving like ``s**gamma`` near 0.
    With ``gamma = 0`` the weights sum to ``T`` exactly.
    """
    h = grid.step
    w = np.full(len(grid), h)
    w[0] = 0.0
    w[-1] = 0.5 * h
    w[1] = 0.5 * h + h / (1.0 + gamma)
    return w


def _check_regime(ref: ReferencePath, H) -> HurstParams:
    hp = _hurst(H).require_theorem_range()
    if hp.H != ref.hurst.H:
        raise ValueError(f"path was built for H = {ref.hurst.H}, evaluation asked for H = {hp.H}")
    return hp


def _quadratic_gamma(hp: HurstParams) -> float:
    # regular regime: both phi2_dot and the composite may grow like s**(-a) at 0
    return 0.0 if hp.regime is Regime.SINGULAR else -2.0 * hp.alpha


def _report(v, by, hp, grid, resid=0.0) -> ActionReport:
    # adding 0.0 turns a negative zero into +0.0
    quad = -0.5 * float(action_weights(grid, _quadratic_gamma(hp)) @ (v * v)) + 0.0
    div = -0.5 * hp.d_H * float(action_weights(grid) @ by) + 0.0
    return ActionReport(quad, div, hp.regime, hp.H, grid, resid)


def om_action_nondegenerate(ref: ReferencePath, drift: DriftSpec, H) -> ActionReport:
    """Action of a scalar path ``phi`` for ``dY = b(Y) dt + dB^H``."""
    hp = _check_regime(ref, H)
    if ref.kind is not ProblemKind.NONDEGENERATE:
        raise ValueError("expected a non-degenerate reference path")
    phi = ref.phi2
    comp = inverse_composite(drift.state_drift(phi), ref.grid, hp)
    by, _ = drift.state_partials(phi)
    return _report(ref.phi2_dot - comp, by, hp, ref.grid)


def om_action_degenerate(ref: ReferencePath, drift: DriftSpec, H) -> ActionReport:
    """Action of ``phi = (phi1, phi2)`` for the degenerate system."""
    hp = _check_regime(ref, H)
    if ref.kind is not ProblemKind.DEGENERATE:
        raise ValueError("expected a degenerate reference path")
    if not drift.has_sigma:
        raise ValueError("degenerate problems need sigma")
    phi1, phi2 = ref.phi.components
    resid = structural_residual(drift, phi1, phi2, ref.initial[0], ref.grid.step)
    if resid > STRUCTURAL_RTOL:
        raise StructuralError(f"structural residual {resid:.2e} exceeds {STRUCTURAL_RTOL}")
    comp = inverse_composite(drift.b(phi1, phi2), ref.grid, hp)
    by = np.asarray(drift.b_y(phi1, phi2), dtype=float) * np.ones_like(phi1)
    return _report(ref.phi2_dot - comp, by, hp, ref.grid, resid)


def second_order_action(phi1, drift: DriftSpec, grid: Grid, H, initial) -> ActionReport:
    """Degenerate action written in ``phi1`` alone for ``sigma(x, y) = y``.

    The second-derivative slot is the density of ``phi1' - y`` under
    ``K^H``; ``phi1'`` is recovered from ``phi1`` by inverting the trapezoid
    rule, so no structural residual is introduced.
    """
    hp = _hurst(H).require_theorem_range()
    x0, y0 = (float(v) for v in initial)
    phi1 = np.asarray(phi1, dtype=float)
    if abs(phi1[0] - x0) > 1e-12 * (1.0 + abs(x0)):
        raise StructuralError(f"phi1(0) = {phi1[0]} differs from x = {x0}")
    dphi1 = trapezoid_derivative(phi1, grid.step, y0)
    g = dphi1 - y0
    g[0] = 0.0
    slot = apply_K_inverse(g, grid, hp)
    comp = inverse_composite(drift.b(phi1, dphi1), grid, hp)
    by = np.asarray(drift.b_y(phi1, dphi1), dtype=float) * np.ones_like(phi1)
    return _report(slot - comp, by, hp, grid)


def classical_action(phi, drift: DriftSpec, grid: Grid) -> float:
    """Brownian-case functional ``-1/2 int (phi' - b)^2 - 1/2 int b'``."""
    phi = np.asarray(phi, dtype=float)
    dphi = np.gradient(phi, grid.step, edge_order=2)
    b = drift.state_drift(phi)
    by, _ = drift.state_partials(phi)
    w = np.full(len(grid), grid.step)
    w[0] = w[-1] = 0.5 * grid.step
    return float(-0.5 * w @ (dphi - b) ** 2 - 0.5 * w @ by)


# trace of the second-chaos kernel ------------------------------------------

_N_W = 16
_DUFFY = np.polynomial.legendre.leggauss(4)


def _jacobi01(n, a, b):
    x, w = special.roots_jacobi(n, a, b)
    return 0.5 * (x + 1.0), w * 0.5 ** (a + b + 1.0)


def _kernel_ratio(hp: HurstParams, u, r):
    """``K^H(u, r) / (u - r)**(H - 1/2)``, smooth up to ``u = r``."""
    Hv = hp.H
    return hp.c_H * special.hyp2f1(Hv - 0.5, 0.5 - Hv, Hv + 0.5, 1.0 - u / r)


def trace_kernel(s, r, by_fn, hp: HurstParams):
    """Kernel ``f(s, r)`` of the regime composite applied to ``b_y(phi_u) K^H(u, r)``.

    ``s >= r > 0`` arrays of equal shape; ``by_fn`` evaluates ``b_y(phi_u)``.
    """
    s = np.asarray(s, dtype=float)[..., None]
    r = np.asarray(r, dtype=float)[..., None]
    a = hp.alpha
    if hp.regime is Regime.SINGULAR:
        w, c = _jacobi01(_N_W, a - 1.0, -a)
        u = r + (s - r) * w
        g = u ** a * by_fn(u) * _kernel_ratio(hp, u, r)
        return (s[..., 0] ** (-a) / special.gamma(a)) * (g @ c)
    # regular: Weyl form with the hypersingular part written as a divided difference
    w, c = _jacobi01(_N_W, -a, a)
    u = r + (s - r) * w

    def g_tilde(uu):
        return uu ** (-a) * by_fn(uu) * _kernel_ratio(hp, uu, r)

    g1 = g_tilde(s)
    gw = g_tilde(u)
    div = (g1 - gw) / (1.0 - w)
    C = (special.gamma(1.0 + a) * special.gamma(1.0 - a) - 1.0) / a
    val = g1[..., 0] * (1.0 + a * C) + a * (div @ c)
    return s[..., 0] ** a * val / special.gamma(1.0 - a)


def trace_divergence_check(drift: DriftSpec, ref: ReferencePath, H, N: int | None = None):
    """Return ``(numeric_trace, closed_form)`` for the divergence term.

    The kernel is discretised by cell averages on an ``N``-step grid; the
    symmetrised matrix keeps the diagonal, so the trace is ``h`` times the
    sum of the diagonal cell averages, each taken over the lower triangle
    where the kernel lives (half the square cell).
    """
    hp = _hurst(H)
    if hp.H != ref.hurst.H:
        raise ValueError("regime mismatch between path and H")
    grid = ref.grid if N is None else Grid(ref.grid.t_end, N)
    t_ref = ref.grid.nodes
    if ref.kind is ProblemKind.DEGENERATE:
        p1, p2 = ref.phi.components

        def by_fn(u):
            return drift.b_y(np.interp(u, t_ref, p1), np.interp(u, t_ref, p2))
    else:
        p2 = ref.phi2

        def by_fn(u):
            y = np.interp(u, t_ref, p2)
            return drift.b_y(np.zeros_like(y), y)

    by_nodes = np.asarray(by_fn(grid.nodes), dtype=float) * np.ones(len(grid))
    w_trap = np.full(len(grid), grid.step)
    w_trap[0] = w_trap[-1] = 0.5 * grid.step
    closed = 0.5 * hp.d_H * float(w_trap @ by_nodes)
    if np.all(by_nodes == 0.0) and np.all(by_fn(np.linspace(0, grid.t_end, 97)[1:]) == 0.0):
        return 0.0, closed
    h = grid.step
    xa, wa = _DUFFY
    xa, wa = 0.5 * (xa + 1.0), 0.5 * wa
    A, B = np.meshgrid(xa, xa, indexing="ij")
    WA = np.outer(wa, wa) * A  # Duffy Jacobian on the unit triangle
    left = grid.nodes[:-1, None, None]
    s = left + h * A[None]
    r = left + h * A[None] * B[None]
    f = trace_kernel(s, r, by_fn, hp)
    tri_avg = 2.0 * np.sum(f * WA[None], axis=(1, 2))
    diag = 0.5 * tri_avg
    return float(h * diag.sum()), closed
