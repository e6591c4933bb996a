"""Most probable paths by direct minimisation of the discretised action.

The objective is ``I = -L`` on the grid. The unknowns are the node values
of the density ``u`` with ``phi2 = y + K^H u``, the same quantity the action
consumes; for degenerate problems with ``sigma(x, y) = y`` the first
component follows from ``phi1 = x + int phi2`` by the trapezoid rule, so the
structural constraint holds to rounding. Optimising over node values of the
path instead would leave the checkerboard mode of centred differences
unpenalised. The Euler–Lagrange residual is assembled independently from
the path with left and right fractional operators.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import linalg, optimize

from .drift import DriftSpec
from .fbm import (KernelMatrix, adjoint_composite, apply_K_adjoint, apply_K_inverse,
                  discrete_derivative, inverse_composite, inverse_composite_matrix,
                  kernel_closed_form)
from .grid_core import Grid, HurstParams, PathSample, Regime
from .om_action import (ActionReport, action_weights, trapezoid_derivative,
                        _quadratic_gamma)

__all__ = [
    "MinimizationKind",
    "MinimizationProblem",
    "MinimizeOptions",
    "IterationRecord",
    "SolverError",
    "ELResidual",
    "minimize_action",
    "el_residual",
    "directional_derivative",
    "random_test_functions",
    "RESIDUAL_FORMS",
    "write_iteration_log",
]


class SolverError(RuntimeError):
    pass


class MinimizationKind(str, enum.Enum):
    NONDEGENERATE_SINGULAR = "nondegenerate_singular"
    NONDEGENERATE_REGULAR = "nondegenerate_regular"
    DEGENERATE_SINGULAR = "degenerate_singular"
    DEGENERATE_REGULAR = "degenerate_regular"

    @property
    def degenerate(self) -> bool:
        return self.value.startswith("degenerate")

    @classmethod
    def infer(cls, degenerate: bool, hp: HurstParams) -> "MinimizationKind":
        reg = "singular" if hp.regime is Regime.SINGULAR else "regular"
        return cls(f"{'degenerate' if degenerate else 'nondegenerate'}_{reg}")


def _sigma_is_identity_y(drift: DriftSpec) -> bool:
    rng = np.random.default_rng(1)
    x, y = rng.uniform(-2, 2, (2, 50))
    return bool(np.allclose(drift.sigma(x, y), y, rtol=0, atol=1e-14))


@dataclass(frozen=True)
class MinimizationProblem:
    """Discretised minimisation of ``I = -L``.

    ``initial`` is ``y`` (non-degenerate) or ``(x, y)`` (degenerate).
    ``terminal`` optionally pins ``phi(T)`` (non-degenerate) or ``phi2(T)``
    (degenerate). The unknowns are the density values ``u_1..u_N`` with
    ``phi2 = y + K^H u``; ``u_0 = u_1`` (the first cell carries no quadratic
    weight at node 0, so a free ``u_0`` would move the path at no cost) and
    a terminal pin eliminates ``u_N``.
    """

    kind: MinimizationKind
    drift: DriftSpec
    grid: Grid
    hurst: HurstParams
    initial: tuple
    terminal: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", MinimizationKind(self.kind))
        hp = self.hurst if isinstance(self.hurst, HurstParams) else HurstParams(self.hurst)
        object.__setattr__(self, "hurst", hp.require_theorem_range())
        init = tuple(float(v) for v in np.atleast_1d(self.initial))
        object.__setattr__(self, "initial", init)
        if MinimizationKind.infer(self.kind.degenerate, hp) is not self.kind:
            raise ValueError(f"kind {self.kind.value} does not match the regime of H = {hp.H}")
        if self.kind.degenerate:
            if not self.drift.has_sigma or not _sigma_is_identity_y(self.drift):
                raise ValueError("degenerate minimisation needs sigma(x, y) = y")
            if len(init) != 2:
                raise ValueError("degenerate problems need initial = (x, y)")
        elif len(init) != 1:
            raise ValueError("non-degenerate problems need initial = (y,)")

    @property
    def y0(self) -> float:
        return self.initial[-1]

    @cached_property
    def _ops(self):
        g, hp = self.grid, self.hurst
        n = len(g)
        A = inverse_composite_matrix(g, hp)
        P = KernelMatrix(g, hp).interpolation_weights
        wq = action_weights(g, _quadratic_gamma(hp))
        w0 = action_weights(g)
        h = g.step
        C = np.tril(np.full((n, n), h), -1)
        C[:, 0] = 0.5 * h
        C[np.arange(n), np.arange(n)] = 0.5 * h
        C[0] = 0.0
        # u = E z + e0
        E = np.zeros((n, n - 1))
        E[1:, :] = np.eye(n - 1)
        E[0, 0] = 1.0
        e0 = np.zeros(n)
        if self.terminal is not None:
            # eliminate u_N from P[N] @ u = terminal - y
            row = P[-1] @ E
            last = E[:, -1].copy()
            E = E[:, :-1] - np.outer(last, row[:-1] / row[-1])
            e0 = last * (self.terminal - self.y0) / row[-1]
        return _Ops(A, P, wq, w0, C, E, e0)

    @property
    def n_free(self) -> int:
        return self._ops.E.shape[1]

    @property
    def path_free(self) -> np.ndarray:
        """Path nodes determined by the unknowns."""
        stop = self.grid.n_steps if self.terminal is not None else self.grid.n_steps + 1
        return np.arange(1, stop)

    def density(self, z: np.ndarray) -> np.ndarray:
        ops = self._ops
        return z @ ops.E.T + ops.e0

    def phi2_of(self, u: np.ndarray) -> np.ndarray:
        return self.y0 + u @ self._ops.P.T

    def phi1_of(self, phi2: np.ndarray) -> np.ndarray:
        return self.initial[0] + phi2 @ self._ops.C.T

    def path(self, z: np.ndarray) -> PathSample:
        phi2 = self.phi2_of(self.density(z))
        self._remember(phi2, z)
        if self.kind.degenerate:
            return PathSample(self.grid, (self.phi1_of(phi2), phi2))
        return PathSample(self.grid, (phi2,))

    def _terms(self, u):
        ops, d = self._ops, self.drift
        phi2 = self.phi2_of(u)
        xi = self.phi1_of(phi2) if self.kind.degenerate else np.zeros_like(phi2)
        one = np.ones_like(phi2)
        v = u - (d.b(xi, phi2) * one) @ ops.A.T
        by = d.b_y(xi, phi2) * one
        return phi2, xi, v, by

    def objective_density(self, u: np.ndarray, with_grad: bool = False):
        """``I`` as a function of the density vector, optionally with its gradient.

        Without the gradient ``u`` may carry leading batch axes.
        """
        ops, d = self._ops, self.drift
        dH = self.hurst.d_H
        phi2, xi, v, by = self._terms(u)
        val = 0.5 * (v * v) @ ops.wq + 0.5 * dH * (by @ ops.w0)
        if not with_grad:
            return val if np.ndim(val) else float(val)
        one = np.ones_like(phi2)
        Wv = ops.wq * v
        AtWv = ops.A.T @ Wv
        byy = d.b_yy(xi, phi2) * one
        # gradient with respect to phi2, then chained through P
        g_phi2 = -by * AtWv + 0.5 * dH * ops.w0 * byy
        if self.kind.degenerate:
            bx = d.b_x(xi, phi2) * one
            bxy = d.b_xy(xi, phi2) * one
            g_phi2 += ops.C.T @ (-bx * AtWv + 0.5 * dH * ops.w0 * bxy)
        return float(val), Wv + ops.P.T @ g_phi2

    def objective(self, z: np.ndarray) -> float:
        return self.objective_density(self.density(z))

    def objective_and_grad(self, z: np.ndarray):
        val, grad = self.objective_density(self.density(z), with_grad=True)
        return val, self._ops.E.T @ grad

    def report(self, z: np.ndarray) -> ActionReport:
        _, _, v, by = self._terms(self.density(z))
        ops = self._ops
        return ActionReport(-0.5 * float(ops.wq @ (v * v)) + 0.0,
                            -0.5 * self.hurst.d_H * float(ops.w0 @ by) + 0.0,
                            self.hurst.regime, self.hurst.H, self.grid)

    @cached_property
    def _produced(self) -> dict:
        return {}

    def _remember(self, phi2: np.ndarray, z: np.ndarray) -> None:
        memo = self._produced
        if len(memo) >= 16:
            memo.pop(next(iter(memo)))
        memo[np.ascontiguousarray(phi2).tobytes()] = np.array(z, copy=True)

    @cached_property
    def _path_solver(self):
        ops = self._ops
        F = (ops.P @ ops.E)[self.path_free]
        return linalg.lu_factor(F)

    def variables_from_phi2(self, phi2: np.ndarray) -> np.ndarray:
        """Unknowns whose path matches ``phi2`` exactly at the free path nodes.

        Paths produced by :meth:`path` are looked up exactly. Otherwise a
        linear solve is used, which for ``H > 1/2`` amplifies an alternating
        mode; arbitrary paths should go through :meth:`variables` instead.
        """
        phi2 = np.asarray(phi2, dtype=float)
        hit = self._produced.get(np.ascontiguousarray(phi2).tobytes())
        if hit is not None:
            return hit.copy()
        ops = self._ops
        rhs = phi2[..., self.path_free] - self.y0 - (ops.P @ ops.e0)[self.path_free]
        return linalg.lu_solve(self._path_solver, rhs.T).T

    def density_direction(self, psi2: np.ndarray) -> np.ndarray:
        """Unknowns for a path perturbation ``psi2`` with ``psi2(0) = 0``."""
        psi2 = np.asarray(psi2, dtype=float).copy()
        psi2[0] = 0.0
        u = apply_K_inverse(psi2, self.grid, self.hurst)
        return u[1:1 + self.n_free].copy()

    def variables(self, path: PathSample) -> np.ndarray:
        """Unknowns near an arbitrary path; checks the boundary values.

        The density is the continuous inverse of the kernel, so the path of
        the returned unknowns matches ``path`` to discretisation accuracy.
        """
        full = np.asarray(path.components[-1], dtype=float)
        if abs(full[0] - self.y0) > 1e-12 * (1 + abs(self.y0)):
            raise ValueError("initial guess violates the initial condition")
        if self.terminal is not None and abs(full[-1] - self.terminal) > 1e-9 * (1 + abs(self.terminal)):
            raise ValueError("initial guess violates the terminal pin")
        return self.density_direction(full - self.y0)

    def objective_of_path(self, phi2: np.ndarray):
        """``I`` of paths given by node values; accepts a batch of rows."""
        phi2 = np.asarray(phi2, dtype=float)
        if phi2.ndim == 1:
            return self.objective(self.variables_from_phi2(phi2))
        return self.objective_density(self.density(self.variables_from_phi2(phi2)))


@dataclass(frozen=True)
class _Ops:
    A: np.ndarray
    P: np.ndarray
    wq: np.ndarray
    w0: np.ndarray
    C: np.ndarray
    E: np.ndarray
    e0: np.ndarray


@dataclass(frozen=True)
class MinimizeOptions:
    max_iters: int = 2000
    grad_tol: float = 1e-10
    step_rule: str = "lbfgs"


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    objective: float
    grad_norm: float
    step: float


@dataclass(frozen=True)
class MinimizeResult:
    path: PathSample
    report: ActionReport
    trace: list = field(default_factory=list)
    converged: bool = False
    message: str = ""

    def __iter__(self):
        return iter((self.path, self.report, self.trace))


def minimize_action(problem: MinimizationProblem, init_guess: PathSample,
                    opts: MinimizeOptions = MinimizeOptions()) -> MinimizeResult:
    """Quasi-Newton descent on the free node values with analytic gradients."""
    if opts.step_rule != "lbfgs":
        raise ValueError(f"unknown step rule {opts.step_rule!r}")
    z0 = problem.variables(init_guess)
    f0, g0 = problem.objective_and_grad(z0)
    if not np.isfinite(f0):
        raise SolverError("objective is not finite at the initial guess")
    trace = [IterationRecord(0, f0, float(np.max(np.abs(g0))), 0.0)]
    best = {"z": z0.copy(), "f": f0}
    prev = {"z": z0.copy()}

    def fun(z):
        f, g = problem.objective_and_grad(z)
        if not np.isfinite(f):
            return np.inf, np.zeros_like(z)
        return f, g

    def callback(xk):
        f, g = problem.objective_and_grad(xk)
        step = float(np.max(np.abs(xk - prev["z"])))
        prev["z"] = xk.copy()
        trace.append(IterationRecord(len(trace), f, float(np.max(np.abs(g))), step))
        if f <= best["f"]:
            best["z"], best["f"] = xk.copy(), f

    res = optimize.minimize(fun, z0, jac=True, method="L-BFGS-B", callback=callback,
                            options={"maxiter": opts.max_iters, "gtol": opts.grad_tol,
                                     "ftol": 1e-15, "maxcor": 30})
    if np.isfinite(res.fun) and res.fun <= best["f"]:
        best["z"], best["f"] = res.x.copy(), float(res.fun)
    if not np.isfinite(best["f"]):
        raise SolverError("objective became non-finite along the iterates")
    z = best["z"]
    gnorm = float(np.max(np.abs(problem.objective_and_grad(z)[1])))
    if len(trace) == 1 and gnorm > opts.grad_tol and not res.success:
        raise SolverError(f"no descent: {res.message}")
    return MinimizeResult(problem.path(z), problem.report(z), trace,
                          gnorm <= opts.grad_tol or bool(res.success), str(res.message))


def write_iteration_log(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "objective", "grad_norm", "step"])
        for r in trace:
            w.writerow([r.iteration, repr(r.objective), repr(r.grad_norm), repr(r.step)])


@dataclass(frozen=True)
class ELResidual:
    values: np.ndarray
    nodes: np.ndarray

    @property
    def norm_l2(self) -> float:
        h = self.nodes[1] - self.nodes[0] if len(self.nodes) > 1 else 1.0
        return float(np.sqrt(h * np.sum(self.values ** 2)))

    @property
    def norm_sup(self) -> float:
        return float(np.max(np.abs(self.values)))


_MARGIN = 2
RESIDUAL_FORMS = ("integrated", "differential")


def _reverse_cumtrapz(f: np.ndarray, h: float) -> np.ndarray:
    """``int_s^T f`` at every node by the trapezoid rule."""
    out = np.zeros_like(f)
    out[:-1] = np.cumsum((0.5 * h * (f[1:] + f[:-1]))[::-1])[::-1]
    return out


def el_residual(path: PathSample, problem: MinimizationProblem,
                form: str = "integrated") -> ELResidual:
    """Residual of the fractional Euler–Lagrange equation at ``path``.

    With ``v = phi2_dot - A[b]`` and ``R = A* v`` (``A`` the regime composite,
    ``A*`` its right-sided adjoint), the equations read ``-R'/d_H = w`` with

    * non-degenerate: ``w = b'(phi) R - (d_H/2) b''(phi)``;
    * degenerate, ``xi = phi1``: ``w = b_y R - (d_H/2) b_yy
      + int_s^T (b_x R - (d_H/2) b_yx)``,

    the second being the once-integrated form of ``R''/d_H - b_x R +
    (b_y R)' + (d_H/2) b_yx - (d_H/2) (b_yy)' = 0`` with its free-end
    condition. ``form="differential"`` samples ``-R'/d_H - w`` with
    centred differences. ``form="integrated"`` samples ``v - K* w``, the
    same equation after applying ``(K^H)^*`` (since ``-(A* v)'/d_H =
    ((K^H)^*)^{-1} v``); it needs no derivative of ``R``, whose
    discretisation error near ``s = 0`` does not shrink with the step.
    With a terminal pin the multiplier term ``lambda K^H(T, .)`` is
    removed by least squares. Samples exclude two nodes at each end.
    """
    if form not in RESIDUAL_FORMS:
        raise ValueError(f"form must be one of {RESIDUAL_FORMS}, got {form!r}")
    g, hp = problem.grid, problem.hurst
    d = problem.drift
    dH = hp.d_H
    h = g.step
    full = np.asarray(path.components[-1], dtype=float)
    xi = path.components[0] if problem.kind.degenerate else np.zeros_like(full)
    one = np.ones_like(full)
    gg = full - problem.y0
    gg[0] = 0.0
    v = apply_K_inverse(gg, g, hp) - inverse_composite(d.b(xi, full) * one, g, hp)
    R = adjoint_composite(v, g, hp)
    w = d.b_y(xi, full) * one * R - 0.5 * dH * d.b_yy(xi, full) * one
    if problem.kind.degenerate:
        w = w + _reverse_cumtrapz(d.b_x(xi, full) * one * R - 0.5 * dH * d.b_xy(xi, full) * one, h)
    sl = slice(_MARGIN, len(g) - _MARGIN)
    if form == "differential":
        res = -discrete_derivative(R, g) / dH - w
    else:
        res = v - apply_K_adjoint(w, g, hp)
        if problem.terminal is not None:
            k_T = np.zeros_like(full)
            k_T[1:-1] = kernel_closed_form(hp, g.t_end, g.nodes[1:-1])
            lam = (res[sl] @ k_T[sl]) / (k_T[sl] @ k_T[sl])
            res = res - lam * k_T
    return ELResidual(res[sl], g.nodes[sl])


def directional_derivative(path: PathSample, problem: MinimizationProblem, test_fn) -> float:
    """Central difference of the discretised ``I`` along ``test_fn``.

    ``path`` is expected in the discrete range of the kernel (a solver
    output). ``test_fn`` perturbs the observed component: ``phi`` when
    non-degenerate, ``phi1`` when degenerate (then ``phi2`` moves by its
    derivative). The perturbation enters through its density, so the path
    moves by ``test_fn`` up to discretisation error.
    """
    psi = np.asarray(test_fn, dtype=float)
    scale = float(np.max(np.abs(psi)))
    if scale == 0.0:
        return 0.0
    if abs(psi[0]) > 0.0:
        raise ValueError("test function must vanish at node 0")
    if problem.kind.degenerate:
        psi = trapezoid_derivative(psi, problem.grid.step, 0.0)
    z = problem.variables_from_phi2(np.asarray(path.components[-1], dtype=float))
    dz = problem.density_direction(psi)
    eps = 1e-5 / scale
    fp = problem.objective(z + eps * dz)
    fm = problem.objective(z - eps * dz)
    return float((fp - fm) / (2.0 * eps))


def random_test_functions(grid: Grid, n: int, seed: int = 0, modes: int = 4) -> np.ndarray:
    """Smooth functions vanishing with their first derivative at both ends."""
    rng = np.random.default_rng(seed)
    t = grid.nodes / grid.t_end
    bump = (t * (1.0 - t)) ** 2 * 16.0
    k = np.arange(1, modes + 1)
    coef = rng.standard_normal((n, modes))
    return bump * (coef @ np.sin(np.pi * k[:, None] * t[None, :]))
