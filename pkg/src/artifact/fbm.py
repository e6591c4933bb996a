"""Volterra kernel of fBm, the operator K^H and its inverse, and path samplers."""

from __future__ import annotations

import enum
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import integrate, linalg, special

from .frac_calc import FracOp, Kind, Side, weighted_frac_op
from .grid_core import Grid, HurstParams, Regime

__all__ = [
    "kernel_value",
    "kernel_closed_form",
    "fbm_covariance",
    "KernelMatrix",
    "CovarianceMatrix",
    "SamplerMethod",
    "FbmSampler",
    "FbmBatch",
    "apply_K",
    "apply_K_adjoint",
    "apply_K_inverse",
    "inverse_composite",
    "inverse_composite_matrix",
    "adjoint_composite",
    "discrete_derivative",
    "sample_fbm",
    "write_batch",
    "read_batch",
    "BLOCK_SIZE",
]

BLOCK_SIZE = 256
_N_LEGENDRE = 8
_N_JACOBI = 16


def _as_hurst(H) -> HurstParams:
    return H if isinstance(H, HurstParams) else HurstParams(H)


def kernel_value(H, r: float, u: float) -> float:
    """K^H(r, u) for ``0 < u < r`` by adaptive quadrature.

    Uses the defining integral for H < 1/2 and the positive integral
    representation for H > 1/2.
    """
    hp = _as_hurst(H)
    if not u > 0.0:
        raise ValueError(f"u must be positive, got {u}")
    if not u < r:
        raise ValueError(f"need u < r, got u={u}, r={r}")
    Hv, a, c = hp.H, hp.alpha, hp.c_H
    if hp.regime is Regime.SINGULAR:
        # (theta - u)**(H - 3/2) (1 - (u/theta)**a) = (theta - u)**(H - 1/2) * smooth
        def smooth(theta):
            d = theta - u
            return -np.expm1(a * np.log(u / theta)) / d if d > 0 else a / u

        tail, _ = integrate.quad(smooth, u, r, weight="alg", wvar=(Hv - 0.5, 0.0),
                                 epsabs=1e-14, epsrel=1e-12, limit=200)
        return float(c * ((r - u) ** (Hv - 0.5) + a * tail))
    val, _ = integrate.quad(lambda th: th ** a, u, r, weight="alg", wvar=(a - 1.0, 0.0),
                            epsabs=1e-14, epsrel=1e-12, limit=200)
    return float(c * a * u ** (-a) * val)


def kernel_closed_form(H, r, u):
    """Vectorised K^H(r, u) through the Gauss hypergeometric function."""
    hp = _as_hurst(H)
    r = np.asarray(r, dtype=float)
    u = np.asarray(u, dtype=float)
    Hv = hp.H
    return hp.c_H * (r - u) ** (Hv - 0.5) * special.hyp2f1(Hv - 0.5, 0.5 - Hv, Hv + 0.5, 1.0 - r / u)


def fbm_covariance(H, t, s):
    Hv = _as_hurst(H).H
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    return 0.5 * (t ** (2 * Hv) + s ** (2 * Hv) - np.abs(t - s) ** (2 * Hv))


def _jacobi01(n, a, b):
    x, w = special.roots_jacobi(n, a, b)
    return 0.5 * (x + 1.0), w * 0.5 ** (a + b + 1.0)


def _unit_kernel(hp: HurstParams, i, rho):
    """Kernel on the unit-step grid with the factor c_H (i - rho)**(H - 1/2) removed."""
    Hv = hp.H
    return hp.c_H * special.hyp2f1(Hv - 0.5, 0.5 - Hv, Hv + 0.5, 1.0 - i / rho)


def _build_cell_moments(n_steps: int, hp: HurstParams):
    """Zeroth and first cell moments of K^H(i, .) on the unit-step grid.

    ``M0[i, j] = int_j^{j+1} K(i, rho) d rho`` and
    ``M1[i, j] = int_j^{j+1} K(i, rho) (rho - j) d rho``.
    """
    N = n_steps
    Hv, a = hp.H, hp.alpha
    e = Hv - 0.5
    M0 = np.zeros((N + 1, N + 1))
    M1 = np.zeros((N + 1, N + 1))
    xg, wg = np.polynomial.legendre.leggauss(_N_LEGENDRE)
    xg, wg = 0.5 * (xg + 1.0), 0.5 * wg
    # cell touching both ends (i = 1)
    xb, wb = _jacobi01(_N_JACOBI, e, -a)
    # last cell, singular like (i - rho)**e
    xl, wl = _jacobi01(_N_JACOBI, e, 0.0)
    # first cell, singular like rho**(-a)
    xf, wf = _jacobi01(_N_JACOBI, 0.0, -a)

    f = _unit_kernel(hp, 1.0, xb) * xb ** a
    M0[1, 0] = wb @ f
    M1[1, 0] = wb @ (f * xb)
    for i in range(2, N + 1):
        f = _unit_kernel(hp, i, xf) * xf ** a * (i - xf) ** e
        M0[i, 0] = wf @ f
        M1[i, 0] = wf @ (f * xf)
        f = _unit_kernel(hp, i, i - 1.0 + xl)
        M0[i, i - 1] = wl @ f
        M1[i, i - 1] = wl @ (f * xl)
        if i > 2:
            rho = np.arange(1, i - 1)[:, None] + xg[None, :]
            f = _unit_kernel(hp, i, rho) * (i - rho) ** e
            M0[i, 1:i - 1] = f @ wg
            M1[i, 1:i - 1] = f @ (wg * xg)
    return M0, M1


_MOMENT_CACHE: dict = {}
_MOMENT_LOCK = threading.Lock()


def _cell_moments(n_steps: int, hp: HurstParams):
    key = (n_steps, hp.H)
    with _MOMENT_LOCK:
        hit = _MOMENT_CACHE.get(key)
    if hit is None:
        M0, M1 = _build_cell_moments(n_steps, hp)
        M0.setflags(write=False)
        M1.setflags(write=False)
        with _MOMENT_LOCK:
            if len(_MOMENT_CACHE) >= 12:
                _MOMENT_CACHE.pop(next(iter(_MOMENT_CACHE)))
            hit = _MOMENT_CACHE.setdefault(key, (M0, M1))
    return hit


@dataclass(frozen=True)
class KernelMatrix:
    """Cell-averaged kernel ``K[i, j] = (1/h) int_{t_j}^{t_{j+1}} K^H(t_i, r) dr``."""

    grid: Grid
    hurst: HurstParams

    @cached_property
    def _moments(self):
        M0, M1 = _cell_moments(self.grid.n_steps, self.hurst)
        s = self.grid.step ** (self.hurst.H + 0.5)
        return M0 * s, M1 * s

    @cached_property
    def entries(self) -> np.ndarray:
        out = self._moments[0] / self.grid.step
        out.setflags(write=False)
        return out

    @cached_property
    def interpolation_weights(self) -> np.ndarray:
        """Weights of ``int_0^{t_i} K(t_i, r) h(r) dr`` for piecewise-linear ``h``."""
        M0, M1 = self._moments
        P = M0 - M1
        P[:, 1:] += M1[:, :-1]
        P.setflags(write=False)
        return P

    def gram(self) -> np.ndarray:
        K = self.entries
        return self.grid.step * K @ K.T

    def gram_error(self) -> float:
        t = self.grid.nodes
        R = fbm_covariance(self.hurst, t[:, None], t[None, :])
        return float(np.max(np.abs(self.gram() - R)))


def apply_K(h, grid: Grid, H) -> np.ndarray:
    """``(K^H h)(t_i) = int_0^{t_i} K^H(t_i, r) h(r) dr`` by product integration."""
    hp = _as_hurst(H)
    h = np.asarray(h, dtype=float)
    if h.shape[-1] != len(grid):
        raise ValueError(f"expected {len(grid)} samples, got {h.shape[-1]}")
    return h @ KernelMatrix(grid, hp).interpolation_weights.T


def _build_adjoint_weights(n_steps: int, hp: HurstParams) -> np.ndarray:
    """Unit-step weights of ``int_j^N K^H(r, j) w(r) dr`` for piecewise-linear ``w``.

    Rows ``0`` and ``N`` are zero: the value at ``N`` vanishes and the kernel
    is singular in its second argument at 0.
    """
    N = n_steps
    e = hp.H - 0.5
    Q = np.zeros((N + 1, N + 1))
    xg, wg = np.polynomial.legendre.leggauss(_N_LEGENDRE)
    xg, wg = 0.5 * (xg + 1.0), 0.5 * wg
    xa, wa = _jacobi01(_N_JACOBI, 0.0, e)
    for j in range(1, N):
        f = _unit_kernel(hp, j + xa, float(j))
        Q[j, j] += wa @ (f * (1.0 - xa))
        Q[j, j + 1] += wa @ (f * xa)
        if j + 1 < N:
            r = np.arange(j + 1, N)[:, None] + xg[None, :]
            f = _unit_kernel(hp, r, float(j)) * (r - j) ** e
            Q[j, j + 1:N] += f @ (wg * (1.0 - xg))
            Q[j, j + 2:N + 1] += f @ (wg * xg)
    return Q


_ADJOINT_CACHE: dict = {}


def _adjoint_weights(n_steps: int, hp: HurstParams) -> np.ndarray:
    key = (n_steps, hp.H)
    with _MOMENT_LOCK:
        hit = _ADJOINT_CACHE.get(key)
    if hit is None:
        Q = _build_adjoint_weights(n_steps, hp)
        Q.setflags(write=False)
        with _MOMENT_LOCK:
            if len(_ADJOINT_CACHE) >= 12:
                _ADJOINT_CACHE.pop(next(iter(_ADJOINT_CACHE)))
            hit = _ADJOINT_CACHE.setdefault(key, Q)
    return hit


def apply_K_adjoint(w, grid: Grid, H) -> np.ndarray:
    """``(K^H)^* w (s) = int_s^T K^H(r, s) w(r) dr`` at nodes ``1..N``.

    The value at node 0 is not defined for ``H != 1/2`` and is returned as
    the quadratic extrapolation of nodes 1..3.
    """
    hp = _as_hurst(H)
    w = np.asarray(w, dtype=float)
    if w.shape[-1] != len(grid):
        raise ValueError(f"expected {len(grid)} samples, got {w.shape[-1]}")
    out = grid.step ** (hp.H + 0.5) * (w @ _adjoint_weights(grid.n_steps, hp).T)
    out[..., 0] = 3.0 * out[..., 1] - 3.0 * out[..., 2] + out[..., 3]
    return out


def discrete_derivative(g, grid: Grid) -> np.ndarray:
    """Centred differences inside, second-order one-sided at the ends."""
    return np.gradient(np.asarray(g, dtype=float), grid.step, edge_order=2, axis=-1)


def inverse_composite(f, grid: Grid, H, return_info: bool = False):
    """Regime composite acting on a density-like input ``f``.

    Singular regime: ``s^{-a} I^a_{0+}[u^a f](s)``; regular regime:
    ``s^{a} D^a_{0+}[u^{-a} f](s)``. Applied to ``(K^H h)'`` it returns
    ``d_H h``.
    """
    hp = _as_hurst(H)
    a = hp.alpha
    if hp.regime is Regime.SINGULAR:
        return weighted_frac_op(f, grid, a, inner_power=a, outer_power=-a,
                                kind=Kind.INTEGRAL, return_info=return_info)
    return weighted_frac_op(f, grid, a, inner_power=-a, outer_power=a,
                            kind=Kind.DERIVATIVE, return_info=return_info)


def _composite_powers(hp: HurstParams):
    a = hp.alpha
    if hp.regime is Regime.SINGULAR:
        return a, -a, Kind.INTEGRAL
    return -a, a, Kind.DERIVATIVE


def inverse_composite_matrix(grid: Grid, H) -> np.ndarray:
    """Matrix of :func:`inverse_composite` on nodes ``1..N``; row 0 is zero."""
    hp = _as_hurst(H)
    inner, outer, kind = _composite_powers(hp)
    W = FracOp(grid, hp.alpha, Side.LEFT_PLUS, kind, inner).weights.copy()
    W[0] = 0.0
    W[1:] *= grid.nodes[1:, None] ** outer
    return W


def adjoint_composite(v, grid: Grid, H, return_info: bool = False):
    """L^2 adjoint of :func:`inverse_composite`.

    Singular regime: ``s^{a} I^a_{T-}[u^{-a} v](s)``; regular regime:
    ``s^{-a} D^a_{T-}[u^{a} v](s)``.
    """
    hp = _as_hurst(H)
    inner, outer, kind = _composite_powers(hp)
    return weighted_frac_op(v, grid, hp.alpha, inner_power=outer, outer_power=inner,
                            side=Side.RIGHT_MINUS, kind=kind, return_info=return_info)


def apply_K_inverse(g, grid: Grid, H, return_info: bool = False):
    """(K^H)^{-1} g for a sampled ``g`` with ``g(0) = 0``.

    Near 0 the image of a smooth density behaves like ``t**(H + 1/2) q(t)``
    with ``q`` smooth, and the composite's inner weight turns ``g'`` into
    exactly ``beta q + t q'`` (``beta = H + 1/2``). Differentiating ``q``
    instead of ``g`` avoids a boundary layer of fixed width in nodes. The
    result is divided by ``d_H`` so that ``apply_K_inverse(apply_K(h)) = h``.
    """
    hp = _as_hurst(H)
    g = np.asarray(g, dtype=float)
    if len(g) < 4:
        raise ValueError("apply_K_inverse needs at least 4 nodes")
    if abs(g[0]) > 1e-12:
        raise ValueError(f"apply_K_inverse needs g(0) = 0, got {g[0]}")
    t = grid.nodes
    beta = hp.H + 0.5
    q = np.empty_like(g)
    q[1:] = g[1:] / t[1:] ** beta
    q[0] = 3.0 * q[1] - 3.0 * q[2] + q[3]
    f = beta * q + t * discrete_derivative(q, grid)
    _, outer, kind = _composite_powers(hp)
    res = weighted_frac_op(f, grid, hp.alpha, 0.0, outer, kind=kind, return_info=True)
    values = res.values / hp.d_H
    if return_info:
        return type(res)(values, res.extrapolated)
    return values


@dataclass(frozen=True)
class CovarianceMatrix:
    """fBm covariance at nodes ``t_1..t_N`` with a cached Cholesky factor."""

    grid: Grid
    hurst: HurstParams

    @cached_property
    def entries(self) -> np.ndarray:
        t = self.grid.nodes[1:]
        return fbm_covariance(self.hurst, t[:, None], t[None, :])

    @cached_property
    def cholesky(self) -> np.ndarray:
        try:
            L = linalg.cholesky(self.entries, lower=True)
        except linalg.LinAlgError as exc:
            raise RuntimeError(
                f"covariance not positive definite for N={self.grid.n_steps}, H={self.hurst.H}"
            ) from exc
        L.setflags(write=False)
        return L


class SamplerMethod(str, enum.Enum):
    CHOLESKY_EXACT = "cholesky"
    KERNEL_CONVOLUTION = "kernel"


@dataclass(frozen=True)
class FbmBatch:
    grid: Grid
    hurst: HurstParams
    paths: np.ndarray  # (n_paths, N + 1), column 0 is zero
    dW: np.ndarray | None  # (n_paths, N) driving Brownian increments
    seed: int

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.paths, axis=1)


def block_rng(seed: int, block: int) -> np.random.Generator:
    """Counter-based generator for one block of paths."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(block),))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class FbmSampler:
    grid: Grid
    hurst: HurstParams
    method: SamplerMethod = SamplerMethod.CHOLESKY_EXACT
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", SamplerMethod(self.method))
        object.__setattr__(self, "hurst", _as_hurst(self.hurst))
        if not 0 <= int(self.rng_seed) < 2 ** 64:
            raise ValueError("rng_seed must be a 64-bit unsigned integer")

    @cached_property
    def _factor(self) -> np.ndarray:
        if self.method is SamplerMethod.CHOLESKY_EXACT:
            return CovarianceMatrix(self.grid, self.hurst).cholesky
        return KernelMatrix(self.grid, self.hurst).entries[1:, :-1]

    def _block(self, block: int, size: int):
        rng = block_rng(self.rng_seed, block)
        z = rng.standard_normal((size, self.grid.n_steps))
        out = np.zeros((size, self.grid.n_steps + 1))
        if self.method is SamplerMethod.CHOLESKY_EXACT:
            out[:, 1:] = z @ self._factor.T
            return out, None
        dW = z * np.sqrt(self.grid.step)
        out[:, 1:] = dW @ self._factor.T
        return out, dW


def sample_fbm(sampler: FbmSampler, n_paths: int, workers: int = 1) -> FbmBatch:
    """Draw ``n_paths`` paths; blocks of ``BLOCK_SIZE`` have their own RNG stream.

    The output depends only on the seed, never on ``workers``.
    """
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    sampler._factor  # build once before fanning out
    sizes = [min(BLOCK_SIZE, n_paths - k) for k in range(0, n_paths, BLOCK_SIZE)]
    jobs = list(enumerate(sizes))
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda job: sampler._block(*job), jobs))
    else:
        parts = [sampler._block(*job) for job in jobs]
    paths = np.concatenate([p for p, _ in parts])
    dW = None
    if sampler.method is SamplerMethod.KERNEL_CONVOLUTION:
        dW = np.concatenate([d for _, d in parts])
    return FbmBatch(sampler.grid, sampler.hurst, paths, dW, int(sampler.rng_seed))


_MAGIC = b"FBMB"
_VERSION = 1
_HEADER = struct.Struct("<4sHIdQId")  # magic, version, N, H, seed, n_paths, T


def write_batch(batch: FbmBatch, path) -> None:
    """Binary layout: little-endian header then float64 paths, row-major."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, batch.grid.n_steps, batch.hurst.H,
                              batch.seed, batch.n_paths, batch.grid.t_end))
        fh.write(np.ascontiguousarray(batch.paths, dtype="<f8").tobytes())


def read_batch(path) -> FbmBatch:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, N, H, seed, n_paths, T = _HEADER.unpack_from(raw)
    if magic != _MAGIC or version != _VERSION:
        raise ValueError("not an fBm batch file")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(n_paths, N + 1)
    return FbmBatch(Grid(T, N), HurstParams(H), data.copy(), None, seed)


def write_paths_csv(batch: FbmBatch, path) -> None:
    cols = [batch.grid.nodes, *batch.paths]
    header = "t," + ",".join(f"path{k}" for k in range(batch.n_paths))
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=header,
               comments="", fmt="%.17g")
