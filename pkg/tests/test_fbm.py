import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, special

from artifact.fbm import (BLOCK_SIZE, FbmSampler, KernelMatrix, SamplerMethod, apply_K,
                          apply_K_adjoint, apply_K_inverse, fbm_covariance, kernel_closed_form,
                          kernel_value, read_batch, sample_fbm, write_batch)
from artifact.grid_core import Grid, HurstParams

# K^H(t, s) from 30-digit quadrature of the defining integrals
FROZEN_KERNEL = {
    (0.35, 1.0, 0.3): 0.88916962209715855,
    (0.35, 0.8, 0.05): 0.95887986201163598,
    (0.7, 1.0, 0.3): 1.0736357155302256,
    (0.7, 0.8, 0.05): 1.2301907377965997,
}


@pytest.mark.parametrize("key", sorted(FROZEN_KERNEL))
def test_kernel_frozen_values(key):
    H, t, s = key
    assert kernel_value(H, t, s) == pytest.approx(FROZEN_KERNEL[key], rel=1e-11)
    assert kernel_closed_form(H, t, s) == pytest.approx(FROZEN_KERNEL[key], rel=1e-12)


def test_kernel_value_domain():
    with pytest.raises(ValueError):
        kernel_value(0.35, 1.0, 0.0)
    with pytest.raises(ValueError):
        kernel_value(0.35, 0.5, 0.5)


@pytest.mark.parametrize("H", [0.3, 0.7])
def test_variance_from_kernel(H):
    # int_0^t K(t, s)^2 ds = t^(2H)
    val, _ = integrate.quad(lambda s: kernel_closed_form(H, 0.7, s) ** 2, 0, 0.7, limit=200)
    assert val == pytest.approx(0.7 ** (2 * H), rel=1e-6)


@pytest.mark.parametrize("H", [0.3, 0.45, 0.6, 0.75])
def test_gram_matches_covariance(H):
    assert KernelMatrix(Grid(1.0, 256), HurstParams(H)).gram_error() <= 5e-3


@pytest.mark.parametrize("H", [0.35, 0.7])
def test_apply_K_against_quadrature(H):
    g = Grid(1.0, 256)
    t = g.nodes
    out = apply_K(np.cos(t), g, H)
    assert out[0] == 0.0
    for i in (32, 128, 256):
        ref, _ = integrate.quad(lambda r: kernel_closed_form(H, t[i], r) * np.cos(r), 0, t[i],
                                limit=200)
        assert out[i] == pytest.approx(ref, rel=1e-4)


@pytest.mark.parametrize("H", [0.35, 0.7])
def test_apply_K_adjoint_against_quadrature(H):
    g = Grid(1.0, 256)
    t = g.nodes
    out = apply_K_adjoint(np.exp(-t), g, H)
    hp = HurstParams(H)
    for i in (16, 128, 200):
        s = t[i]
        smooth = lambda r: hp.c_H * special.hyp2f1(H - 0.5, 0.5 - H, H + 0.5, 1 - r / s) * np.exp(-r)
        ref, _ = integrate.quad(smooth, s, 1.0, weight="alg", wvar=(H - 0.5, 0.0))
        assert out[i] == pytest.approx(ref, rel=1e-4)
    assert out[-1] == 0.0


@pytest.mark.parametrize("H", [0.35, 0.7])
def test_adjoint_duality(H):
    g = Grid(1.0, 512)
    t = g.nodes
    u, w = np.sin(3 * t), np.exp(-t)
    q = np.full(len(t), g.step)
    q[0] = q[-1] = 0.5 * g.step
    lhs = q @ (apply_K(u, g, H) * w)
    rhs = q @ (u * apply_K_adjoint(w, g, H))
    assert lhs == pytest.approx(rhs, rel=1e-4)


@pytest.mark.parametrize("H", [0.35, 0.7])
def test_inverse_round_trip_all_nodes(H):
    g = Grid(1.0, 512)
    t = g.nodes
    h = np.cos(2 * t) + t
    back = apply_K_inverse(apply_K(h, g, H), g, H)
    assert np.max(np.abs(back - h)) <= 1e-3


def test_inverse_needs_four_nodes():
    with pytest.raises(ValueError):
        apply_K_inverse(np.zeros(3), Grid(1.0, 8), 0.3)


@given(c=st.lists(st.floats(-2, 2), min_size=1, max_size=4), a=st.floats(-3, 3))
def test_apply_K_linear(c, a):
    g = Grid(1.0, 32)
    t = g.nodes
    f = np.polynomial.polynomial.polyval(t, c)
    lhs = apply_K(f + a * np.sin(t), g, 0.35)
    rhs = apply_K(f, g, 0.35) + a * apply_K(np.sin(t), g, 0.35)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("method", list(SamplerMethod))
def test_sampler_covariance(method):
    g = Grid(1.0, 16)
    H = 0.3
    batch = sample_fbm(FbmSampler(g, HurstParams(H), method, rng_seed=7), 20000)
    X = batch.paths[:, 1:]
    emp = X.T @ X / batch.n_paths
    t = g.nodes[1:]
    R = fbm_covariance(H, t[:, None], t[None, :])
    # sampling error of a second moment is below 5 * sqrt(2 / n) ~ 0.05
    assert np.max(np.abs(emp - R)) <= 0.05
    assert np.all(batch.paths[:, 0] == 0.0)


def test_sampler_deterministic_and_worker_independent():
    g = Grid(1.0, 32)
    s = FbmSampler(g, HurstParams(0.7), rng_seed=99)
    a = sample_fbm(s, 3 * BLOCK_SIZE + 5, workers=1).paths
    b = sample_fbm(FbmSampler(g, HurstParams(0.7), rng_seed=99), 3 * BLOCK_SIZE + 5, workers=3).paths
    assert np.array_equal(a, b)
    # blocks have their own streams, so a prefix is reproduced by a shorter run
    c = sample_fbm(s, BLOCK_SIZE, workers=2).paths
    assert np.array_equal(a[:BLOCK_SIZE], c)
    d = sample_fbm(FbmSampler(g, HurstParams(0.7), rng_seed=100), 10).paths
    assert not np.array_equal(a[:10], d)


def test_kernel_sampler_exposes_brownian_increments():
    g = Grid(1.0, 16)
    batch = sample_fbm(FbmSampler(g, HurstParams(0.35), "kernel", 3), 4)
    assert batch.dW.shape == (4, 16)
    K = KernelMatrix(g, HurstParams(0.35)).entries
    assert np.allclose(batch.paths[:, 1:], batch.dW @ K[1:, :-1].T, rtol=1e-14, atol=1e-15)


def test_sampler_rejects_bad_seed_and_count():
    with pytest.raises(ValueError):
        FbmSampler(Grid(1.0, 8), HurstParams(0.3), rng_seed=-1)
    with pytest.raises(ValueError):
        sample_fbm(FbmSampler(Grid(1.0, 8), HurstParams(0.3)), 0)


def test_batch_binary_round_trip(tmp_path):
    batch = sample_fbm(FbmSampler(Grid(2.0, 24), HurstParams(0.6), rng_seed=5), 11)
    write_batch(batch, tmp_path / "b.fbmb")
    back = read_batch(tmp_path / "b.fbmb")
    assert np.array_equal(back.paths, batch.paths)
    assert back.grid == batch.grid and back.hurst == batch.hurst and back.seed == 5
    (tmp_path / "bad").write_bytes(b"XXXX" + bytes(60))
    with pytest.raises(ValueError):
        read_batch(tmp_path / "bad")
