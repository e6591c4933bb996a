import numpy as np
import pytest
from hypothesis import given, strategies as st

from artifact.grid_core import (Grid, HolderNorm, HurstParams, PathSample, Regime, beta_fn,
                                gamma_fn, holder_norm, holder_seminorm_batch, hurst_constants,
                                sup_norm)

# c_H and d_H from 30-digit arithmetic
FROZEN_CONSTANTS = {
    0.3: (0.73028293407992295, 0.8502170912823433),
    0.35: (0.80880233054911897, 0.89977943914191172),
    0.7: (1.0918091308839126, 1.0024650166442577),
    0.75: (1.0696446350319903, 0.96952854676209776),
}


def test_grid_nodes_uniform_and_exact_end():
    g = Grid(2.5, 10)
    assert len(g) == 11
    assert g.step == 0.25
    assert g.nodes[0] == 0.0 and g.nodes[-1] == 2.5
    assert np.allclose(np.diff(g.nodes), 0.25, rtol=0, atol=1e-15)
    assert g.refine().n_steps == 20


@pytest.mark.parametrize("t_end,n", [(0.0, 16), (-1.0, 16), (np.inf, 16), (1.0, 4), (1.0, 10.5)])
def test_grid_rejects_bad_arguments(t_end, n):
    with pytest.raises(ValueError):
        Grid(t_end, n)


def test_path_sample_is_read_only_and_checked():
    g = Grid(1.0, 8)
    p = PathSample(g, (np.arange(9.0),))
    with pytest.raises(ValueError):
        p.components[0][0] = 1.0
    with pytest.raises(IndexError):
        p.component(1)
    with pytest.raises(ValueError):
        PathSample(g, (np.arange(8.0),))
    with pytest.raises(ValueError):
        PathSample(g, (np.full(9, np.nan),))
    with pytest.raises(ValueError):
        PathSample(g, (np.zeros(9),) * 3)


def test_path_csv_round_trip(tmp_path):
    g = Grid(1.0, 8)
    p = PathSample(g, (np.sin(g.nodes), np.cos(g.nodes)))
    p.to_csv(tmp_path / "p.csv")
    data = np.loadtxt(tmp_path / "p.csv", delimiter=",", skiprows=1)
    assert np.array_equal(data[:, 1], p.component(0))
    assert np.array_equal(data[:, 2], p.component(1))


@pytest.mark.parametrize("H", sorted(FROZEN_CONSTANTS))
def test_hurst_constants_frozen(H):
    c, d = hurst_constants(H)
    c_ref, d_ref = FROZEN_CONSTANTS[H]
    assert c == pytest.approx(c_ref, rel=1e-14)
    assert d == pytest.approx(d_ref, rel=1e-14)


def test_hurst_params_regimes_and_windows():
    assert HurstParams(0.3).regime is Regime.SINGULAR
    assert HurstParams(0.7).regime is Regime.REGULAR
    assert HurstParams(0.7).alpha == pytest.approx(0.2)
    assert not HurstParams(0.2).in_theorem_range()
    with pytest.raises(ValueError):
        HurstParams(0.2).require_theorem_range()
    for bad in (0.0, 0.5, 1.0, -0.1):
        with pytest.raises(ValueError):
            HurstParams(bad)
    lo, hi = HurstParams(0.7).holder_window()
    assert lo == pytest.approx(0.2) and hi == pytest.approx(0.45)


def test_special_functions_reject_nonpositive():
    assert gamma_fn(0.5) == pytest.approx(np.sqrt(np.pi), rel=1e-15)
    assert beta_fn(2.0, 3.0) == pytest.approx(1.0 / 12.0, rel=1e-15)
    with pytest.raises(ValueError):
        gamma_fn(0.0)
    with pytest.raises(ValueError):
        beta_fn(1.0, -1.0)


def test_holder_norm_of_linear_path():
    # |t - s| / |t - s|**beta is largest at the full lag: T**(1 - beta)
    g = Grid(2.0, 16)
    p = PathSample(g, (g.nodes,))
    assert sup_norm(p) == 2.0
    assert holder_norm(p, beta=0.25) == pytest.approx(2.0 + 2.0 ** 0.75, rel=1e-14)
    assert HolderNorm(0.25)(p) == holder_norm(p, beta=0.25)


def test_holder_seminorm_brute_force(rng):
    g = Grid(1.0, 40)
    x = rng.standard_normal((3, 41))
    t = g.nodes
    dt = np.abs(t[:, None] - t[None, :])
    np.fill_diagonal(dt, 1.0)
    brute = [np.max(np.abs(r[:, None] - r[None, :]) / dt ** 0.3) for r in x]
    got = holder_seminorm_batch(x, t, 0.3, chunk=7)
    assert np.allclose(got, brute, rtol=1e-14)


@given(c=st.floats(-5, 5), beta=st.floats(0.05, 0.95), seed=st.integers(0, 2 ** 16))
def test_holder_seminorm_homogeneous(c, beta, seed):
    g = Grid(1.0, 16)
    x = np.random.default_rng(seed).standard_normal(17)
    a = holder_seminorm_batch(c * x, g.nodes, beta)[0]
    b = holder_seminorm_batch(x, g.nodes, beta)[0]
    assert a == pytest.approx(abs(c) * b, rel=1e-12, abs=1e-300)
