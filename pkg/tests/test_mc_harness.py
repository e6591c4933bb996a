import math

import numpy as np
import pytest

from artifact.drift import make_drift
from artifact.grid_core import Grid, HolderNorm
from artifact.mc_harness import (MIN_PATHS, ComponentMode, GammaRow, SdeSimConfig,
                                 StatisticalError, TubeEstimate, deviation_norms,
                                 epsilon_ladder, equivalence_constant, gamma_ratio,
                                 simulate_sde, smallball_scaling, tube_probabilities,
                                 tube_probability, write_gamma_csv, write_smallball_csv)
from artifact.om_action import ProblemKind, build_reference_path

ND, DG = ProblemKind.NONDEGENERATE, ProblemKind.DEGENERATE


def config(drift="doubleWell", kind=ND, initial=(1.0,), N=64, H=0.35, n_paths=500, seed=1,
           **kw):
    degenerate = kind is DG
    d = make_drift(drift, degenerate=degenerate, sigma="identity_y" if degenerate else "zero", **kw)
    return SdeSimConfig(d, kind, initial, Grid(1.0, N), H, n_paths, seed)


def euler(drift, y0, noise, h):
    y = np.full(noise.shape[0], y0)
    out = [y.copy()]
    for i in range(noise.shape[1] - 1):
        y = y + drift.state_drift(y) * h + (noise[:, i + 1] - noise[:, i])
        out.append(y.copy())
    return np.stack(out, axis=1)


def test_zero_drift_is_pure_noise():
    b = simulate_sde(config("zero", n_paths=300))
    assert np.array_equal(b.drift_part, np.zeros_like(b.noise))
    assert np.array_equal(b.y, 1.0 + b.noise)
    assert b.n_aborted == 0


def test_degenerate_first_component_is_left_sum():
    cfg = config("zero", DG, (0.5, 0.2), n_paths=200)
    b = simulate_sde(cfg)
    h = cfg.grid.step
    left = 0.5 + np.concatenate([np.zeros((200, 1)), np.cumsum(b.y[:, :-1] * h, axis=1)], axis=1)
    assert np.allclose(b.x, left, rtol=1e-13, atol=1e-13)


def test_scheme_matches_euler_and_converges_strongly():
    cfg = config(N=512, n_paths=400)
    fine = simulate_sde(cfg)
    h = cfg.grid.step
    assert np.allclose(euler(cfg.drift, 1.0, fine.noise, h), fine.y, rtol=0, atol=1e-12)
    errs = []
    for k in (8, 4, 2):
        coarse = euler(cfg.drift, 1.0, fine.noise[:, ::k], k * h)
        errs.append(np.mean(np.abs(coarse[:, -1] - fine.y[:, -1])))
    assert errs[0] > errs[1] > errs[2]
    assert errs[0] / errs[1] >= 1.6


def test_linear_drift_mean():
    # Euler mean is y (1 - h)^N exactly; noise is centred
    cfg = config("linear", n_paths=20000, N=128, lam=-1.0, seed=3)
    b = simulate_sde(cfg)
    yT = b.y[:, -1]
    se = yT.std() / math.sqrt(len(yT))
    assert abs(yT.mean() - (1 - 1 / 128) ** 128) <= 5 * se
    assert abs(yT.mean() - math.exp(-1.0)) <= 5 * se + 2e-3


def test_exploding_paths_are_aborted():
    cfg = config("polynomial", initial=(5.0,), coeffs=(0.0, 0.0, 3.0), n_paths=50)
    b = simulate_sde(cfg)
    assert b.n_aborted > 0
    assert np.all(np.isnan(b.y[b.aborted, -1]))
    norms = deviation_norms(b.y - 5.0, cfg.grid, "sup")
    assert np.all(np.isinf(norms[b.aborted]))


def test_simulation_is_deterministic_and_worker_independent():
    a = simulate_sde(config(n_paths=700, seed=9))
    cfg = config(n_paths=700, seed=9)
    b = simulate_sde(SdeSimConfig(cfg.drift, cfg.kind, cfg.initial, cfg.grid, cfg.H, 700, 9,
                                  workers=3))
    assert np.array_equal(a.y, b.y)
    c = simulate_sde(config(n_paths=700, seed=10))
    assert not np.array_equal(a.y, c.y)


def reference(kind=ND, H=0.35, drift="doubleWell", initial=(1.0,), N=64):
    degenerate = kind is DG
    d = make_drift(drift, degenerate=degenerate, sigma="identity_y" if degenerate else "zero")
    ref = build_reference_path(kind, d, Grid(1.0, N), H, initial, phi2_dot=np.zeros(N + 1))
    return d, ref


def test_null_ratio_is_exactly_one():
    d, ref = reference(drift="zero", initial=(0.0,))
    rows = gamma_ratio(ref, d, 0.35, epsilon_ladder(2.0, 8, 0.7), n_paths=2000, seed=4)
    assert any(r.feasible for r in rows)
    for r in rows:
        assert r.hits_num == r.hits_den == r.hits_both
        if r.hits_den:
            assert r.ratio == 1.0 and r.std_err == 0.0


def test_tube_probabilities_nested_and_extreme():
    d, ref = reference()
    b = simulate_sde(config(n_paths=1000))
    eps = [0.0, 0.2, 0.5, 1.0, 2.0, 1e9]
    est = tube_probabilities(b, ref, eps)
    hits = [e.n_hits for e in est]
    assert hits == sorted(hits)
    assert est[0].p_hat == 0.0 and est[-1].p_hat == 1.0
    assert tube_probability(b, ref, 0.5).n_hits == est[2].n_hits


def test_full_state_tube_inside_observed_tube():
    d, ref = reference(DG, initial=(0.5, 0.2), drift="doubleWell")
    b = simulate_sde(config(kind=DG, initial=(0.5, 0.2), n_paths=1000))
    eps = [0.3, 0.6, 1.0, 2.0]
    full = tube_probabilities(b, ref, eps, component_mode=ComponentMode.FULL_Z)
    obs = tube_probabilities(b, ref, eps, component_mode=ComponentMode.Y_ONLY)
    assert all(f.n_hits <= o.n_hits for f, o in zip(full, obs))


def test_equivalence_constant_bounded_by_horizon():
    # x - phi1 integrates y - phi2, so the x-deviation is at most T eps up to O(h)
    d, ref = reference(DG, initial=(0.5, 0.2), drift="doubleWell")
    b = simulate_sde(config(kind=DG, initial=(0.5, 0.2), n_paths=2000))
    const, hits = equivalence_constant(b, ref, 0.8)
    assert hits > 0
    assert 0.0 < const <= 1.05
    nd, ndref = reference()
    with pytest.raises(ValueError):
        equivalence_constant(simulate_sde(config(n_paths=10)), ndref, 0.8)


def test_holder_norm_dominates_sup():
    g = Grid(1.0, 32)
    dev = np.random.default_rng(0).standard_normal((5, 33))
    assert np.all(deviation_norms(dev, g, HolderNorm(0.2)) >= deviation_norms(dev, g, "sup"))
    with pytest.raises(ValueError):
        deviation_norms(dev, g, "l2")


def test_standard_errors():
    a = TubeEstimate(0.1, "sup", 1000, 100)
    b = TubeEstimate(0.1, "sup", 2000, 200)
    assert a.std_err / b.std_err == pytest.approx(math.sqrt(2), rel=1e-14)
    row = GammaRow(0.1, 1000, 100, 50, 40)
    assert row.ratio == 2.0 and row.std_err > 0
    assert not GammaRow(0.1, 1000, 100, 29, 20).feasible
    assert math.isnan(GammaRow(0.1, 1000, 0, 29, 0).log_ratio)


def test_gamma_ratio_argument_checks():
    d, ref = reference()
    with pytest.raises(ValueError):
        gamma_ratio(ref, d, 0.35, [1.0], n_paths=MIN_PATHS - 1)
    with pytest.raises(ValueError):
        gamma_ratio(ref, d, 0.7, [1.0], n_paths=MIN_PATHS)


def test_epsilon_ladder():
    assert epsilon_ladder(1.0, 3) == [1.0, 0.5, 0.25]
    for args in ((1.0, 3, 1.0), (0.0, 3), (1.0, 0)):
        with pytest.raises(ValueError):
            epsilon_ladder(*args)


def test_smallball_sup_fit():
    fit = smallball_scaling(0.35, "sup", epsilon_ladder(2.0, 16, 0.9), 4000, seed=2,
                            grid=Grid(1.0, 128))
    assert fit.kappa == 0.35
    assert fit.slope < 0 and fit.rate_constant == -fit.slope
    assert fit.r2 >= 0.95
    assert len(fit.estimates) >= 4
    p = [e.p_hat for e in fit.estimates]
    assert p == sorted(p, reverse=True)


def test_smallball_holder_slope_negative():
    fit = smallball_scaling(0.35, HolderNorm(0.05), epsilon_ladder(6.0, 16, 0.9), 2000,
                            seed=2, grid=Grid(1.0, 64))
    assert fit.kappa == pytest.approx(0.3)
    assert fit.slope < 0


def test_smallball_needs_hits():
    with pytest.raises(StatisticalError):
        smallball_scaling(0.35, "sup", [0.05, 0.04, 0.03, 0.02], 500, grid=Grid(1.0, 32))
    with pytest.raises(ValueError):
        smallball_scaling(0.35, HolderNorm(0.4), [1.0], 500)


def test_csv_writers(tmp_path):
    d, ref = reference()
    rows = gamma_ratio(ref, d, 0.35, [2.0, 1.0], n_paths=200, seed=1)
    write_gamma_csv(rows, tmp_path / "g.csv")
    assert (tmp_path / "g.csv").read_text().splitlines()[0].startswith("epsilon,p_num")
    fit = smallball_scaling(0.35, "sup", epsilon_ladder(2.0, 8, 0.85), 1000, grid=Grid(1.0, 32))
    write_smallball_csv(fit, tmp_path / "s.csv")
    assert len((tmp_path / "s.csv").read_text().splitlines()) == len(fit.estimates) + 1
