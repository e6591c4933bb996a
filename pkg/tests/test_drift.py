import numpy as np
import pytest

from artifact.drift import (DRIFT_NAMES, DriftSpec, DriftValidationError, check_partials,
                            make_drift, polynomial_drift)


@pytest.mark.parametrize("name", DRIFT_NAMES)
def test_registry_drifts_pass_validation(name):
    d = make_drift(name, coeffs=(1.0, 0.5, -0.2))
    check_partials(d, n_points=200, seed=3)


def test_double_well_slots():
    y = np.array([-1.0, 0.0, 0.5, 2.0])
    d = make_drift("doubleWell")
    assert np.allclose(d.state_drift(y), y - y ** 3)
    by, byy = d.state_partials(y)
    assert np.allclose(by, 1 - 3 * y ** 2) and np.allclose(byy, -6 * y)
    dx = make_drift("doubleWell", degenerate=True, sigma="identity_y")
    assert np.allclose(dx.b(y, 0 * y), y - y ** 3)
    assert np.allclose(dx.b_y(y, y), 0.0)
    assert np.allclose(dx.sigma(y, 2 * y), 2 * y)


def test_wrong_partial_is_caught():
    with pytest.raises(DriftValidationError, match="b_y"):
        DriftSpec(b=lambda x, y: y ** 2, b_y=lambda x, y: y)


def test_side_effects_are_caught():
    calls = []

    def b(x, y):
        calls.append(1)
        return y + len(calls)

    with pytest.raises(DriftValidationError, match="not deterministic"):
        DriftSpec(b=b, b_y=lambda x, y: np.ones_like(y))


def test_unknown_names():
    with pytest.raises(ValueError):
        make_drift("cubic")
    with pytest.raises(ValueError):
        make_drift("doubleWell", sigma="exp")
    with pytest.raises(ValueError):
        make_drift("polynomial")
    with pytest.raises(ValueError):
        polynomial_drift([1.0], arg="z")
