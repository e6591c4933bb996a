import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate, special

from artifact.frac_calc import (FracOp, Kind, Side, frac_derivative, frac_integral,
                                frac_norm_bound_check, right_unit_weights, unit_weights,
                                weighted_frac_op)
from artifact.grid_core import Grid

G1024 = Grid(1.0, 1024)


def rel_sup(a, b):
    return np.max(np.abs(a - b)) / np.max(np.abs(b))


def cos_integral(t, order):
    """I^order cos from its power series."""
    return sum((-1) ** k * t ** (2 * k + order) / special.gamma(2 * k + 1 + order)
               for k in range(30))


def test_integral_of_constant():
    t = G1024.nodes
    got = frac_integral(np.ones_like(t), G1024, 0.3)
    exact = t ** 0.3 / special.gamma(1.3)
    assert got[0] == 0.0
    assert np.max(np.abs(got[1:] / exact[1:] - 1.0)) <= 1e-4


@pytest.mark.parametrize("mu", [1.0, 2.0, 0.5])
@pytest.mark.parametrize("alpha", [0.1, 0.25, 0.5, 0.8])
def test_monomial_rule(mu, alpha):
    t = G1024.nodes
    exact = special.gamma(mu + 1) / special.gamma(mu + 1 + alpha) * t ** (mu + alpha)
    assert rel_sup(frac_integral(t ** mu, G1024, alpha), exact) <= 1e-3


def test_semigroup_exact_power_composition():
    # I^0.3 cos = t^0.3 g with g smooth; the outer operator carries t^0.3 exactly
    t = G1024.nodes
    f = np.cos(t)
    inner = weighted_frac_op(f, G1024, 0.3, outer_power=-0.3)
    composed = weighted_frac_op(inner, G1024, 0.2, inner_power=0.3)
    assert np.max(np.abs(composed - frac_integral(f, G1024, 0.5))) <= 5e-4
    assert np.max(np.abs(composed - cos_integral(t, 0.5))) <= 5e-4


def test_semigroup_plain_composition_away_from_origin():
    # feeding t^0.3-type data to the hat-function rule costs accuracy near 0 only
    t = G1024.nodes
    plain = frac_integral(frac_integral(np.cos(t), G1024, 0.3), G1024, 0.2)
    far = t >= 0.05
    assert np.max(np.abs(plain - cos_integral(t, 0.5))[far]) <= 5e-4
    assert np.max(np.abs(plain - cos_integral(t, 0.5))) <= 1e-2


@pytest.mark.parametrize("alpha", [0.1, 0.3, 0.6])
def test_derivative_of_power_is_constant(alpha):
    t = G1024.nodes
    exact = special.gamma(1 + alpha)
    # exact power folded into the weights
    weighted = weighted_frac_op(np.ones_like(t), G1024, alpha, inner_power=alpha,
                                kind=Kind.DERIVATIVE)
    assert np.max(np.abs(weighted - exact)) <= 1e-12
    # sampled t^alpha is not linear on the first cells; the error stays local
    plain = frac_derivative(t ** alpha, G1024, alpha)
    assert np.max(np.abs(plain - exact)[t >= 0.05]) <= 1e-3 * exact


def test_derivative_of_constant():
    t = G1024.nodes
    res = frac_derivative(np.full_like(t, 2.0), G1024, 0.4, return_info=True)
    exact = 2.0 * t[1:] ** -0.4 / special.gamma(0.6)
    assert np.max(np.abs(res.values[1:] / exact - 1.0)) <= 1e-12
    assert res.extrapolated == (0,)


@pytest.mark.parametrize("alpha", [0.1, 0.25, 0.45])
def test_inversion(alpha):
    t = G1024.nodes
    back = frac_derivative(frac_integral(np.sin(t), G1024, alpha), G1024, alpha)
    assert np.max(np.abs(back - np.sin(t))) <= 1e-3


@pytest.mark.parametrize("alpha", [0.1, 0.25, 0.45])
def test_convergence_order_smooth_input(alpha):
    errs = []
    for n in (128, 256, 512):
        g = Grid(1.0, n)
        t = g.nodes
        errs.append(rel_sup(frac_integral(np.cos(t), g, alpha), cos_integral(t, alpha)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 1.3)


def test_invalid_orders_and_powers():
    for bad in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ValueError):
            frac_integral(np.ones(9), Grid(1.0, 8), bad)
    with pytest.raises(ValueError):
        weighted_frac_op(np.ones(9), Grid(1.0, 8), 0.3, inner_power=-1.0)
    with pytest.raises(ValueError):
        FracOp(Grid(1.0, 8), 0.3, Side.RIGHT_MINUS, power=0.2)


def test_weighted_zero_input():
    g = Grid(1.0, 64)
    for kind in Kind:
        for side in Side:
            out = weighted_frac_op(np.zeros(65), g, 0.3, 0.3, -0.3, side, kind)
            assert np.array_equal(out, np.zeros(65))


def test_singular_composite_on_constant():
    # s^-a I^a[u^a] = Gamma(1+a)/Gamma(1+2a) s^a
    g = G1024
    t = g.nodes
    a = 0.15
    got = weighted_frac_op(np.ones_like(t), g, a, inner_power=a, outer_power=-a)
    exact = special.gamma(1 + a) / special.gamma(1 + 2 * a) * t ** a
    assert np.max(np.abs(got - exact)) <= 1e-10


def test_regular_composite_on_linear():
    # s^a D^a[u^-a u] = s^a Gamma(2-a)/Gamma(2-2a) s^(1-2a)
    g = G1024
    t = g.nodes
    a = 0.2
    got = weighted_frac_op(t, g, a, inner_power=-a, outer_power=a, kind=Kind.DERIVATIVE)
    exact = special.gamma(2 - a) / special.gamma(2 - 2 * a) * t ** (1 - a)
    assert np.max(np.abs(got - exact)) <= 1e-3


def test_right_integral_of_constant():
    g = Grid(2.0, 512)
    t = g.nodes
    got = frac_integral(np.ones_like(t), g, 0.35, side=Side.RIGHT_MINUS)
    exact = (2.0 - t) ** 0.35 / special.gamma(1.35)
    assert np.max(np.abs(got - exact)) <= 1e-12


def test_right_weights_without_power_match_reflection():
    for kind in Kind:
        W = right_unit_weights(40, 0.3, 0.0, kind)
        L = unit_weights(40, 0.3, 0.0, kind)[::-1, ::-1]
        assert np.allclose(W[1:-1], L[1:-1], rtol=0, atol=1e-12)


def _right_quad(F, s, T, alpha, kind):
    if kind is Kind.INTEGRAL:
        val, _ = integrate.quad(F, s, T, weight="alg", wvar=(alpha - 1.0, 0.0), epsabs=1e-13)
        return val / special.gamma(alpha)
    # (F(T) (T - s)^-a - int (y - s)^-a F'(y) dy) / Gamma(1 - a)
    h = 1e-6

    def dF(y):
        return (F(y + h) - F(y - h)) / (2 * h)

    val, _ = integrate.quad(dF, s, T, weight="alg", wvar=(-alpha, 0.0), epsabs=1e-12)
    return (F(T) * (T - s) ** -alpha - val) / special.gamma(1.0 - alpha)


@pytest.mark.parametrize("kind", list(Kind))
@pytest.mark.parametrize("p", [0.3, -0.3])
def test_weighted_right_operator_against_quadrature(kind, p):
    g = Grid(1.0, 512)
    t = g.nodes
    alpha = 0.3
    out = weighted_frac_op(np.cos(t), g, alpha, inner_power=p, outer_power=-p,
                           side=Side.RIGHT_MINUS, kind=kind)
    for i in (64, 256, 448):
        ref = t[i] ** -p * _right_quad(lambda y: y ** p * np.cos(y), t[i], 1.0, alpha, kind)
        assert out[i] == pytest.approx(ref, rel=2e-4, abs=2e-5)


def test_fractional_integration_by_parts():
    # int f I^a_{0+} g = int g I^a_{T-} f; the trapezoid rule meets s^a behaviour at the ends
    g = Grid(1.0, 1024)
    t = g.nodes
    f, h = np.exp(-t), np.cos(3 * t)
    w = np.full(len(t), g.step)
    w[0] = w[-1] = 0.5 * g.step
    lhs = w @ (f * frac_integral(h, g, 0.4))
    rhs = w @ (h * frac_integral(f, g, 0.4, side=Side.RIGHT_MINUS))
    assert lhs == pytest.approx(rhs, rel=1e-3)


coef = st.lists(st.floats(-3, 3), min_size=1, max_size=5)


@given(c1=coef, c2=coef, a=st.floats(-2, 2), alpha=st.floats(0.05, 0.95))
def test_integral_is_linear(c1, c2, a, alpha):
    g = Grid(1.0, 32)
    t = g.nodes
    f1 = np.polynomial.polynomial.polyval(t, c1)
    f2 = np.polynomial.polynomial.polyval(t, c2)
    lhs = frac_integral(f1 + a * f2, g, alpha)
    rhs = frac_integral(f1, g, alpha) + a * frac_integral(f2, g, alpha)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


@given(c=coef, alpha=st.floats(0.05, 0.95), p=st.sampled_from([1.0, 2.0, 4.0]))
def test_norm_bound_holds(c, alpha, p):
    g = Grid(1.5, 64)
    f = np.polynomial.polynomial.polyval(g.nodes, c) * np.sin(5 * g.nodes)
    lhs, rhs = frac_norm_bound_check(f, g, alpha, p)
    assert lhs <= rhs * (1 + 1e-9) + 1e-14
