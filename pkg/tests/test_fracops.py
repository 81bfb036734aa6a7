import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from stfde.brownian import BrownianIncrements
from stfde.errors import DomainError, GridMismatchError
from stfde.fracops import (
    GridFunction,
    TimeGrid,
    caputo_derivative,
    causal_convolve,
    cell_moments,
    rl_derivative,
    rl_integral,
    rl_integral_array,
    rl_integral_ito,
    rl_integral_weighted,
    rl_matrix,
    starting_weights,
    trapezoid_convolve,
)


def gf(grid, f):
    return GridFunction.from_callable(grid, f)


def quad_rl(f, order, t):
    """Adaptive quadrature of I^order f at t with the kernel as algebraic weight."""
    val, _ = integrate.quad(f, 0.0, t, weight="alg", wvar=(0.0, order - 1.0), epsabs=1e-14, epsrel=1e-13, limit=200)
    return val / math.gamma(order)


# {{{ grid types


def test_grid():
    g = TimeGrid(2.0, 4)
    assert g.h == 0.5
    assert g.nodes.tolist() == [0.0, 0.5, 1.0, 1.5, 2.0]
    assert g.refine().n_steps == 8
    for bad in [(0.0, 4), (1.0, 1), (1.0, 2.5), (float("inf"), 4)]:
        with pytest.raises(DomainError):
            TimeGrid(*bad)


def test_grid_function_checks():
    g = TimeGrid(1.0, 4)
    with pytest.raises(DomainError):
        GridFunction(g, np.zeros(4))
    with pytest.raises(DomainError):
        GridFunction(g, np.array([0, 1, np.nan, 0, 0]))


def test_causal_convolve_paths():
    rng = np.random.default_rng(1)
    k, y = rng.standard_normal(50), rng.standard_normal((3, 50))
    ref = np.stack([np.convolve(k, row)[:50] for row in y])
    assert np.allclose(causal_convolve(k, y), ref, atol=1e-12)
    assert np.allclose(causal_convolve(k, y[0]), ref[0], atol=1e-14)


# }}}


# {{{ Riemann-Liouville integral


def test_integral_of_one_is_t():
    g = TimeGrid(1.0, 100)
    out = rl_integral(gf(g, np.ones_like), 1.0)
    assert np.allclose(out.values, g.nodes, atol=1e-14)


@pytest.mark.parametrize(("gamma_", "order"), [(1.0, 0.5), (2.0, 0.3), (0.5, 0.7), (1.5, 1.3)])
def test_power_law(gamma_, order):
    exact = lambda t: math.gamma(gamma_ + 1) / math.gamma(gamma_ + order + 1) * t ** (gamma_ + order)
    errs = []
    for n in (100, 200):
        g = TimeGrid(1.0, n)
        out = rl_integral(gf(g, lambda t: t**gamma_), order)
        errs.append(np.max(np.abs(out.values - exact(g.nodes))))
    assert errs[0] <= 1e-3
    if errs[1] > 1e-14:
        # second order for smooth data, about h^(1 + gamma / 2) for t^0.5 and t^1.5
        assert errs[0] / errs[1] >= 2 ** min(2.0, 1 + gamma_ / 2) * 0.9


@pytest.mark.parametrize(("gamma_", "order"), [(0.5, 0.7), (0.3, 0.3), (1.5, 1.3)])
def test_power_law_with_singular_hint(gamma_, order):
    g = TimeGrid(1.0, 200)
    out = rl_integral(gf(g, lambda t: t**gamma_), order, singular=[gamma_])
    exact = math.gamma(gamma_ + 1) / math.gamma(gamma_ + order + 1) * g.nodes ** (gamma_ + order)
    assert np.max(np.abs(out.values - exact)) <= 1e-12


def test_sine_against_quadrature():
    g = TimeGrid(1.0, 1000)
    out = rl_integral(gf(g, np.sin), 0.5).values[-1]
    assert out == pytest.approx(quad_rl(math.sin, 0.5, 1.0), rel=1e-4)


def test_integral_rejects_order():
    g = TimeGrid(1.0, 10)
    with pytest.raises(DomainError):
        rl_integral(gf(g, np.sin), 0.0)


def test_starting_weights_exact_on_powers():
    h, n = 0.01, 100
    w = starting_weights(0.6, h, n, [0.3, 0.9])
    t = np.arange(n + 1) * h
    for e in (0.3, 0.9):
        corrected = rl_integral_array(t**e, 0.6, h) + (t[1:3] ** e) @ w
        exact = math.gamma(e + 1) / math.gamma(e + 1.6) * t ** (e + 0.6)
        assert np.max(np.abs(corrected - exact)) <= 1e-13
    # integers and exponents >= 2 need no correction
    assert starting_weights(0.6, h, n, [1.0, 2.5]).shape == (0, n + 1)


def test_matrix_matches_uniform_rule():
    g = TimeGrid(1.0, 64)
    f = np.cos(3 * g.nodes)
    for order in (0.4, 1.0, 1.7):
        assert np.allclose(rl_matrix(g.nodes, order) @ f, rl_integral_array(f, order, g.h), atol=1e-13)


def test_matrix_graded_mesh():
    t = np.linspace(0, 1, 81) ** 2
    out = rl_matrix(t, 0.5) @ t
    exact = 1 / math.gamma(2.5) * t**1.5
    assert np.max(np.abs(out - exact)) <= 1e-13
    with pytest.raises(DomainError):
        rl_matrix(np.array([0.0, 0.5, 0.4]), 0.5)


@pytest.mark.parametrize(("order", "power"), [(0.3, -0.4), (0.5, 0.0), (1.2, 0.7)])
def test_weighted_integral_exact(order, power):
    # I^a [t^p (1 + t)] in closed form; the piecewise linear factor is exact
    h, n = 0.01, 100
    t = np.arange(n + 1) * h
    out = rl_integral_weighted(1 + t, order, h, power)
    with np.errstate(divide="ignore"):
        exact = sum(
            math.gamma(q + 1) / math.gamma(q + 1 + order) * t ** (q + order) for q in (power, power + 1)
        )
    assert np.max(np.abs(out - exact)[1:]) <= 1e-13
    with pytest.raises(DomainError):
        rl_integral_weighted(t, order, h, -1.0)


def test_trapezoid_convolve_with_singular_data():
    exact, _ = integrate.quad(lambda s: math.exp(-(1 - s)) * (s**0.4 + s**1.3), 0, 1, epsabs=1e-14)
    errs, plain = [], []
    for n in (200, 400):
        g = TimeGrid(1.0, n)
        t = g.nodes
        out = trapezoid_convolve(np.exp(-t), t**0.4 + t**1.3, g.h, singular=[0.4, 1.3])
        assert out[0] == 0.0
        errs.append(abs(out[-1] - exact))
        plain.append(abs(trapezoid_convolve(np.exp(-t), t**0.4 + t**1.3, g.h)[-1] - exact))
    # corrected: second order; plain: h^1.4 from the t^0.4 term
    assert errs[0] / errs[1] >= 3.6
    assert plain[0] / plain[1] <= 2.8
    assert errs[1] <= 1e-5 and plain[1] > 5 * errs[1]


def test_cell_moments_against_quadrature():
    g = TimeGrid(1.0, 20)
    p = -0.6
    fn = lambda s: np.exp(-2 * s)
    m0, m1 = cell_moments(fn, p, g)
    for i in (0, 1, 7, 19):
        lo, hi = g.nodes[i], g.nodes[i + 1]
        if i == 0:
            q0, _ = integrate.quad(lambda s: math.exp(-2 * s) * (hi - s) / g.h, lo, hi, weight="alg", wvar=(p, 0))
            q1, _ = integrate.quad(lambda s: math.exp(-2 * s) * (s - lo) / g.h, lo, hi, weight="alg", wvar=(p, 0))
        else:
            q0, _ = integrate.quad(lambda s: s**p * math.exp(-2 * s) * (hi - s) / g.h, lo, hi)
            q1, _ = integrate.quad(lambda s: s**p * math.exp(-2 * s) * (s - lo) / g.h, lo, hi)
        assert m0[i] == pytest.approx(q0, rel=1e-12)
        assert m1[i] == pytest.approx(q1, rel=1e-12)


def test_cell_moments_leading_axes():
    g = TimeGrid(1.0, 10)
    m0, m1 = cell_moments(lambda s: np.stack([np.ones_like(s), 2 * s]), 0.0, g)
    assert m0.shape == (2, 10)
    assert np.allclose(m0[0] + m1[0], g.h)


# }}}


# {{{ derivatives


def test_rl_derivative_round_trip():
    g = TimeGrid(1.0, 1000)
    f = rl_integral(gf(g, lambda t: t), 0.4)
    back = rl_derivative(f, 0.4).values
    sel = g.nodes >= 0.1
    assert np.max(np.abs(back[sel] - g.nodes[sel]) / g.nodes[sel]) <= 1e-2


def test_rl_derivative_power():
    # D^0.4 of t^0.4 / Gamma(1.4) is 1
    g = TimeGrid(1.0, 1000)
    f = gf(g, lambda t: t**0.4 / math.gamma(1.4))
    out = rl_derivative(f, 0.4).values
    sel = g.nodes >= 0.1
    assert np.max(np.abs(out[sel] - 1.0)) <= 1e-2
    # told about the t^0.4 behaviour, the inner integral is exact
    hinted = rl_derivative(f, 0.4, singular=[0.4]).values
    assert np.max(np.abs(hinted - 1.0)) <= 1e-10


def test_rl_derivative_zero_and_warning():
    g = TimeGrid(1.0, 50)
    assert np.all(rl_derivative(gf(g, np.zeros_like), 0.3).values == 0)
    with pytest.warns(RuntimeWarning):
        rl_derivative(gf(g, np.ones_like), 0.3)
    with pytest.raises(DomainError):
        rl_derivative(gf(g, np.zeros_like), 1.0)


@pytest.mark.parametrize("order", [0.3, 0.6, 0.9])
def test_caputo_of_t(order):
    g = TimeGrid(1.0, 200)
    out = caputo_derivative(gf(g, lambda t: t), order).values
    assert np.allclose(out, g.nodes ** (1 - order) / math.gamma(2 - order), atol=1e-12)


def test_caputo_of_t_squared_wave():
    g = TimeGrid(1.0, 400)
    out = caputo_derivative(gf(g, lambda t: t**2), 1.5).values
    exact = 2 * g.nodes**0.5 / math.gamma(1.5)
    assert np.max(np.abs(out - exact)[1:]) <= 1e-2


def test_caputo_kills_constants():
    g = TimeGrid(1.0, 20)
    assert np.all(caputo_derivative(gf(g, lambda t: 3 + 0 * t), 0.5).values == 0)
    for bad in (0.0, 1.0, 2.0):
        with pytest.raises(DomainError):
            caputo_derivative(gf(g, np.sin), bad)
    with pytest.raises(DomainError):
        caputo_derivative(gf(TimeGrid(1.0, 3), np.sin), 0.5)


@pytest.mark.parametrize("order", [0.3, 0.7])
def test_caputo_round_trip(order):
    f = lambda t: np.cos(t) + t
    errs = []
    for n in (200, 400):
        g = TimeGrid(1.0, n)
        back = rl_integral(caputo_derivative(gf(g, f), order), order).values
        assert np.max(np.abs(back - (f(g.nodes) - 1.0))) <= 1e-2
        # the first step carries an O(h) start-up error; measure the rate at T
        errs.append(abs(back[-1] - (f(1.0) - 1.0)))
    assert errs[0] / errs[1] >= 2 ** (2 - order) * 0.8


# }}}


# {{{ semigroup and linearity


@pytest.mark.parametrize("a1", [0.3, 0.7, 1.1])
@pytest.mark.parametrize("a2", [0.3, 0.7, 1.1])
def test_semigroup(a1, a2):
    g = TimeGrid(1.0, 500)
    f = gf(g, lambda t: np.cos(2 * t) + t**2)
    # I^a2 f behaves like t^a2 near 0
    lhs = rl_integral(rl_integral(f, a2), a1, singular=[a2]).values
    rhs = rl_integral(f, a1 + a2).values
    assert np.max(np.abs(lhs - rhs)[1:-1]) <= g.h


@settings(max_examples=30, deadline=None)
@given(
    a=st.floats(-5, 5),
    b=st.floats(-5, 5),
    order=st.floats(0.2, 1.9),
    seed=st.integers(0, 2**32 - 1),
)
def test_integral_linear(a, b, order, seed):
    rng = np.random.default_rng(seed)
    f, g = rng.standard_normal((2, 65))
    lhs = rl_integral_array(a * f + b * g, order, 1 / 64)
    rhs = a * rl_integral_array(f, order, 1 / 64) + b * rl_integral_array(g, order, 1 / 64)
    assert np.allclose(lhs, rhs, atol=1e-12 * (1 + abs(a) + abs(b)))


# }}}


# {{{ Ito integral


def test_ito_zero_and_unit_kernel():
    g = TimeGrid(1.0, 100)
    inc = BrownianIncrements.generate(g, 5, np.arange(4))
    assert np.all(rl_integral_ito(gf(g, np.zeros_like), 0.8, inc).values == 0)
    out = rl_integral_ito(gf(g, np.ones_like), 1.0, inc).values
    assert np.allclose(out, inc.path, atol=1e-13)


def test_ito_grid_mismatch():
    inc = BrownianIncrements.generate(TimeGrid(1.0, 50), 0, 0)
    with pytest.raises(GridMismatchError):
        rl_integral_ito(gf(TimeGrid(1.0, 100), np.ones_like), 0.8, inc)
    with pytest.raises(DomainError):
        rl_integral_ito(gf(TimeGrid(1.0, 50), np.ones_like), 0.5, inc)


def test_ito_variance_power_kernel():
    # Var = Gamma(0.8)^-2 int_0^1 tau^-0.4 dtau
    g = TimeGrid(1.0, 100)
    m = 100_000
    inc = BrownianIncrements.generate(g, 11, np.arange(m))
    x = rl_integral_ito(gf(g, np.ones_like), 0.8, inc).values[:, -1]
    exact = 1 / (0.6 * math.gamma(0.8) ** 2)
    se = exact * math.sqrt(2 / m)
    assert abs(np.mean(x**2) - exact) <= 3 * se


def test_ito_isometry_and_mean():
    g = TimeGrid(1.0, 1000)
    m = 20_000
    inc = BrownianIncrements.generate(g, 3, np.arange(m))
    f = lambda t: np.cos(3 * t) + 0.5
    x = rl_integral_ito(gf(g, f), 1.0, inc).values[:, -1]
    exact, _ = integrate.quad(lambda t: f(t) ** 2, 0, 1)
    assert abs(np.mean(x**2) - exact) <= 4 * np.std(x**2) / math.sqrt(m)
    assert abs(np.mean(x)) <= 4 * np.std(x) / math.sqrt(m)


@settings(max_examples=20, deadline=None)
@given(c=st.floats(-10, 10), seed=st.integers(0, 2**63 - 1))
def test_ito_linear(c, seed):
    g = TimeGrid(1.0, 32)
    inc = BrownianIncrements.generate(g, seed, np.arange(3))
    f = gf(g, np.cos)
    scaled = rl_integral_ito(GridFunction(g, c * f.values), 0.7, inc).values
    assert np.allclose(scaled, c * rl_integral_ito(f, 0.7, inc).values, atol=1e-12 * (1 + abs(c)))


# }}}
