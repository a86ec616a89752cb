import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from conftest import make_panel
from nemprice.copula import CopulaModel
from nemprice.errors import ValidationError
from nemprice.events import (
    ShockSpec,
    density_report,
    expected_price,
    impulse_response,
    shift_supply,
    supply_shock,
    with_price_shock,
)
from nemprice.mixture import MixtureParams
from nemprice.spline import MonotoneFunction
from toys import BASIS, curve, toy_model

BOUNDS = (500.0, 2500.0)


@st.composite
def monotone_curves(draw):
    gamma = np.array(draw(st.lists(st.floats(0, 3), min_size=BASIS.dim, max_size=BASIS.dim)))
    return MonotoneFunction(BASIS, np.ones(BASIS.dim, bool), gamma, BOUNDS)


def kinked(level=0.1, kink=4.0):
    """Gentle slope, then steep curvature beyond the first knot."""
    beta = np.zeros(BASIS.dim)
    beta[0], beta[2] = level, kink
    return MonotoneFunction.from_beta(BASIS, beta, BOUNDS)


# ---------------------------------------------------------------- supply shift
@settings(max_examples=50, deadline=None)
@given(monotone_curves(), st.floats(-800, 800), st.floats(-800, 800))
def test_shift_composes_and_stays_monotone(fn, a, b):
    x = np.linspace(0, 3000, 301)
    twice = shift_supply(shift_supply(fn, a), b)
    np.testing.assert_allclose(twice(x), shift_supply(fn, a + b)(x), atol=1e-10, rtol=1e-12)
    np.testing.assert_array_equal(shift_supply(fn, 0.0)(x), fn(x))
    assert np.all(np.diff(shift_supply(fn, a)(x)) >= -1e-12)


def test_shift_matches_original_at_moved_point():
    fn = kinked()
    x = np.array([600.0, 1200.0, 2400.0])
    np.testing.assert_allclose(shift_supply(fn, 300.0)(x), fn(x + 300.0), rtol=1e-12)


def test_supply_shock_zero_is_identity(two_region_network):
    m = toy_model(two_region_network, "A", [curve(1.0, bounds=BOUNDS), kinked()], (6.9, 7.0))
    data = make_panel(two_region_network, T=30)
    table = supply_shock(m, data, range(10, 20), 0.0)
    assert np.all(table.delta == 0.0)


def test_supply_shock_largest_where_curve_is_steep():
    from nemprice.market import MarketNetwork

    net = MarketNetwork(("NSW", "QLD", "VIC"))
    data = make_panel(net, T=60)
    curves = [kinked(0.1, 6.0), curve(0.1, bounds=BOUNDS), curve(0.3, bounds=BOUNDS)]
    m = toy_model(net, "VIC", curves, (6.95, 6.92, 6.93))
    high = np.argsort(data.supply[:, 2])[-10:]
    table = supply_shock(m, data, high, 560.0).set_index("region")
    assert table.delta.idxmax() == "NSW"
    assert np.all(table.delta > 0)


# ---------------------------------------------------------------- expected price
def test_expected_price_trivial():
    assert expected_price(np.full(10, math.log(1001.0))) == pytest.approx(0.0, abs=1e-9)
    assert expected_price(np.log([1001.0, 2001.0])) == pytest.approx(500.0)


def test_expected_price_clips_with_warning():
    with pytest.warns(RuntimeWarning):
        v = expected_price(np.array([50.0]))
    assert v == pytest.approx(10 * 12500.0)


def test_expected_price_matches_quadrature():
    mix = MixtureParams((0.9, 0.07, 0.03), (6.93, 6.90, 7.6), (0.0059, 0.0354, 0.3))
    x = mix.sample(1_000_000, np.random.default_rng(0))
    mc = expected_price(x)
    se = np.exp(x).std() / math.sqrt(len(x))
    pieces = [integrate.quad(lambda t: math.exp(t) * mix.pdf(t), lo, hi, limit=200)[0]
              for lo, hi in ((5.0, 6.85), (6.85, 7.0), (7.0, 9.5))]
    assert abs(mc - (sum(pieces) - 1001.0)) < 4 * se


# ---------------------------------------------------------------- impulse response
def impulse_setup(net, cross=0.01):
    coefs = np.array([[[0.85, 0.0], [cross, 0.6]]])
    cop = CopulaModel((1,), coefs, np.eye(2) * 0.5)
    m = toy_model(net, "A", [curve(0.5, bounds=BOUNDS), curve(0.5, bounds=BOUNDS)], (6.95, 6.95), sd=0.2, copula=cop)
    data = make_panel(net, T=200)
    return m, data


def test_null_impulse_is_exactly_zero(two_region_network):
    m, data = impulse_setup(two_region_network)
    res = impulse_response([m], data, ShockSpec("price", "A", 0.0, (150, 151, 152, 153), 12), 500, seed=3)
    assert np.array_equal(res.shocked.draws, res.baseline.draws)
    assert np.all(res.table.delta_mean == 0.0)


def test_positive_impulse_raises_own_mean_and_decays(two_region_network):
    m, data = impulse_setup(two_region_network)
    res = impulse_response([m], data, ShockSpec("price", "A", 300.0, (150, 151, 152, 153), 48), 2000, seed=3)
    own = res.delta_mean("A")
    assert own[0] > 0
    assert abs(own[-1]) < abs(own[0])
    t = res.table[res.table.region == "B"]
    assert np.all(np.abs(t.delta_mean) < 3 * t.se_mean)
    assert np.all(t.se < t.se_mean)


def test_price_shock_moves_log_price_by_formula(two_region_network):
    data = make_panel(two_region_network, T=20)
    shocked = with_price_shock(data, "B", [3, 4], 250.0)
    p = data.price[3:5, 1]
    np.testing.assert_allclose(shocked.log_price[3:5, 1] - data.log_price[3:5, 1],
                               np.log(p + 1001 + 250) - np.log(p + 1001), rtol=1e-12)
    assert np.array_equal(shocked.log_price[:, 0], data.log_price[:, 0])


def test_shock_spec_validation():
    with pytest.raises(ValidationError):
        ShockSpec("price", "A", 1.0)
    with pytest.raises(ValidationError):
        ShockSpec("demand", "A", 1.0, (1,))


# ---------------------------------------------------------------- density report
@pytest.fixture(scope="module")
def normal_report():
    x = np.random.default_rng(7).standard_normal(100_000)
    return density_report(x, np.linspace(-5, 5, 401))


def test_density_of_normal_at_zero(normal_report):
    assert normal_report.density[200] == pytest.approx(1 / math.sqrt(2 * math.pi), abs=0.02)


def test_density_integrates_to_one(normal_report):
    assert integrate.trapezoid(normal_report.density, normal_report.grid) == pytest.approx(1.0, abs=0.01)


def test_density_symmetric(normal_report):
    assert np.max(np.abs(normal_report.density - normal_report.density[::-1])) < 0.02


def test_density_degenerate_and_small_inputs():
    assert density_report(np.full(2000, 3.0)).point_mass
    with pytest.raises(ValidationError):
        density_report(np.zeros(10))


def test_density_leaves_global_rng_untouched():
    np.random.seed(123)
    expected = np.random.random()
    np.random.seed(123)
    density_report(np.random.default_rng(0).standard_normal(2000))
    assert np.random.random() == expected
