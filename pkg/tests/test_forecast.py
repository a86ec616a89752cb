import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_panel
from nemprice.copula import CopulaModel, MarginalTransform, NormalRef
from nemprice.errors import ValidationError
from nemprice.forecast import (
    ForecastSet,
    HorizonInputs,
    SupplyRegionModel,
    conditional_forecast,
    demand_weights,
    gap_objective,
    joint_forecast,
    optimize_flows,
    optimize_region_flows,
    weighted_quantiles,
)
from nemprice.market import Arc, MarketNetwork
from toys import curve, single_fit, toy_model, white_copula

SUPPLY_BOUNDS = (500.0, 2500.0)


def two_region_models(net, slopes_a=(2.0, 0.5), slopes_b=(0.5, 2.0), means=(6.9, 7.0)):
    ma = toy_model(net, "A", [curve(s, bounds=SUPPLY_BOUNDS) for s in slopes_a], means)
    mb = toy_model(net, "B", [curve(s, bounds=SUPPLY_BOUNDS) for s in slopes_b], means)
    return [ma, mb]


# ---------------------------------------------------------------- gap objective
def test_gap_objective_trivial():
    assert gap_objective([4.0, 4.0, 4.0], demand_weights([1, 2, 3])) == 0.0
    assert gap_objective([3.0, 5.0], 1.0) == 2.0


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31))
def test_gap_objective_matches_double_loop(r, seed):
    rng = np.random.default_rng(seed)
    a, d = rng.normal(size=r), rng.uniform(0.1, 5, r)
    delta = demand_weights(d)
    denom = sum(d[l] + d[j] for j in range(1, r) for l in range(j))
    brute = sum((d[l] + d[j]) / denom * abs(a[j] - a[l]) for j in range(1, r) for l in range(j))
    assert gap_objective(a, delta) == pytest.approx(brute, rel=1e-12, abs=1e-14)
    assert delta.sum() == pytest.approx(1.0)


def test_gap_objective_rejects_unnormalized():
    with pytest.raises(ValidationError):
        gap_objective([1.0, 2.0], 0.5)


# ---------------------------------------------------------------- weighted quantiles
def test_weighted_quantiles_equal_weights_match_pooled():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=500), rng.normal(2, 1, 500)
    qs = [0.1, 0.5, 0.9]
    pooled = np.quantile(np.concatenate([a, b]), qs, method="inverted_cdf")
    np.testing.assert_allclose(weighted_quantiles([a, b], [0.5, 0.5], qs), pooled)


# ---------------------------------------------------------------- conditional forecast
def test_degenerate_forecast_is_point_mass(two_region_network):
    net = two_region_network
    data = make_panel(net, T=20)
    fits = [single_fit("A", j, curve(1.0, bounds=SUPPLY_BOUNDS), 0.0) for j in net.regions]
    transforms = [MarginalTransform(NormalRef(0.3, 1e-12), np.full(10, 0.3)) for _ in fits]
    model = SupplyRegionModel("A", fits, white_copula(2), transforms)
    inputs = HorizonInputs.from_dataset(data, 19, 1)
    fs = conditional_forecast([model], data, 19, 1, inputs, 50, seed=3)
    np.testing.assert_allclose(fs.draws[0], np.broadcast_to(fs.eta[0] + 0.3, fs.draws[0].shape), atol=1e-9)


def test_weight_collapse_gives_component_mean(two_region_network):
    net = two_region_network
    data = make_panel(net, T=40)
    models = two_region_models(net)
    inputs = HorizonInputs.from_dataset(data, 30, 5)
    fs = conditional_forecast(models, data, 30, 5, inputs, 200, seed=1, weights=[1.0, 0.0])
    np.testing.assert_allclose(fs.point(), fs.component_means()[0])
    fs2 = fs.with_weights([0.5, 0.5])
    np.testing.assert_allclose(fs2.point(), fs.component_means().mean(axis=0))


def test_eta_uses_model_curves(two_region_network):
    net = two_region_network
    data = make_panel(net, T=40)
    models = two_region_models(net)
    inputs = HorizonInputs.from_dataset(data, 30, 4)
    fs = conditional_forecast(models, data, 30, 4, inputs, 10, seed=0)
    b = data.supply[30:34, 0]
    bn = (b - SUPPLY_BOUNDS[0]) / (SUPPLY_BOUNDS[1] - SUPPLY_BOUNDS[0])
    np.testing.assert_allclose(fs.eta[0], np.column_stack([2.0 * bn, 0.5 * bn]), rtol=1e-12)


def test_long_horizon_mean_reaches_stationary_mean(two_region_network):
    net = two_region_network
    data = make_panel(net, T=40)
    fits = [single_fit("A", j, curve(1.0, bounds=SUPPLY_BOUNDS), m, 0.2) for j, m in zip(net.regions, (6.9, 7.1))]
    rng = np.random.default_rng(5)
    transforms = [MarginalTransform.from_residuals(f.alpha_bar + rng.gamma(2, 0.1, 4000),
                                                   NormalRef(f.alpha_bar + 0.2, 0.15)) for f in fits]
    cop = CopulaModel((1,), np.array([[[0.8, 0.1], [0.0, 0.7]]]), np.linalg.cholesky([[1, 0.3], [0.3, 1]]))
    model = SupplyRegionModel("A", fits, cop, transforms)
    H = 120
    inputs = HorizonInputs(np.full((H, 2), 1500.0), np.zeros((H, 2)))
    fs = conditional_forecast([model], data, 40, H, inputs, 4000, seed=11)
    # unconditional oracle: push uniforms through the same transforms
    u = np.random.default_rng(99).uniform(size=200_000)
    uncond = np.array([t.ppf(u).mean() for t in transforms])
    mean_eps = fs.draws[0, :, -1, :].mean(axis=0) - fs.eta[0, -1]
    se = fs.draws[0, :, -1, :].std(axis=0) / np.sqrt(fs.n_draws)
    assert np.all(np.abs(mean_eps - uncond) < 4 * se)


def test_ensemble_cdf_is_weighted_mixture(two_region_network):
    net = two_region_network
    data = make_panel(net, T=40)
    models = two_region_models(net)
    fs = conditional_forecast(models, data, 30, 3, HorizonInputs.from_dataset(data, 30, 3), 500, seed=2,
                              weights=[0.3, 0.7])
    pooled = np.concatenate([fs.draws[0, :, 1, 1], fs.draws[1, :, 1, 1]])
    for x in np.quantile(pooled, [0.05, 0.5, 0.95]):
        comp = [(fs.draws[i, :, 1, 1] <= x).mean() for i in range(2)]
        assert fs.cdf(x, 2, "B") == pytest.approx(0.3 * comp[0] + 0.7 * comp[1])
    q = fs.quantiles([0.1, 0.5, 0.9])
    for k, p in enumerate([0.1, 0.5, 0.9]):
        assert fs.cdf(q[k, 1, 1], 2, "B") >= p - 1e-12
    table = fs.summary_table()
    assert len(table) == 3 * 2 and {"mean", "q01", "q50", "q99"} <= set(table.columns)


def test_forecast_reproducible_and_seed_sensitive(two_region_network):
    net = two_region_network
    data = make_panel(net, T=40)
    models = two_region_models(net)
    inp = HorizonInputs.from_dataset(data, 30, 3)
    a = conditional_forecast(models, data, 30, 3, inp, 100, seed=4)
    b = conditional_forecast(models, data, 30, 3, inp, 100, seed=4)
    c = conditional_forecast(models, data, 30, 3, inp, 100, seed=5)
    assert np.array_equal(a.draws, b.draws)
    assert not np.array_equal(a.draws, c.draws)


def test_forecast_errors(two_region_network):
    net = two_region_network
    data = make_panel(net, T=40)
    models = two_region_models(net)
    short = HorizonInputs.from_dataset(data, 30, 2)
    with pytest.raises(ValidationError):
        conditional_forecast(models, data, 30, 3, short, 10, seed=0)
    with pytest.raises(ValidationError):
        conditional_forecast([], data, 30, 3, short, 10, seed=0)
    with pytest.raises(ValidationError):
        conditional_forecast(models, data, 30, 2, {"A": short}, 10, seed=0)
    with pytest.raises(ValidationError):
        ForecastSet(("A", "B"), ("A",), np.zeros((1, 2, 1, 2)), np.zeros((1, 1, 2)), [0.6])


def test_model_roundtrip(two_region_network):
    m = two_region_models(two_region_network)[0]
    back = SupplyRegionModel.from_dict(m.to_dict())
    b = np.linspace(600, 2400, 7)
    np.testing.assert_array_equal(back.eta(b, {}), m.eta(b, {}))


def test_supply_increases_eta(two_region_network):
    m = two_region_models(two_region_network)[0]
    b = np.linspace(400, 2600, 50)
    assert np.all(np.diff(m.eta(b, {}), axis=0) >= 0)


# ---------------------------------------------------------------- flow optimization
def grid_oracle(model, net, load, n=1000):
    """Best net flow on the single pair by exhaustive search over n points."""
    (fwd, rev), = net.arc_pairs
    lo, hi = -net.arc(rev).max_capacity, net.arc(fwd).max_capacity
    xs = np.linspace(lo, hi, n)
    s = net.region_index(model.supply_region)
    sign = 1.0 if net.arc(fwd).origin == model.supply_region else -1.0
    b = load[s] + sign * xs
    flows = {fwd: np.maximum(xs, 0), rev: np.maximum(-xs, 0)}
    a = model.expected(b, flows)
    D = np.abs(a[:, 1] - a[:, 0])  # r = 2: delta = 1
    k = int(np.argmin(D))
    return xs[k], D[k], (hi - lo) / (n - 1)


def net_flow(sol, net):
    (fwd, rev), = net.arc_pairs
    return sol.flow[net.arc_index(fwd)] - sol.flow[net.arc_index(rev)]


def test_symmetric_toy_has_zero_flow(two_region_network):
    net = two_region_network
    m = toy_model(net, "A", [curve(1.0, bounds=SUPPLY_BOUNDS)] * 2, (7.0, 7.0))
    sol = optimize_region_flows(m, net, [1500.0, 1500.0])
    assert np.all(sol.flow == 0) and sol.objective == 0.0


def test_export_flow_equalizes_prices(two_region_network):
    net = two_region_network
    # at low load B sits above A; exporting from A raises A's supply and A's price fastest
    m = toy_model(net, "A", [curve(2.0, bounds=SUPPLY_BOUNDS), curve(0.5, bounds=SUPPLY_BOUNDS)], (6.9, 7.0))
    load = np.array([600.0, 1500.0])
    sol = optimize_region_flows(m, net, load)
    x = net_flow(sol, net)
    x_grid, d_grid, step = grid_oracle(m, net, load)
    assert x > 0 and abs(x - x_grid) <= step
    assert sol.objective <= d_grid + 1e-12
    assert sol.supply[0] == pytest.approx(load[0] + x)


def test_binding_capacity(two_region_network):
    net = two_region_network
    m = toy_model(net, "A", [curve(2.0, bounds=SUPPLY_BOUNDS), curve(0.5, bounds=SUPPLY_BOUNDS)], (6.9, 7.5))
    sol = optimize_region_flows(m, net, [600.0, 1500.0])
    assert net_flow(sol, net) == pytest.approx(net.arc("ab").max_capacity)
    assert sol.objective < sol.baseline


def random_two_region_instance(seed):
    rng = np.random.default_rng(seed)
    cap_f, cap_r = rng.uniform(20, 400, 2)
    net = MarketNetwork(("A", "B"), (
        Arc("ab", "A", "B", cap_f, cap_f),
        Arc("ba", "B", "A", cap_r, cap_r),
    ), (("ab", "ba"),))
    s2 = rng.uniform(0, 1)
    s1 = s2 + rng.uniform(0.05, 2)
    q1 = rng.uniform(0, 1)
    cost_bounds = (0.0, 500.0)
    c = rng.uniform(0, 0.9) * (s1 - s2) * cost_bounds[1] / (SUPPLY_BOUNDS[1] - SUPPLY_BOUNDS[0])
    m = toy_model(net, "A", [curve(s1, q1, bounds=SUPPLY_BOUNDS), curve(s2, bounds=SUPPLY_BOUNDS)],
                  (7.0, 7.0 + rng.normal(0, 0.2)), cost_fns={"B": {"ab": curve(c, bounds=cost_bounds)}})
    load = rng.uniform(800, 2000, 2)
    return net, m, load


@pytest.mark.parametrize("seed", range(10))
def test_flow_solution_matches_grid_search(seed):
    net, m, load = random_two_region_instance(seed)
    sol = optimize_region_flows(m, net, load)
    x_grid, d_grid, step = grid_oracle(m, net, load)
    assert abs(net_flow(sol, net) - x_grid) <= step
    assert sol.objective <= d_grid + 1e-12
    assert sol.objective <= sol.baseline


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(0, 1))
def test_optimizer_feasible_and_never_worse(seed, which):
    rng = np.random.default_rng(seed)
    net = MarketNetwork.nem()
    regions = net.regions
    sup = regions[which * 4]
    curves = [curve(rng.uniform(0, 2), rng.uniform(0, 1), bounds=(500.0, 12000.0)) for _ in regions]
    costs = {regions[net.region_index(net.arc(a).destination)]: {a: curve(rng.uniform(0, 0.5), bounds=(0.0, 2000.0))}
             for a in net.exports(sup)[:1]}
    m = toy_model(net, sup, curves, tuple(rng.normal(7, 0.2, 5)), cost_fns=costs)
    load = rng.uniform(1000, 9000, 5)
    sol = optimize_region_flows(m, net, load)
    assert sol.objective <= sol.baseline + 1e-12
    caps = np.array([a.max_capacity for a in net.arcs])
    assert np.all(sol.flow >= 0) and np.all(sol.flow <= caps + 1e-9)
    for fwd, rev in net.arc_pairs:
        assert min(sol.flow[net.arc_index(fwd)], sol.flow[net.arc_index(rev)]) == 0
    assert np.all(sol.supply > 0)


def test_single_region_joint_equals_conditional():
    net = MarketNetwork(("A",))
    data = make_panel(net, T=30)
    m = toy_model(net, "A", [curve(1.0, bounds=SUPPLY_BOUNDS)], (7.0,))
    load = data.load[20:24]
    loss = data.loss_adj[20:24]
    joint = joint_forecast([m], data, 20, 4, load, 100, seed=8, loss_adj=loss)
    cond = conditional_forecast([m], data, 20, 4, HorizonInputs.from_dataset(data, 20, 4), 100, seed=8)
    np.testing.assert_allclose(joint.draws, cond.draws, rtol=1e-12)


def test_joint_forecast_feasible(two_region_network):
    net = two_region_network
    data = make_panel(net, T=40)
    models = two_region_models(net)
    load = data.load[30:36]
    fs = joint_forecast(models, data, 30, 6, load, 50, seed=1)
    caps = np.array([a.max_capacity for a in net.arcs])
    for sols in fs.flows.values():
        assert len(sols) == 6
        for sol in sols:
            assert np.all(sol.flow >= 0) and np.all(sol.flow <= caps)
            assert min(sol.flow) == 0 and np.all(sol.supply > 0)
            assert sol.objective <= sol.baseline


def test_optimize_flows_covers_all_models(two_region_network):
    models = two_region_models(two_region_network)
    sols = optimize_flows(models, two_region_network, [1500.0, 1400.0])
    assert set(sols) == {"A", "B"}
