"""Conditional and flow-optimized predictive distributions, and their ensemble.

Each supply region ``i`` has its own multivariate model: r regressions of the
regional log prices on the supply of region ``i`` (plus flows on arcs from
``i`` to the price region), and a copula VAR for the r disturbances.  The
ensemble mixes the r predictive distributions with weights ``W``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .copula import (
    CopulaModel,
    MarginalTransform,
    copula_data_from_fits,
    fit_var,
    select_lags,
    simulate_forward,
    to_scores,
)
from .errors import ValidationError
from .market import MarketNetwork, PanelDataset, supply_from_arrays
from .mcmc import RegressionFit, SamplerConfig, fit_regression

log = logging.getLogger(__name__)

QUANTILES = (0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99)


@dataclass(eq=False)
class SupplyRegionModel:
    """Regressions for every price region on one region's supply, plus their copula."""

    supply_region: str
    fits: list[RegressionFit]
    copula: CopulaModel
    transforms: list[MarginalTransform]

    def __post_init__(self):
        if len(self.fits) != self.copula.r or len(self.transforms) != self.copula.r:
            raise ValidationError("one regression and one marginal transform per price region required")
        for f in self.fits:
            if f.supply_region != self.supply_region:
                raise ValidationError(f"fit for {f.price_region} uses supply of {f.supply_region}")

    @property
    def price_regions(self) -> tuple[str, ...]:
        return tuple(f.price_region for f in self.fits)

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.array([f.alpha_bar for f in self.fits])

    @property
    def arcs(self) -> set[str]:
        """Arcs whose flows enter any of the regressions."""
        return {a for f in self.fits for a in f.cost_fns}

    def eta(self, supply, flows: Mapping[str, np.ndarray]) -> np.ndarray:
        """Regression means, shape (n, r), from supply of this region and arc flows."""
        return np.stack([np.atleast_1d(f.eta(supply, flows)) for f in self.fits], axis=-1)

    def expected(self, supply, flows: Mapping[str, np.ndarray]) -> np.ndarray:
        """Marginal predictive means eta + alpha_bar."""
        return self.eta(supply, flows) + self.alpha_bar

    def residuals(self, dataset: PanelDataset) -> np.ndarray:
        return np.column_stack([f.residuals(dataset) for f in self.fits])

    def scores(self, dataset: PanelDataset) -> np.ndarray:
        return to_scores(self.transforms, self.residuals(dataset))

    def to_dict(self) -> dict:
        return {
            "supply_region": self.supply_region,
            "fits": [f.to_dict() for f in self.fits],
            "copula": self.copula.to_dict(),
            "transforms": [t.to_dict() for t in self.transforms],
        }

    @classmethod
    def from_dict(cls, d) -> "SupplyRegionModel":
        return cls(
            d["supply_region"],
            [RegressionFit.from_dict(f) for f in d["fits"]],
            CopulaModel.from_dict(d["copula"]),
            [MarginalTransform.from_dict(t) for t in d["transforms"]],
        )


def fit_copula(fits: Sequence[RegressionFit], dataset: PanelDataset, *, lags: Sequence[int] | None = None,
               max_short: int = 5, max_days: int = 7) -> tuple[CopulaModel, list[MarginalTransform]]:
    """Copula VAR on the normal scores of the regression residuals; lags chosen by BIC unless given."""
    cd = copula_data_from_fits(fits, dataset)
    regions = [f.price_region for f in fits]
    if lags is None:
        lags = select_lags(cd.w_hat, periods_per_day=dataset.periods_per_day,
                           max_short=max_short, max_days=max_days).lags
    return fit_var(cd.w_hat, lags, regions=regions), cd.transforms


def fit_supply_region(dataset: PanelDataset, supply_region: str, config: SamplerConfig | None = None, *,
                      lags: Sequence[int] | None = None, max_short: int = 5,
                      max_days: int = 7) -> SupplyRegionModel:
    fits = [fit_regression(dataset, supply_region, j, config) for j in dataset.regions]
    copula, transforms = fit_copula(fits, dataset, lags=lags, max_short=max_short, max_days=max_days)
    return SupplyRegionModel(supply_region, fits, copula, transforms)


@dataclass(frozen=True)
class HorizonInputs:
    """Supplies (H, r) in region order and arc flows (H, n_arcs) in arc order over the horizon."""

    supply: np.ndarray
    flow: np.ndarray

    @property
    def H(self) -> int:
        return len(self.supply)

    @classmethod
    def from_dataset(cls, dataset: PanelDataset, start: int, H: int) -> "HorizonInputs":
        """Observed values for rows start .. start+H-1 (known-inputs forecasting)."""
        if start + H > dataset.T:
            raise ValidationError(f"horizon inputs need rows up to {start + H}, dataset has {dataset.T}")
        return cls(np.array(dataset.supply[start:start + H]), np.array(dataset.flow[start:start + H]))

    @classmethod
    def from_loads(cls, network: MarketNetwork, load, flow=None, loss_adj=None) -> "HorizonInputs":
        load = np.atleast_2d(np.asarray(load, dtype=float))
        H = len(load)
        flow = np.zeros((H, len(network.arcs))) if flow is None else np.atleast_2d(np.asarray(flow, dtype=float))
        loss = np.zeros_like(load) if loss_adj is None else np.atleast_2d(np.asarray(loss_adj, dtype=float))
        supply = np.column_stack(
            [supply_from_arrays(network, reg, load[:, k], flow, loss[:, k]) for k, reg in enumerate(network.regions)]
        )
        return cls(supply, flow)

    def flows(self, network: MarketNetwork) -> dict[str, np.ndarray]:
        return {a: self.flow[:, k] for k, a in enumerate(network.arc_ids)}


def weighted_quantiles(samples: Sequence[np.ndarray], weights, qs) -> np.ndarray:
    """Quantiles of the mixture putting mass weights[i]/len(samples[i]) on each point of samples[i].

    Uses the inverse of the pooled step CDF (smallest x with CDF(x) >= q).
    """
    x = np.concatenate([np.asarray(s, dtype=float) for s in samples])
    w = np.concatenate([np.full(len(s), wi / len(s)) for s, wi in zip(samples, weights)])
    order = np.argsort(x, kind="stable")
    x, cw = x[order], np.cumsum(w[order])
    cw /= cw[-1]
    idx = np.searchsorted(cw, np.asarray(qs, dtype=float) - 1e-12, side="left")
    return x[np.minimum(idx, len(x) - 1)]


@dataclass(frozen=True, eq=False)
class FlowSolution:
    supply_region: str
    flow: np.ndarray  # (n_arcs,)
    supply: np.ndarray  # (r,) every region's supply implied by the flows
    exports: np.ndarray
    imports: np.ndarray
    objective: float
    baseline: float  # objective at zero flow


@dataclass(eq=False)
class ForecastSet:
    """Predictive log-price draws per supply region and their ensemble.

    ``draws`` has shape (n_supply, n_draws, H, r); ``eta`` (n_supply, H, r).
    """

    regions: tuple[str, ...]
    supply_regions: tuple[str, ...]
    draws: np.ndarray
    eta: np.ndarray
    weights: np.ndarray
    origin: int = 0
    floor_offset: float = 1001.0
    inputs: dict[str, HorizonInputs] = field(default_factory=dict)
    flows: dict[str, list[FlowSolution]] = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        n_s = len(self.supply_regions)
        if self.draws.ndim != 4 or self.draws.shape[0] != n_s or self.draws.shape[3] != len(self.regions):
            raise ValidationError("draws must have shape (n_supply, n_draws, H, r)")
        if self.weights.shape != (n_s,) or np.any(self.weights < 0) or abs(self.weights.sum() - 1) > 1e-9:
            raise ValidationError("ensemble weights must be nonnegative and sum to one")
        if not np.all(np.isfinite(self.draws)):
            raise ValidationError("non-finite predictive draws")

    @property
    def H(self) -> int:
        return self.draws.shape[2]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]

    def component_means(self) -> np.ndarray:
        """Predictive mean per supply region, (n_supply, H, r)."""
        return self.draws.mean(axis=1)

    def point(self) -> np.ndarray:
        """Ensemble mean, (H, r)."""
        return np.tensordot(self.weights, self.component_means(), axes=1)

    def with_weights(self, weights) -> "ForecastSet":
        return ForecastSet(self.regions, self.supply_regions, self.draws, self.eta, np.asarray(weights, float),
                           self.origin, self.floor_offset, self.inputs, self.flows)

    def cdf(self, x: float, h: int, region: str) -> float:
        """Ensemble CDF at log price x for 1-based horizon h."""
        j = self.regions.index(region)
        comp = (self.draws[:, :, h - 1, j] <= x).mean(axis=1)
        return float(self.weights @ comp)

    def quantiles(self, qs=QUANTILES) -> np.ndarray:
        """Ensemble quantiles, (len(qs), H, r)."""
        qs = np.atleast_1d(qs)
        out = np.empty((len(qs), self.H, len(self.regions)))
        keep = self.weights > 0
        for h in range(self.H):
            for j in range(len(self.regions)):
                samples = [self.draws[i, :, h, j] for i in np.flatnonzero(keep)]
                out[:, h, j] = weighted_quantiles(samples, self.weights[keep], qs)
        return out

    def summary_table(self, qs=QUANTILES) -> pd.DataFrame:
        """One row per (horizon, region): ensemble mean and quantiles on the log scale."""
        mean, q = self.point(), self.quantiles(qs)
        rows = []
        for h in range(self.H):
            for j, reg in enumerate(self.regions):
                row = {"horizon": h + 1, "region": reg, "mean": mean[h, j]}
                row.update({f"q{round(100 * p):02d}": q[k, h, j] for k, p in enumerate(qs)})
                rows.append(row)
        return pd.DataFrame(rows)


def _model_list(models, network: MarketNetwork) -> list[SupplyRegionModel]:
    if isinstance(models, SupplyRegionModel):
        models = [models]
    if isinstance(models, Mapping):
        models = list(models.values())
    models = list(models)
    if not models:
        raise ValidationError("no supply-region models given")
    for m in models:
        if m.price_regions != network.regions:
            raise ValidationError(f"model for {m.supply_region} does not cover regions {network.regions}")
    return models


def _inputs_for(inputs, model: SupplyRegionModel, H: int) -> HorizonInputs:
    inp = inputs.get(model.supply_region) if isinstance(inputs, Mapping) else inputs
    if inp is None:
        raise ValidationError(f"missing horizon inputs for {model.supply_region}")
    if inp.H < H:
        raise ValidationError(f"horizon inputs cover {inp.H} periods, {H} needed")
    return inp


def conditional_forecast(models, data: PanelDataset, origin: int, H: int, inputs, n_draws: int, seed: int, *,
                         weights=None) -> ForecastSet:
    """Predictive draws for periods origin .. origin+H-1 given observed rows [:origin].

    ``inputs`` is one HorizonInputs shared by all supply regions, or a mapping
    from supply region to HorizonInputs.
    """
    net = data.network
    models = _model_list(models, net)
    if not 0 < origin <= data.T:
        raise ValidationError(f"origin {origin} outside 1..{data.T}")
    if H < 1 or n_draws < 1:
        raise ValidationError("horizon and draw count must be positive")
    draws = np.empty((len(models), n_draws, H, net.r))
    etas = np.empty((len(models), H, net.r))
    used = {}
    for k, m in enumerate(models):
        inp = _inputs_for(inputs, m, H)
        used[m.supply_region] = inp
        s = net.region_index(m.supply_region)
        flows = {a: v[:H] for a, v in inp.flows(net).items()}
        etas[k] = m.eta(inp.supply[:H, s], flows)
        p = m.copula.p
        if origin < p:
            raise ValidationError(f"origin {origin} leaves fewer than {p} history rows")
        hist = m.scores(data.window(origin - p, origin))
        eps = simulate_forward(m.copula, m.transforms, hist, H, n_draws, (int(seed), k))
        draws[k] = etas[k][None] + eps
    W = np.full(len(models), 1.0 / len(models)) if weights is None else np.asarray(weights, dtype=float)
    return ForecastSet(net.regions, tuple(m.supply_region for m in models), draws, etas, W, origin,
                       data.floor_offset, used)


# ---------------------------------------------------------------- flow optimization
def demand_weights(demand) -> np.ndarray:
    """Pair weights delta[l, j] (l < j) proportional to d_l + d_j, summing to one; zero elsewhere."""
    d = np.asarray(demand, dtype=float)
    r = len(d)
    delta = np.triu(d[:, None] + d[None, :], 1)
    total = delta.sum()
    if r < 2 or total <= 0:
        raise ValidationError("demand weights need at least two regions with positive demand")
    return delta / total


def _as_pair_matrix(delta, r: int) -> np.ndarray:
    delta = np.asarray(delta, dtype=float)
    if delta.ndim == 2:
        return np.triu(delta, 1)
    delta = np.atleast_1d(delta)
    if len(delta) != r * (r - 1) // 2:
        raise ValidationError(f"expected {r * (r - 1) // 2} pair weights")
    out = np.zeros((r, r))
    out[np.triu_indices(r, 1)] = delta
    return out


def gap_objective(a, delta) -> np.ndarray | float:
    """Weighted sum over pairs l < j of |a_j - a_l|.

    ``a`` has shape (..., r); ``delta`` is an (r, r) matrix (upper triangle used)
    or the r(r-1)/2 pair weights in row-major upper-triangle order.
    """
    a = np.asarray(a, dtype=float)
    r = a.shape[-1]
    dm = _as_pair_matrix(delta, r)
    if np.any(dm < 0) or abs(dm.sum() - 1) > 1e-9:
        raise ValidationError("pair weights must be nonnegative and sum to one")
    gaps = np.abs(a[..., None, :] - a[..., :, None])
    out = np.sum(gaps * dm, axis=(-2, -1))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class FlowOptimizerConfig:
    grid_points: int = 41
    max_rounds: int = 20
    tol: float = 1e-10
    xatol: float = 1e-6  # MWh


class _PairObjective:
    """D as a function of the net flow on one interconnector pair, others fixed."""

    def __init__(self, model: SupplyRegionModel, network: MarketNetwork, base_supply: float, delta):
        self.model, self.net, self.delta = model, network, delta
        self.region = model.supply_region
        self.base_supply = base_supply  # load + loss adjustment of the supply region
        self.sign = np.zeros(len(network.arcs))
        for a in network.exports(self.region):
            self.sign[network.arc_index(a)] = 1.0
        for a in network.imports(self.region):
            self.sign[network.arc_index(a)] = -1.0
        self.arc_ids = network.arc_ids
        self.used = [(a, network.arc_index(a)) for a in model.arcs]

    def __call__(self, flow: np.ndarray) -> np.ndarray:
        """Objective for a batch of flow vectors (n, n_arcs); +inf where supply is not positive."""
        flow = np.atleast_2d(flow)
        b = self.base_supply + flow @ self.sign
        flows = {a: flow[:, k] for a, k in self.used}
        out = np.full(len(flow), np.inf)
        ok = b > 0
        if ok.any():
            a = self.model.expected(b[ok], {k: v[ok] for k, v in flows.items()})
            out[ok] = gap_objective(a, self.delta)
        return out


def _set_pair(flow: np.ndarray, i: int, j: int, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.repeat(flow[None], len(x), axis=0)
    out[:, i] = np.maximum(x, 0.0)
    out[:, j] = np.maximum(-x, 0.0)
    return out


def optimize_region_flows(model: SupplyRegionModel, network: MarketNetwork, load, loss_adj=None, *,
                          config: FlowOptimizerConfig | None = None) -> FlowSolution:
    """Flows minimizing the demand-weighted price-gap objective for one supply region's model.

    Coordinate descent over the net flow of each interconnector pair; each
    scalar problem is a coarse grid (including 0, +-cap/2 and +-cap) followed by
    nested finer grids around the best point until the bracket is below ``xatol``.
    A move is accepted only if it lowers the objective, so the result never
    does worse than zero flow.
    """
    config = config or FlowOptimizerConfig()
    load = np.asarray(load, dtype=float)
    loss = np.zeros_like(load) if loss_adj is None else np.asarray(loss_adj, dtype=float)
    s = network.region_index(model.supply_region)
    delta = demand_weights(load) if network.r > 1 else None
    A = len(network.arcs)
    flow = np.zeros(A)
    if delta is None:
        obj0 = 0.0
        return _solution(model.supply_region, network, flow, load, loss, obj0, obj0)
    f = _PairObjective(model, network, load[s] + loss[s], delta)
    current = float(f(flow)[0])
    baseline = current
    pairs = []
    for fwd, rev in network.arc_pairs:
        i, j = network.arc_index(fwd), network.arc_index(rev)
        if f.sign[i] == 0 and fwd not in model.arcs and rev not in model.arcs:
            continue  # pair cannot change this model's expected prices
        pairs.append((i, j, network.arc(fwd).max_capacity, network.arc(rev).max_capacity))
    for _ in range(config.max_rounds):
        improved = False
        for i, j, cap_f, cap_r in pairs:
            grid = np.unique(np.concatenate([
                np.linspace(-cap_r, cap_f, config.grid_points),
                [0.0, -cap_r / 2, cap_f / 2, flow[i] - flow[j]],
            ]))
            vals = f(_set_pair(flow, i, j, grid))
            k = int(np.argmin(vals))
            best_x, best = float(grid[k]), float(vals[k])
            lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
            # nested grids around the incumbent; each level shrinks the bracket by (n - 1) / 2
            while hi - lo > config.xatol and np.isfinite(best):
                fine = np.linspace(lo, hi, config.grid_points)
                vals = f(_set_pair(flow, i, j, fine))
                k = int(np.argmin(vals))
                if vals[k] < best:
                    best_x, best = float(fine[k]), float(vals[k])
                lo, hi = fine[max(k - 1, 0)], fine[min(k + 1, len(fine) - 1)]
            if best < current - config.tol:
                flow = _set_pair(flow, i, j, best_x)[0]
                current = best
                improved = True
        if not improved:
            break
    if current > baseline + 1e-12:
        raise AssertionError("flow optimization increased the objective")
    return _solution(model.supply_region, network, flow, load, loss, current, baseline)


def _solution(region, network, flow, load, loss, obj, baseline) -> FlowSolution:
    supply = np.array([supply_from_arrays(network, reg, load[k], flow, loss[k])
                       for k, reg in enumerate(network.regions)], dtype=float)
    ex = np.array([sum(flow[network.arc_index(a)] for a in network.exports(reg)) for reg in network.regions])
    im = np.array([sum(flow[network.arc_index(a)] for a in network.imports(reg)) for reg in network.regions])
    return FlowSolution(region, flow, supply, ex, im, float(obj), float(baseline))


def optimize_flows(models, network: MarketNetwork, load, loss_adj=None, *,
                   config: FlowOptimizerConfig | None = None) -> dict[str, FlowSolution]:
    """Solve the flow problem of every supply-region model for one period's loads."""
    return {m.supply_region: optimize_region_flows(m, network, load, loss_adj, config=config)
            for m in _model_list(models, network)}


def joint_forecast(models, data: PanelDataset, origin: int, H: int, load, n_draws: int, seed: int, *,
                   loss_adj=None, weights=None, config: FlowOptimizerConfig | None = None) -> ForecastSet:
    """Forecast with flows and supplies chosen period by period by the flow optimizer.

    ``load`` and ``loss_adj`` are (H, r) forecasts (or actuals) for the horizon.
    Each period is solved independently.
    """
    net = data.network
    models = _model_list(models, net)
    load = np.atleast_2d(np.asarray(load, dtype=float))
    loss = np.zeros_like(load) if loss_adj is None else np.atleast_2d(np.asarray(loss_adj, dtype=float))
    if len(load) < H or len(loss) < H:
        raise ValidationError(f"load forecasts cover {len(load)} periods, {H} needed")
    solutions = {m.supply_region: [] for m in models}
    for h in range(H):
        for m, sol in zip(models, optimize_flows(models, net, load[h], loss[h], config=config).values()):
            solutions[m.supply_region].append(sol)
    inputs = {
        reg: HorizonInputs(np.array([s.supply for s in sols]), np.array([s.flow for s in sols]))
        for reg, sols in solutions.items()
    }
    fs = conditional_forecast(models, data, origin, H, inputs, n_draws, seed, weights=weights)
    fs.flows = solutions
    return fs
