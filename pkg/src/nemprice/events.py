"""Event studies: supply shocks through shifted supply curves, and price impulses
through shocked copula histories compared against an unshocked baseline."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import ValidationError
from .forecast import ForecastSet, HorizonInputs, SupplyRegionModel, conditional_forecast, _model_list
from .kde import DensityReport, adaptive_density
from .market import DEFAULT_FLOOR_OFFSET, PanelDataset, log_transform
from .mixture import MixtureParams
from .spline import MonotoneFunction

log = logging.getLogger(__name__)

PRICE_CAP = 12500.0  # $/MWh market price cap; draws above 10x the cap are clipped


@dataclass(frozen=True)
class ShockSpec:
    """A supply shock (MWh added to one region's supply) or a price impulse ($/MWh
    added to one region's observed prices over a window of row indices)."""

    kind: str
    region: str
    magnitude: float
    window: tuple[int, ...] = ()
    horizon: int = 1

    def __post_init__(self):
        if self.kind not in ("supply", "price"):
            raise ValidationError(f"shock kind must be 'supply' or 'price', got {self.kind!r}")
        object.__setattr__(self, "window", tuple(int(t) for t in self.window))
        if self.kind == "price" and not self.window:
            raise ValidationError("a price shock needs a nonempty window")
        if self.horizon < 1:
            raise ValidationError("horizon must be positive")


def shift_supply(fn: MonotoneFunction, mwh: float) -> MonotoneFunction:
    """The curve b -> fn(b + mwh), beyond the training range continued linearly."""
    return fn.shifted(float(mwh))


def expected_price(draws, floor_offset: float = DEFAULT_FLOOR_OFFSET, *, axis=0,
                   price_cap: float = PRICE_CAP) -> np.ndarray:
    """Dollar-scale mean of log-price draws: mean(exp(draw)) - floor_offset.

    Draws above log(10 * price_cap + floor_offset) are clipped with a warning.
    """
    x = np.asarray(draws, dtype=float)
    top = np.log(10 * price_cap + floor_offset)
    if np.any(x > top):
        warnings.warn(f"{int(np.sum(x > top))} draws above 10x the price cap clipped", RuntimeWarning, stacklevel=2)
        x = np.minimum(x, top)
    return np.mean(np.exp(x), axis=axis) - floor_offset


def disturbance_exp_mean(fit) -> float:
    """E[exp(eps)] under the fitted disturbance distribution."""
    if isinstance(fit.mixture, MixtureParams):
        return fit.mixture.log_price_mean()
    sd = float(fit.diagnostics["single_sd"])
    return float(np.exp(fit.alpha_bar + 0.5 * sd * sd))


def supply_shock(model: SupplyRegionModel, dataset: PanelDataset, rows: Sequence[int], mwh: float) -> pd.DataFrame:
    """Change in expected dollar price per price region when the supply region's
    curve is shifted by `mwh`, averaged over the given rows (observed supply and flows)."""
    rows = np.atleast_1d(np.asarray(rows, dtype=int))
    if len(rows) == 0 or rows.min() < 0 or rows.max() >= dataset.T:
        raise ValidationError("shock rows must be nonempty and inside the dataset")
    supply = dataset.column("supply", model.supply_region)[rows]
    out = []
    for f in model.fits:
        flows = {a: dataset.column("flow", a)[rows] for a in f.cost_fns}
        costs = sum((fn(flows[a]) for a, fn in f.cost_fns.items()), np.zeros(len(rows)))
        scale = disturbance_exp_mean(f)
        base = np.exp(f.supply_fn(supply) + costs) * scale - dataset.floor_offset
        shocked = np.exp(shift_supply(f.supply_fn, mwh)(supply) + costs) * scale - dataset.floor_offset
        out.append({"region": f.price_region, "baseline": base.mean(), "shocked": shocked.mean(),
                    "delta": (shocked - base).mean()})
    return pd.DataFrame(out)


def with_price_shock(dataset: PanelDataset, region: str, rows: Sequence[int], dollars: float) -> PanelDataset:
    """Copy of `dataset` with `dollars` added to the price of `region` at `rows`.

    The log price moves by log(P + offset + dollars) - log(P + offset) at each row.
    """
    k = dataset.network.region_index(region)
    rows = np.asarray(rows, dtype=int)
    price = np.array(dataset.price)
    price[rows, k] += dollars
    if np.any(price[rows, k] + dataset.floor_offset <= 0):
        raise ValidationError("shocked price falls below the transform floor")
    lp = np.array(dataset.log_price)
    lp[rows, k] = log_transform(price[rows, k], dataset.floor_offset)
    for a in (price, lp):
        a.setflags(write=False)
    return PanelDataset(dataset.network, dataset.timestamps, price, dataset.load, dataset.flow, dataset.loss_adj,
                        dataset.supply, lp, dataset.period_minutes, dataset.floor_offset)


@dataclass
class ImpulseResult:
    shocked: ForecastSet
    baseline: ForecastSet
    table: pd.DataFrame  # per (horizon, region): mean and quantile differences, dollar scale

    def delta_mean(self, region: str) -> np.ndarray:
        t = self.table[self.table.region == region].sort_values("horizon")
        return t["delta_mean"].to_numpy()


def impulse_response(models, data: PanelDataset, shock: ShockSpec, n_draws: int, seed: int, *,
                     inputs: HorizonInputs | None = None, weights=None,
                     qs: Sequence[float] = (0.05, 0.5, 0.95)) -> ImpulseResult:
    """Paired forecasts from the end of the shock window, with and without the impulse.

    Both runs use the same seed, so their innovation streams are identical and
    the difference is due to the shocked history alone.  Horizon supplies and
    flows default to the observed values when available, else the last
    observed row held fixed.
    """
    if shock.kind != "price":
        raise ValidationError("impulse_response needs a price shock")
    models = _model_list(models, data.network)
    window = np.array(shock.window)
    if window.min() < 0 or window.max() >= data.T:
        raise ValidationError("shock window outside the observed history")
    origin = int(window.max()) + 1
    H = shock.horizon
    if inputs is None:
        if origin + H <= data.T:
            inputs = HorizonInputs.from_dataset(data, origin, H)
        else:
            inputs = HorizonInputs(np.repeat(data.supply[origin - 1:origin], H, axis=0),
                                   np.repeat(data.flow[origin - 1:origin], H, axis=0))
    history = data.window(0, origin)
    shocked_data = with_price_shock(history, shock.region, window, shock.magnitude)
    base = conditional_forecast(models, history, origin, H, inputs, n_draws, seed, weights=weights)
    shocked = conditional_forecast(models, shocked_data, origin, H, inputs, n_draws, seed, weights=weights)
    W = base.weights
    off = data.floor_offset
    top = np.log(10 * PRICE_CAP + off)
    base_price = np.exp(np.minimum(base.draws, top))
    diff = np.exp(np.minimum(shocked.draws, top)) - base_price
    delta_mean = np.tensordot(W, diff.mean(axis=1), axes=1)
    ddof = 1 if n_draws > 1 else 0
    # paired (common random numbers) standard error of the difference, and the
    # Monte Carlo standard error of the baseline mean itself
    se = np.sqrt(np.tensordot(W**2, diff.var(axis=1, ddof=ddof) / n_draws, axes=1))
    se_mean = np.sqrt(np.tensordot(W**2, base_price.var(axis=1, ddof=ddof) / n_draws, axes=1))
    q_base = base.quantiles(qs)
    q_shock = shocked.quantiles(qs)
    rows = []
    for h in range(H):
        for j, reg in enumerate(data.regions):
            row = {"horizon": h + 1, "region": reg, "delta_mean": delta_mean[h, j], "se": se[h, j],
                   "se_mean": se_mean[h, j]}
            for k, p in enumerate(qs):
                row[f"delta_q{round(100 * p):02d}"] = (np.exp(q_shock[k, h, j]) - np.exp(q_base[k, h, j]))
            rows.append(row)
    return ImpulseResult(shocked, base, pd.DataFrame(rows))


def density_report(draws, grid=None, *, n_grid: int = 401, min_draws: int = 1000) -> DensityReport:
    """Locally adaptive kernel density of one set of draws on a fixed grid."""
    return adaptive_density(draws, grid, n_grid=n_grid, min_draws=min_draws)
