"""Expanding-window backtest of six point-forecast methods on the demand-weighted log price.

All methods forecast log prices.  Origins are row counts: a forecast from
origin T uses rows [0, T) and targets rows T .. T+H-1, so horizon h hits row
T + h - 1.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import pandas as pd

from .copula import (
    CopulaModel,
    MarginalTransform,
    NormalRef,
    compute_copula_data,
    fit_var,
    select_lags,
    simulate_forward,
    to_scores,
)
from .errors import NumericalError, ValidationError
from .forecast import (
    FlowOptimizerConfig,
    HorizonInputs,
    SupplyRegionModel,
    _model_list,
    conditional_forecast,
    joint_forecast,
)
from .market import PanelDataset

log = logging.getLogger(__name__)

METHODS = ("naive1", "naive2", "fundamental", "copula", "copula_fundamental_1", "copula_fundamental_2")
MODEL_METHODS = {"fundamental", "copula_fundamental_1", "copula_fundamental_2"}
# horizon groups in hours, inclusive
BUCKETS = ((1, 1), (2, 2), (3, 3), (4, 6), (7, 12), (13, 24), (25, 48), (49, 72), (73, 96), (97, 120),
           (121, 144), (145, 168))
MEMORY_BUDGET = 2 * 1024**3  # bytes of predictive draws held for one origin


def bucket_label(lo: int, hi: int) -> str:
    return str(lo) if lo == hi else f"{lo}-{hi}"


# ---------------------------------------------------------------- benchmarks
def naive1(data: PanelDataset, origin: int, h) -> np.ndarray:
    """Log price at the same clock time on the last observed day, (len(h), r)."""
    h = np.atleast_1d(np.asarray(h, dtype=int))
    ppd = data.periods_per_day
    src = origin - 1 + h - ppd * np.ceil(h / ppd).astype(int)
    if np.any(h < 1):
        raise ValidationError("horizons start at 1")
    if origin > data.T or src.min() < 0:
        raise ValidationError(f"naive1 needs a full day of history before origin {origin}")
    return np.asarray(data.log_price)[src]


def naive2(data: PanelDataset, origin: int, h) -> np.ndarray:
    """Mean training-sample log price at the target's clock time, (len(h), r)."""
    h = np.atleast_1d(np.asarray(h, dtype=int))
    ppd = data.periods_per_day
    if np.any(h < 1):
        raise ValidationError("horizons start at 1")
    if origin < ppd or origin > data.T:
        raise ValidationError(f"naive2 needs a full day of history before origin {origin}")
    lp = np.asarray(data.log_price)[:origin]
    slot = np.arange(origin) % ppd
    means = np.stack([lp[slot == s].mean(axis=0) for s in range(ppd)])
    return means[(origin - 1 + h) % ppd]


def fundamental(models, data: PanelDataset, origin: int, H: int, *, weights=None) -> np.ndarray:
    """Ensemble of eta + E(eps) over the horizon with observed supplies and flows, (H, r)."""
    models = _model_list(models, data.network)
    inputs = HorizonInputs.from_dataset(data, origin, H)
    flows = inputs.flows(data.network)
    W = np.full(len(models), 1.0 / len(models)) if weights is None else np.asarray(weights, dtype=float)
    if W.shape != (len(models),) or abs(W.sum() - 1) > 1e-9:
        raise ValidationError("ensemble weights must match the models and sum to one")
    out = np.zeros((H, data.network.r))
    for w, m in zip(W, models):
        s = data.network.region_index(m.supply_region)
        out += w * m.expected(inputs.supply[:, s], flows)
    return out


@dataclass(eq=False)
class CopulaOnlyModel:
    """Copula VAR on the log prices themselves: empirical margins with normal tails."""

    copula: CopulaModel
    transforms: list[MarginalTransform]

    def forecast_draws(self, data: PanelDataset, origin: int, H: int, n_draws: int, seed) -> np.ndarray:
        p = self.copula.p
        if origin < p:
            raise ValidationError(f"origin {origin} leaves fewer than {p} history rows")
        hist = to_scores(self.transforms, np.asarray(data.log_price)[origin - p:origin])
        return simulate_forward(self.copula, self.transforms, hist, H, n_draws, seed)

    def to_dict(self) -> dict:
        return {"copula": self.copula.to_dict(), "transforms": [t.to_dict() for t in self.transforms]}

    @classmethod
    def from_dict(cls, d) -> "CopulaOnlyModel":
        return cls(CopulaModel.from_dict(d["copula"]), [MarginalTransform.from_dict(t) for t in d["transforms"]])


def fit_copula_only(data: PanelDataset, *, lags: Sequence[int] | None = None, max_short: int = 5,
                    max_days: int = 7) -> CopulaOnlyModel:
    lp = np.asarray(data.log_price)
    refs = [NormalRef(float(lp[:, k].mean()), float(lp[:, k].std(ddof=1))) for k in range(data.network.r)]
    cd = compute_copula_data(lp, refs)
    if lags is None:
        lags = select_lags(cd.w_hat, periods_per_day=data.periods_per_day, max_short=max_short,
                           max_days=max_days).lags
    return CopulaOnlyModel(fit_var(cd.w_hat, lags, regions=data.regions), cd.transforms)


# ---------------------------------------------------------------- backtest
@dataclass
class BacktestConfig:
    origins: tuple  # row counts, or timestamps resolved against the data
    horizon: int = 168  # periods
    methods: tuple[str, ...] = METHODS
    n_draws: int = 500
    seed: int = 0
    min_train: int = 28 * 24  # periods
    refit_every: int | None = None  # origins between refits; None fits once before the first origin
    workers: int = 1
    flow_config: FlowOptimizerConfig = field(default_factory=FlowOptimizerConfig)

    def __post_init__(self):
        self.origins = tuple(self.origins)
        self.methods = tuple(self.methods)
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValidationError(f"unknown backtest methods {sorted(unknown)}")
        if not self.origins:
            raise ValidationError("at least one forecast origin required")
        if self.horizon < 1 or self.n_draws < 1 or self.min_train < 1 or self.workers < 1:
            raise ValidationError("horizon, n_draws, min_train and workers must be positive")
        if self.refit_every is not None and self.refit_every < 1:
            raise ValidationError("refit_every must be positive")

    def resolve_origins(self, data: PanelDataset) -> tuple[int, ...]:
        """Row-count origins; a timestamp origin means forecasting from that timestamp onward."""
        out = []
        for o in self.origins:
            if isinstance(o, (int, np.integer)):
                out.append(int(o))
                continue
            stamp = np.datetime64(pd.Timestamp(o).to_datetime64(), "s")
            k = np.searchsorted(data.timestamps, stamp)
            if k >= data.T or data.timestamps[k] != stamp:
                raise ValidationError(f"origin {o} is not a timestamp of the data")
            out.append(int(k))
        for o in out:
            if o < self.min_train:
                raise ValidationError(f"origin {o} leaves less than {self.min_train} training periods")
            if o + self.horizon > data.T:
                raise ValidationError(f"origin {o} plus horizon {self.horizon} runs past the data ({data.T})")
        return tuple(out)


def demand_weighted(log_price, load) -> np.ndarray:
    """sum_l (d_l / sum_j d_j) * log price_l per row."""
    load = np.asarray(load, dtype=float)
    w = load / load.sum(axis=-1, keepdims=True)
    assert np.allclose(w.sum(axis=-1), 1.0)
    return np.sum(w * np.asarray(log_price), axis=-1)


def horizon_hours(h, period_minutes: int) -> np.ndarray:
    return np.ceil(np.asarray(h) * period_minutes / 60).astype(int)


def origin_seed(seed: int, origin: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(origin)]).generate_state(1)[0])


@dataclass
class Fitted:
    models: list[SupplyRegionModel] | None = None
    copula_only: CopulaOnlyModel | None = None


def _point_forecasts(method: str, fitted: Fitted, data: PanelDataset, origin: int, cfg: BacktestConfig) -> np.ndarray:
    H = cfg.horizon
    h = np.arange(1, H + 1)
    seed = origin_seed(cfg.seed, origin)
    if method == "naive1":
        return naive1(data, origin, h)
    if method == "naive2":
        return naive2(data, origin, h)
    if method == "copula":
        if fitted.copula_only is None:
            raise ValidationError("copula method needs a fitted copula-only model")
        return fitted.copula_only.forecast_draws(data, origin, H, cfg.n_draws, seed).mean(axis=0)
    if fitted.models is None:
        raise ValidationError(f"{method} needs fitted supply-region models")
    if method == "fundamental":
        return fundamental(fitted.models, data, origin, H)
    if method == "copula_fundamental_1":
        inputs = HorizonInputs.from_dataset(data, origin, H)
        return conditional_forecast(fitted.models, data, origin, H, inputs, cfg.n_draws, seed).point()
    # observed loads stand in for load forecasts
    load = np.asarray(data.load)[origin:origin + H]
    loss = np.asarray(data.loss_adj)[origin:origin + H]
    return joint_forecast(fitted.models, data, origin, H, load, cfg.n_draws, seed, loss_adj=loss,
                          config=cfg.flow_config).point()


def _origin_errors(args) -> tuple[list[dict], list[tuple[str, int, str]]]:
    fitted, data, origin, cfg = args
    H = cfg.horizon
    rows = slice(origin, origin + H)
    load = np.asarray(data.load)[rows]
    actual = np.asarray(data.log_price)[rows]
    actual_dw = demand_weighted(actual, load)
    hours = horizon_hours(np.arange(1, H + 1), data.period_minutes)
    records, failures = [], []
    for method in cfg.methods:
        try:
            point = _point_forecasts(method, fitted, data, origin, cfg)
            if point.shape != actual.shape or not np.all(np.isfinite(point)):
                raise NumericalError(f"{method} produced malformed forecasts")
        except (ValidationError, NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
            log.warning("%s failed at origin %d: %s", method, origin, exc)
            failures.append((method, origin, str(exc)))
            point = np.full_like(actual, np.nan)
        err_dw = demand_weighted(point, load) - actual_dw
        for k in range(H):
            rec = {"method": method, "origin": origin, "h": k + 1, "hours": int(hours[k]), "error": err_dw[k]}
            rec.update({f"error_{reg}": point[k, j] - actual[k, j] for j, reg in enumerate(data.regions)})
            records.append(rec)
    return records, failures


@dataclass
class BacktestResult:
    errors: pd.DataFrame  # one row per (method, origin, h)
    failures: list[tuple[str, int, str]]
    methods: tuple[str, ...]

    def mafe(self, column: str = "error") -> pd.DataFrame:
        """MAFE x 100 per method and horizon bucket; NA where any forecast in the cell failed."""
        return mafe_table(self.errors, self.methods, column)

    def regional_mafe(self) -> dict[str, pd.DataFrame]:
        regs = [c[len("error_"):] for c in self.errors.columns if c.startswith("error_")]
        return {reg: self.mafe(f"error_{reg}") for reg in regs}


def mafe_table(errors: pd.DataFrame, methods: Sequence[str], column: str = "error") -> pd.DataFrame:
    cols = [bucket_label(lo, hi) for lo, hi in BUCKETS]
    out = pd.DataFrame(np.nan, index=list(methods), columns=cols, dtype=float)
    out.index.name = "method"
    for method in methods:
        e = errors[errors.method == method]
        for (lo, hi), col in zip(BUCKETS, cols):
            cell = e.loc[(e.hours >= lo) & (e.hours <= hi), column].to_numpy(dtype=float)
            if len(cell) and np.all(np.isfinite(cell)):
                out.loc[method, col] = 100.0 * float(np.mean(np.abs(cell)))
    return out


def run_backtest(config: BacktestConfig, data: PanelDataset, *, models=None, copula_only: CopulaOnlyModel | None = None,
                 fitter: Callable[[PanelDataset], Fitted] | None = None) -> BacktestResult:
    """Evaluate every configured method at every origin.

    Models are either given, or produced by ``fitter`` on the training rows
    before the first origin (and again every ``refit_every`` origins).
    """
    origins = config.resolve_origins(data)
    order = sorted(origins)
    needs = set(config.methods) & (MODEL_METHODS | {"copula"})
    n_models = len(models) if models is not None else data.network.r
    per_origin = 8 * config.n_draws * config.horizon * data.network.r * (n_models + 1)
    if per_origin > MEMORY_BUDGET:
        raise ValidationError(f"one origin needs {per_origin / 1e9:.1f} GB of draws; reduce n_draws or horizon")
    fitted_at: dict[int, Fitted] = {}
    current = Fitted(list(models) if models is not None else None, copula_only)
    for k, origin in enumerate(order):
        refit = fitter is not None and bool(needs) and (
            k == 0 if config.refit_every is None else k % config.refit_every == 0)
        if refit:
            log.info("fitting models on %d training periods", origin)
            current = fitter(data.window(0, origin))
        fitted_at[origin] = current
    # forecasts only read rows before each origin plus observed horizon inputs
    jobs = [(fitted_at[o], data, o, config) for o in order]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as ex:
            results = list(ex.map(_origin_errors, jobs))
    else:
        results = [_origin_errors(j) for j in jobs]
    records = [r for rec, _ in results for r in rec]
    failures = [f for _, fl in results for f in fl]
    errors = pd.DataFrame(records).sort_values(["method", "origin", "h"], kind="stable").reset_index(drop=True)
    return BacktestResult(errors, failures, config.methods)


def daily_origins(data: PanelDataset, n: int, horizon: int) -> tuple[int, ...]:
    """The last n daily origins (at midnight rows) that leave room for the horizon."""
    ppd = data.periods_per_day
    minutes = pd.to_datetime(data.timestamps).hour * 60 + pd.to_datetime(data.timestamps).minute
    midnights = np.flatnonzero(np.asarray(minutes) == 0)
    ok = midnights[midnights + horizon <= data.T]
    if len(ok) < n:
        raise ValidationError(f"only {len(ok)} daily origins fit, {n} requested")
    out = tuple(int(x) for x in ok[-n:])
    assert all(b - a == ppd for a, b in zip(out, out[1:]))
    return out


def fit_all(data: PanelDataset, config=None, *, supply_regions: Sequence[str] | None = None,
            lags=None) -> Fitted:
    """Supply-region models for every (or the given) supply region plus the copula-only model."""
    from .forecast import fit_supply_region

    regions = tuple(supply_regions) if supply_regions else data.regions
    models = [fit_supply_region(data, s, config, lags=lags) for s in regions]
    return Fitted(models, fit_copula_only(data, lags=lags))
