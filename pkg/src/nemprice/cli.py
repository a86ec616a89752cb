"""Batch command line: ingest/generate -> fit -> copula -> forecast / event / validate / deps.

Every stage reads its inputs from, and writes its artifacts to, one run
directory, and records seeds, input and output digests and timings in
``manifest.json``.  Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""
from __future__ import annotations

import hashlib
import json
import logging
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from importlib import metadata
from pathlib import Path
from typing import Any

import click
import numpy as np
import pandas as pd
import tomli

from . import __version__
from .errors import NumericalError, ValidationError
from .market import MarketNetwork, PanelDataset, ingest_csv, to_hourly, write_csv

log = logging.getLogger("nemprice")

EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

# section -> field -> accepted python types
SCHEMA: dict[str, dict[str, tuple[type, ...]]] = {
    "": {"run_dir": (str,), "seed": (int,), "workers": (int,)},
    "network": {"preset": (str,), "path": (str,), "regions": (list,), "arcs": (list,), "arc_pairs": (list,)},
    "data": {"path": (str,), "floor_offset": (int, float), "strict": (bool,), "hourly": (bool,)},
    "generate": {"calibration": (str,), "T": (int,), "driver": (str,), "zero_noise": (bool,)},
    "fit": {"supply_regions": (list,), "price_regions": (list,), "sweeps": (int,), "burn_in": (int,),
            "n_knots": (int,), "p_zero": (int, float)},
    "copula": {"lags": (list,), "max_short": (int,), "max_days": (int,)},
    "forecast": {"origin": (str, int), "horizon": (int,), "mode": (str,), "draws": (int,), "dump_draws": (bool,)},
    "event": {"draws": (int,), "density": (bool,)},
    "validate": {"origins": (int, list), "horizon": (int,), "methods": (list,), "draws": (int,),
                 "refit_every": (int,), "min_train": (int,)},
    "deps": {"lags": (list,)},
}
DEFAULTS: dict[str, Any] = {
    "run_dir": "run", "seed": 0, "workers": 1,
    "network": {"preset": "nem"},
    "data": {"floor_offset": 1001.0, "strict": True, "hourly": False},
    "generate": {"calibration": "nem", "T": 17_808, "driver": "VIC", "zero_noise": False},
    "fit": {"sweeps": 5000, "burn_in": 2000},
    "copula": {"max_short": 5, "max_days": 7},
    "forecast": {"horizon": 48, "mode": "conditional", "draws": 1000, "dump_draws": False},
    "event": {"draws": 2000, "density": False},
    "validate": {"origins": 20, "horizon": 168, "draws": 500},
    "deps": {"lags": [0, 1, 2, 48]},
}
STAGE_OF = {"data": "ingest or generate", "fits": "fit", "models": "copula"}


# ---------------------------------------------------------------- config
def load_config(path: str | Path | None) -> dict:
    """Parse and check a TOML config; errors name the line or the offending field."""
    raw: dict = {}
    if path is not None:
        try:
            raw = tomli.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ValidationError(f"config file {path} not found") from None
        except tomli.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: malformed config: {exc}") from None
    for key, value in raw.items():
        if key in SCHEMA and key != "":
            if not isinstance(value, dict):
                raise ValidationError(f"config field '{key}' must be a table")
            for field, v in value.items():
                _check_field(key, field, v)
        else:
            _check_field("", key, value)
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULTS.items()}
    for key, value in raw.items():
        if isinstance(value, dict):
            if key == "network":
                cfg[key] = {}
            cfg[key].update(value)
        else:
            cfg[key] = value
    if cfg["forecast"]["mode"] not in ("conditional", "joint"):
        raise ValidationError("config field 'forecast.mode' must be 'conditional' or 'joint'")
    if cfg["generate"]["calibration"] not in ("nem", "simple"):
        raise ValidationError("config field 'generate.calibration' must be 'nem' or 'simple'")
    return cfg


def _check_field(section: str, field: str, value):
    name = f"{section}.{field}" if section else field
    allowed = SCHEMA[section].get(field) if section in SCHEMA else None
    if allowed is None:
        raise ValidationError(f"unknown config field '{name}'")
    if isinstance(value, bool) and bool not in allowed:
        raise ValidationError(f"config field '{name}' has type bool, expected {'/'.join(t.__name__ for t in allowed)}")
    if not isinstance(value, allowed):
        raise ValidationError(
            f"config field '{name}' has type {type(value).__name__}, expected {'/'.join(t.__name__ for t in allowed)}")


def config_hash(cfg: dict) -> str:
    """Digest of the effective config; the run directory itself is not part of it."""
    body = {k: v for k, v in cfg.items() if k != "run_dir"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, default=str).encode()).hexdigest()


def network_from_config(cfg: dict) -> MarketNetwork:
    net = cfg["network"]
    if "path" in net:
        from .market import load_network

        return load_network(net["path"])
    if "regions" in net:
        return MarketNetwork.from_dict(net)
    if net.get("preset", "nem") != "nem":
        raise ValidationError(f"unknown network preset {net['preset']!r}")
    return MarketNetwork.nem()


# ---------------------------------------------------------------- run directory
def digest(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1))
    return path


def write_frame(path: Path, frame: pd.DataFrame) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


class Run:
    """A run directory plus its manifest."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.dir = Path(cfg["run_dir"])
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.dir / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
        else:
            self.manifest = {"stages": {}, "inputs": {}}
        self.manifest["config_hash"] = config_hash(cfg)
        self.manifest["seed"] = cfg["seed"]
        self.manifest["workers"] = cfg["workers"]
        self.manifest["versions"] = versions()

    def path(self, *parts) -> Path:
        return self.dir.joinpath(*parts)

    def require(self, kind: str, path: Path) -> Path:
        if not path.exists():
            raise ValidationError(f"missing {path}: run the '{STAGE_OF[kind]}' stage first")
        return path

    def record(self, stage: str, outputs, seconds: float, seeds=None, inputs=None):
        entry = {
            "config_hash": config_hash(self.cfg),
            "seconds": round(seconds, 3),
            "outputs": {str(Path(p).relative_to(self.dir)): digest(p) for p in outputs},
        }
        if seeds is not None:
            entry["seeds"] = seeds
        self.manifest["stages"][stage] = entry
        if inputs:
            self.manifest["inputs"].update({str(p): digest(Path(p)) for p in inputs})
        write_json(self.manifest_path, self.manifest)

    def dataset(self) -> PanelDataset:
        d = self.require("data", self.path("data", "prices.csv")).parent
        data = ingest_csv(d, network_from_config(self.cfg), strict=True,
                          floor_offset=self.cfg["data"]["floor_offset"])
        return to_hourly(data) if self.cfg["data"]["hourly"] else data

    def models(self, supply_regions=None):
        from .forecast import SupplyRegionModel

        regions = supply_regions or self.supply_regions()
        return [SupplyRegionModel.from_dict(json.loads(
            self.require("models", self.path("models", f"model_{s}.json")).read_text())) for s in regions]

    def supply_regions(self) -> list[str]:
        regs = self.cfg["fit"].get("supply_regions")
        return list(regs) if regs else list(network_from_config(self.cfg).regions)


def versions() -> dict[str, str]:
    out = {"nemprice": __version__}
    for pkg in ("numpy", "scipy", "pandas", "adaptivekde"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "missing"
    return out


def task_seed(seed: int, *keys: int) -> int:
    """Independent seed for one task, derived from the run seed."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


def resolve_row(data: PanelDataset, value) -> int:
    """A row index from an integer or an ISO timestamp of the data."""
    if isinstance(value, (int, np.integer)) or (isinstance(value, str) and value.lstrip("-").isdigit()):
        k = int(value)
        if not 0 <= k < data.T:
            raise ValidationError(f"row {k} outside the data (0..{data.T - 1})")
        return k
    try:
        stamp = np.datetime64(pd.Timestamp(value).to_datetime64(), "s")
    except (ValueError, TypeError):
        raise ValidationError(f"cannot parse timestamp {value!r}") from None
    k = int(np.searchsorted(data.timestamps, stamp))
    if k >= data.T or data.timestamps[k] != stamp:
        raise ValidationError(f"timestamp {value} is not in the data")
    return k


def resolve_rows(data: PanelDataset, spec: str) -> np.ndarray:
    """Rows for 'TS' or 'TS1..TS2' (inclusive)."""
    if ".." in spec:
        a, b = spec.split("..", 1)
        lo, hi = resolve_row(data, a), resolve_row(data, b)
        if hi < lo:
            raise ValidationError(f"empty window {spec}")
        return np.arange(lo, hi + 1)
    return np.array([resolve_row(data, spec)])


# ---------------------------------------------------------------- click plumbing
class Context:
    def __init__(self, config, run_dir, seed, workers):
        cfg = load_config(config)
        if run_dir is not None:
            cfg["run_dir"] = run_dir
        if seed is not None:
            cfg["seed"] = seed
        if workers is not None:
            cfg["workers"] = workers
        self.cfg = cfg


def _section(ctx: Context, name: str, **overrides) -> dict:
    sec = ctx.cfg[name]
    sec.update({k: v for k, v in overrides.items() if v is not None})
    return sec


@click.group()
@click.option("--config", "config", type=click.Path(dir_okay=False), default=None, help="TOML config file.")
@click.option("--run-dir", default=None, help="Run directory (overrides config).")
@click.option("--seed", type=int, default=None, help="Run seed (overrides config).")
@click.option("--workers", type=int, default=None, help="Worker processes for parallel stages.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def cli(ctx, config, run_dir, seed, workers, verbose):
    """Regional spot-price modelling pipeline."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    ctx.obj = Context(config, run_dir, seed, workers)


@cli.command()
@click.option("--data", "data_dir", default=None, help="Directory with prices/loads/flows/losses CSV files.")
@click.option("--lenient", is_flag=True, help="Zero the smaller flow of a pair that is positive in both directions.")
@click.pass_obj
def ingest(obj: Context, data_dir, lenient):
    """Validate CSV inputs and copy them into the run directory."""
    t0 = time.perf_counter()
    sec = _section(obj, "data", path=data_dir)
    if "path" not in sec:
        raise ValidationError("no input directory: set data.path or pass --data")
    data = ingest_csv(sec["path"], network_from_config(obj.cfg), strict=not lenient, floor_offset=sec["floor_offset"])
    run = Run(obj.cfg)
    out = write_csv(data, run.path("data"))
    inputs = [p for p in Path(sec["path"]).glob("*.csv")]
    run.record("ingest", out.values(), time.perf_counter() - t0, inputs=sorted(inputs))
    click.echo(f"ingested T={data.T} periods into {run.path('data')}")


@cli.command()
@click.option("--T", "T", type=int, default=None, help="Number of periods.")
@click.option("--calibration", type=click.Choice(["nem", "simple"]), default=None)
@click.option("--zero-noise", is_flag=True, default=None)
@click.pass_obj
def generate(obj: Context, T, calibration, zero_noise):
    """Simulate a synthetic dataset with known truth."""
    from .generator import generate as gen, nem_spec, simple_spec

    t0 = time.perf_counter()
    sec = _section(obj, "generate", T=T, calibration=calibration, zero_noise=zero_noise or None)
    seed = obj.cfg["seed"]
    if sec["calibration"] == "nem":
        spec = nem_spec(seed, zero_noise=sec["zero_noise"], driver=sec["driver"])
    else:
        net = network_from_config(obj.cfg)
        driver = sec["driver"] if sec["driver"] in net.regions else net.regions[0]
        spec = simple_spec(net, driver, seed=seed, zero_noise=sec["zero_noise"])
    data, truth = gen(spec, sec["T"])
    run = Run(obj.cfg)
    out = list(write_csv(data, run.path("data")).values())
    out.append(truth.write(run.path("data", "truth.json")))
    run.record("generate", out, time.perf_counter() - t0, seeds={"generator": seed})
    click.echo(f"generated T={data.T} periods into {run.path('data')}")


def _fit_task(args):
    dataset, supply, price, config = args
    from .mcmc import fit_regression

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = fit_regression(dataset, supply, price, config)
    return fit.to_dict(), [str(w.message) for w in caught]


@cli.command()
@click.option("--supply-region", "supply", multiple=True, help="Supply region(s); default from config or all.")
@click.option("--price-region", "price", multiple=True, help="Price region(s); default all.")
@click.option("--sweeps", type=int, default=None)
@click.option("--burn-in", type=int, default=None)
@click.pass_obj
def fit(obj: Context, supply, price, sweeps, burn_in):
    """Fit the monotone supply regressions, one per (supply region, price region)."""
    from .mcmc import SamplerConfig

    t0 = time.perf_counter()
    sec = _section(obj, "fit", sweeps=sweeps, burn_in=burn_in)
    run = Run(obj.cfg)
    data = run.dataset()
    supplies = list(supply) or run.supply_regions()
    prices = list(price) or list(sec.get("price_regions") or data.regions)
    for reg in supplies + prices:
        data.network.region_index(reg)
    extra = {k: sec[k] for k in ("n_knots", "p_zero") if k in sec}
    seeds, tasks = {}, []
    for s in supplies:
        for j in prices:
            seed = task_seed(obj.cfg["seed"], data.network.region_index(s), data.network.region_index(j))
            seeds[f"{s}/{j}"] = seed
            tasks.append((data, s, j, SamplerConfig(sweeps=sec["sweeps"], burn_in=sec["burn_in"], seed=seed,
                                                    keep_traces=False, **extra)))
    if obj.cfg["workers"] > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=obj.cfg["workers"]) as ex:
            results = list(ex.map(_fit_task, tasks))
    else:
        results = [_fit_task(t) for t in tasks]
    out = []
    for (_, s, j, _), (d, msgs) in zip(tasks, results):
        for m in msgs:
            log.warning("fit %s/%s: %s", s, j, m)
        out.append(write_json(run.path("fits", f"fit_{s}_{j}.json"), d))
    run.record("fit", out, time.perf_counter() - t0, seeds=seeds)
    click.echo(f"wrote {len(out)} fits to {run.path('fits')}")


@cli.command()
@click.option("--supply-region", "supply", multiple=True)
@click.option("--lags", default=None, help="Comma-separated lag set; default chosen by BIC.")
@click.pass_obj
def copula(obj: Context, supply, lags):
    """Fit the copula VAR of each supply region's residuals."""
    from .copula import select_lags, copula_data_from_fits, fit_var
    from .forecast import SupplyRegionModel
    from .mcmc import RegressionFit

    t0 = time.perf_counter()
    sec = _section(obj, "copula", lags=[int(x) for x in lags.split(",")] if lags else None)
    run = Run(obj.cfg)
    data = run.dataset()
    out = []
    for s in list(supply) or run.supply_regions():
        fits = [RegressionFit.from_dict(json.loads(
            run.require("fits", run.path("fits", f"fit_{s}_{j}.json")).read_text())) for j in data.regions]
        cd = copula_data_from_fits(fits, data)
        chosen = sec.get("lags")
        if chosen is None:
            sel = select_lags(cd.w_hat, periods_per_day=data.periods_per_day, max_short=sec["max_short"],
                              max_days=sec["max_days"])
            chosen = sel.lags
            out.append(write_frame(run.path("models", f"lag_selection_{s}.csv"), pd.DataFrame(sel.table)))
        model = SupplyRegionModel(s, fits, fit_var(cd.w_hat, chosen, regions=data.regions), cd.transforms)
        out.append(write_json(run.path("models", f"model_{s}.json"), model.to_dict()))
    run.record("copula", out, time.perf_counter() - t0)
    click.echo(f"wrote {len(out)} model artifacts to {run.path('models')}")


@cli.command()
@click.option("--origin", default=None, help="First forecast period: ISO timestamp or row index.")
@click.option("--horizon", type=int, default=None)
@click.option("--mode", type=click.Choice(["conditional", "joint"]), default=None)
@click.option("--draws", type=int, default=None)
@click.option("--dump-draws", is_flag=True, default=None, help="Also save raw draws as .npy.")
@click.pass_obj
def forecast(obj: Context, origin, horizon, mode, draws, dump_draws):
    """Ensemble density forecast from an origin, with observed (conditional) or optimized (joint) flows."""
    from .forecast import HorizonInputs, conditional_forecast, joint_forecast

    t0 = time.perf_counter()
    sec = _section(obj, "forecast", origin=origin, horizon=horizon, mode=mode, draws=draws,
                   dump_draws=dump_draws or None)
    if "origin" not in sec:
        raise ValidationError("no forecast origin: set forecast.origin or pass --origin")
    run = Run(obj.cfg)
    data = run.dataset()
    models = run.models()
    start, H = resolve_row(data, sec["origin"]), sec["horizon"]
    if start + H > data.T:
        raise ValidationError(f"horizon inputs need rows up to {start + H}; the data has {data.T}")
    seed = task_seed(obj.cfg["seed"], start)
    if sec["mode"] == "conditional":
        fs = conditional_forecast(models, data, start, H, HorizonInputs.from_dataset(data, start, H),
                                  sec["draws"], seed)
    else:
        rows = slice(start, start + H)
        fs = joint_forecast(models, data, start, H, data.load[rows], sec["draws"], seed, loss_adj=data.loss_adj[rows])
    table = fs.summary_table()
    table.insert(1, "timestamp", pd.to_datetime(data.timestamps[start:start + H]).strftime("%Y-%m-%dT%H:%M:%S")
                 .repeat(data.network.r).to_numpy())
    out = [write_frame(run.path("forecast", "summary.csv"), table)]
    if sec["mode"] == "joint":
        rows = [{"supply_region": reg, "horizon": h + 1, "objective": s.objective, "baseline": s.baseline,
                 **{a: v for a, v in zip(data.network.arc_ids, s.flow)}}
                for reg, sols in fs.flows.items() for h, s in enumerate(sols)]
        out.append(write_frame(run.path("forecast", "flows.csv"), pd.DataFrame(rows)))
    if sec["dump_draws"]:
        path = run.path("forecast", "draws.npy")
        np.save(path, fs.draws)
        out.append(path)
    run.record("forecast", out, time.perf_counter() - t0, seeds={"forecast": seed})
    click.echo(f"forecast of {H} periods from row {start} written to {run.path('forecast')}")


@cli.group()
def event():
    """Event studies: supply shocks and price impulses."""


@event.command("supply-shock")
@click.option("--region", required=True, help="Supply region whose curve is shifted.")
@click.option("--mwh", type=float, required=True)
@click.option("--at", "at", required=True, help="Timestamp or TS1..TS2 window of conditioning rows.")
@click.pass_obj
def supply_shock_cmd(obj: Context, region, mwh, at):
    """Expected-price change per region from shifting one supply curve."""
    from .events import supply_shock

    t0 = time.perf_counter()
    run = Run(obj.cfg)
    data = run.dataset()
    (model,) = run.models([region])
    table = supply_shock(model, data, resolve_rows(data, at), mwh)
    out = [write_frame(run.path("events", f"supply_shock_{region}.csv"), table)]
    run.record("event-supply-shock", out, time.perf_counter() - t0)
    click.echo(table.to_string(index=False))


@event.command("impulse")
@click.option("--region", required=True, help="Region whose observed prices are shocked.")
@click.option("--dollars", type=float, required=True)
@click.option("--window", required=True, help="TS1..TS2 window of shocked periods.")
@click.option("--horizon", type=int, required=True)
@click.option("--draws", type=int, default=None)
@click.option("--density", is_flag=True, default=None, help="Also write kernel densities per horizon and region.")
@click.pass_obj
def impulse_cmd(obj: Context, region, dollars, window, horizon, draws, density):
    """Paired forecasts with and without a price impulse over a window."""
    from .events import ShockSpec, density_report, impulse_response

    t0 = time.perf_counter()
    sec = _section(obj, "event", draws=draws, density=density or None)
    run = Run(obj.cfg)
    data = run.dataset()
    rows = resolve_rows(data, window)
    seed = task_seed(obj.cfg["seed"], int(rows[-1]))
    res = impulse_response(run.models(), data, ShockSpec("price", region, dollars, tuple(rows), horizon),
                           sec["draws"], seed)
    out = [write_frame(run.path("events", f"impulse_{region}.csv"), res.table)]
    if sec["density"]:
        frames = []
        for name, fs in (("baseline", res.baseline), ("shocked", res.shocked)):
            for h in range(fs.H):
                for j, reg in enumerate(fs.regions):
                    draws_hj = np.concatenate([fs.draws[i, :, h, j] for i in range(len(fs.supply_regions))])
                    rep = density_report(draws_hj).to_frame()
                    rep.insert(0, "region", reg)
                    rep.insert(0, "horizon", h + 1)
                    rep.insert(0, "run", name)
                    frames.append(rep)
        out.append(write_frame(run.path("events", f"impulse_{region}_density.csv"), pd.concat(frames)))
    run.record("event-impulse", out, time.perf_counter() - t0, seeds={"impulse": seed})
    click.echo(f"impulse response written to {run.path('events')}")


@cli.command()
@click.option("--origins", type=int, default=None, help="Number of final daily origins.")
@click.option("--horizon", type=int, default=None)
@click.pass_obj
def validate(obj: Context, origins, horizon):
    """Expanding-window backtest of the six point-forecast methods."""
    from .harness import METHODS, BacktestConfig, daily_origins, fit_all, run_backtest
    from .mcmc import SamplerConfig

    t0 = time.perf_counter()
    sec = _section(obj, "validate", origins=origins, horizon=horizon)
    run = Run(obj.cfg)
    data = run.dataset()
    orig = sec["origins"]
    orig = daily_origins(data, orig, sec["horizon"]) if isinstance(orig, int) else tuple(orig)
    fsec = obj.cfg["fit"]
    seed = obj.cfg["seed"]
    sampler = SamplerConfig(sweeps=fsec["sweeps"], burn_in=fsec["burn_in"], seed=seed, keep_traces=False,
                            **{k: fsec[k] for k in ("n_knots", "p_zero") if k in fsec})
    cfg = BacktestConfig(orig, sec["horizon"], tuple(sec.get("methods", METHODS)), sec["draws"], seed,
                         min_train=sec.get("min_train", 28 * data.periods_per_day),
                         refit_every=sec.get("refit_every"), workers=obj.cfg["workers"])
    lags = obj.cfg["copula"].get("lags")

    def fitter(train):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return fit_all(train, sampler, supply_regions=fsec.get("supply_regions"), lags=lags)

    res = run_backtest(cfg, data, fitter=fitter)
    table = res.mafe().reset_index()
    out = [write_frame(run.path("validate", "mafe.csv"), table),
           write_frame(run.path("validate", "errors.csv"), res.errors)]
    for reg, t in res.regional_mafe().items():
        out.append(write_frame(run.path("validate", f"mafe_{reg}.csv"), t.reset_index()))
    for f in res.failures:
        log.warning("method %s failed at origin %d: %s", *f)
    run.record("validate", out, time.perf_counter() - t0, seeds={"backtest": seed})
    click.echo(table.round(3).to_string(index=False))


@cli.command()
@click.option("--lags", "lags", default=None, help="Comma-separated lags h for T(h).")
@click.option("--supply-region", "supply", multiple=True)
@click.pass_obj
def deps(obj: Context, lags, supply):
    """Auto-dependence (Kendall tau) matrices T(h) of each fitted copula."""
    from .copula import auto_dependence

    t0 = time.perf_counter()
    hs = [int(x) for x in lags.split(",")] if lags else list(obj.cfg["deps"]["lags"])
    run = Run(obj.cfg)
    out = []
    for m in run.models(list(supply) or None):
        rows = []
        for h in hs:
            tau = auto_dependence(m.copula, h)
            for j, reg in enumerate(m.price_regions):
                rows.append({"h": h, "region": reg, **{f"lag_{other}": tau[j, k]
                                                       for k, other in enumerate(m.price_regions)}})
        out.append(write_frame(run.path("deps", f"tau_{m.supply_region}.csv"), pd.DataFrame(rows)))
    run.record("deps", out, time.perf_counter() - t0)
    click.echo(f"wrote {len(out)} dependence tables to {run.path('deps')}")


def main(argv=None) -> int:
    """Entry point; maps validation errors to exit 2 and numerical failures to exit 3."""
    try:
        cli.main(args=argv, prog_name="nemprice", standalone_mode=False)
    except ValidationError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_VALIDATION
    except NumericalError as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        return EXIT_NUMERICAL
    except click.exceptions.Abort:
        return 1
    except click.ClickException as exc:
        exc.show()
        return EXIT_VALIDATION
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
