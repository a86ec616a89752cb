"""Synthetic market data with known ground truth.

Log prices follow the fitted model exactly for one designated driver region:

    log price_j,t = S_j(b_driver,t) + sum over arcs a in E(driver, j) of c_a(v_a,t) + eps_j,t

with eps_t = F_j^{-1}(Phi(w_j,t / sd_j)) for mixture CDFs F_j and a stationary
sparse-lag VAR w_t.  Component labels are drawn from their posterior given
eps, so their marginal frequencies are the mixture weights.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import special

from .copula import CopulaModel
from .errors import ValidationError
from .market import DEFAULT_FLOOR_OFFSET, MarketNetwork, PanelDataset, inverse_log_transform
from .mixture import MixtureParams, mixture_ppf_table
from .spline import MonotoneFunction, SplineBasis

DEFAULT_T = 17_808
DEFAULT_START = "2010-01-01T00:00"


@dataclass(frozen=True)
class LoadSpec:
    """base * (1 + daily * cos(day phase) + weekly * cos(week phase) + AR(1) noise)."""

    base: float
    daily: float = 0.15
    weekly: float = 0.05
    noise_sd: float = 0.03
    noise_ar: float = 0.97
    peak_hour: float = 18.0


@dataclass
class GeneratorSpec:
    network: MarketNetwork
    driver: str
    loads: dict[str, LoadSpec]
    curves: dict[str, MonotoneFunction]  # price region -> S_j over raw driver supply
    cost_fns: dict[str, dict[str, MonotoneFunction]]  # price region -> arc -> c_a over raw flow
    mixtures: dict[str, MixtureParams]
    copula: CopulaModel
    flow_ar: float = 0.98
    flow_sd: float = 0.25
    loss_sd: float = 5.0
    period_minutes: int = 30
    start: str = DEFAULT_START
    floor_offset: float = DEFAULT_FLOOR_OFFSET
    seed: int = 0
    zero_noise: bool = False
    burn_in: int = 2000

    def __post_init__(self):
        net = self.network
        net.region_index(self.driver)
        for name, d in (("loads", self.loads), ("curves", self.curves), ("mixtures", self.mixtures)):
            if set(d) != set(net.regions):
                raise ValidationError(f"{name} must give one entry per region")
        for j, fns in self.cost_fns.items():
            allowed = set(net.arcs_between(self.driver, j))
            if not set(fns) <= allowed:
                raise ValidationError(f"cost functions for {j} must use arcs from {self.driver} to {j}")
        if self.copula.r != net.r:
            raise ValidationError("copula dimension must equal the number of regions")
        if self.copula.spectral_radius() >= 1:
            raise ValidationError("copula VAR is not stationary")

    @property
    def periods_per_day(self) -> int:
        return 24 * 60 // self.period_minutes


@dataclass
class Truth:
    spec: GeneratorSpec
    labels: np.ndarray  # (T, r) component index 0..2
    eta: np.ndarray  # (T, r)
    eps: np.ndarray  # (T, r)
    w: np.ndarray  # (T, r) latent VAR scores

    def to_dict(self) -> dict:
        s = self.spec
        return {
            "driver": s.driver,
            "network": s.network.to_dict(),
            "curves": {j: f.to_dict() for j, f in s.curves.items()},
            "cost_fns": {j: {a: f.to_dict() for a, f in fns.items()} for j, fns in s.cost_fns.items()},
            "mixtures": {j: m.to_dict() for j, m in s.mixtures.items()},
            "copula": s.copula.to_dict(),
            "loads": {j: asdict(ls) for j, ls in s.loads.items()},
            "settings": {k: getattr(s, k) for k in _SCALARS},
            "labels": self.labels.tolist(),
        }

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict()))
        return path


_SCALARS = ("flow_ar", "flow_sd", "loss_sd", "period_minutes", "start", "floor_offset", "seed", "zero_noise",
            "burn_in")


def spec_from_dict(d) -> GeneratorSpec:
    """Rebuild the generating spec recorded in a truth record."""
    return GeneratorSpec(
        network=MarketNetwork.from_dict(d["network"]),
        driver=d["driver"],
        loads={j: LoadSpec(**v) for j, v in d["loads"].items()},
        curves={j: MonotoneFunction.from_dict(v) for j, v in d["curves"].items()},
        cost_fns={j: {a: MonotoneFunction.from_dict(v) for a, v in fns.items()} for j, fns in d["cost_fns"].items()},
        mixtures={j: MixtureParams.from_dict(v) for j, v in d["mixtures"].items()},
        copula=CopulaModel.from_dict(d["copula"]),
        **d["settings"],
    )


def load_truth(path: str | Path) -> tuple[GeneratorSpec, np.ndarray]:
    """The GeneratorSpec and component labels stored by ``Truth.write``."""
    d = json.loads(Path(path).read_text())
    return spec_from_dict(d), np.asarray(d["labels"], dtype=int)


def _ar1(rng, T, r, phi, sd, burn):
    z = rng.standard_normal((T + burn, r)) * sd * np.sqrt(1 - phi**2)
    x = np.empty_like(z)
    x[0] = rng.standard_normal(r) * sd
    for t in range(1, T + burn):
        x[t] = phi * x[t - 1] + z[t]
    return x[burn:]


def _var_path(model: CopulaModel, T: int, rng, burn: int) -> np.ndarray:
    r, p = model.r, model.p
    n = T + burn + p
    w = np.zeros((n, r))
    z = rng.standard_normal((n, r)) @ model.chol.T
    terms = list(zip(model.lags, model.coefs))
    for t in range(p, n):
        acc = z[t]
        for h, A in terms:
            acc = acc + A @ w[t - h]
        w[t] = acc
    return w[burn + p:]


def generate(spec: GeneratorSpec, T: int = DEFAULT_T) -> tuple[PanelDataset, Truth]:
    """Simulate T periods; every draw comes from one generator seeded by ``spec.seed``."""
    if T < 2:
        raise ValidationError("T must be at least 2")
    net = spec.network
    r, A = net.r, len(net.arcs)
    rng = np.random.default_rng(spec.seed)
    ppd = spec.periods_per_day
    t = np.arange(T)
    day_phase = 2 * np.pi * ((t % ppd) / ppd - np.array([spec.loads[j].peak_hour for j in net.regions])[:, None] / 24)
    week_phase = 2 * np.pi * (t % (7 * ppd)) / (7 * ppd)
    noise = np.column_stack([
        _ar1(rng, T, 1, spec.loads[j].noise_ar, spec.loads[j].noise_sd, spec.burn_in)[:, 0] for j in net.regions
    ])
    load = np.column_stack([
        ls.base * (1 + ls.daily * np.cos(day_phase[k]) + ls.weekly * np.cos(week_phase) + noise[:, k])
        for k, ls in enumerate(spec.loads[j] for j in net.regions)
    ])
    flow = np.zeros((T, A))
    if net.arc_pairs:
        latent = _ar1(rng, T, len(net.arc_pairs), spec.flow_ar, 1.0, spec.burn_in)
        for k, (fwd, rev) in enumerate(net.arc_pairs):
            i, j = net.arc_index(fwd), net.arc_index(rev)
            x = np.tanh(spec.flow_sd * 3 * latent[:, k])
            flow[:, i] = np.maximum(x, 0) * net.arc(fwd).max_capacity
            flow[:, j] = np.maximum(-x, 0) * net.arc(rev).max_capacity
    loss = rng.normal(0, spec.loss_sd, (T, r)) if spec.loss_sd > 0 else np.zeros((T, r))
    d = net.region_index(spec.driver)
    ex = [net.arc_index(a) for a in net.exports(spec.driver)]
    im = [net.arc_index(a) for a in net.imports(spec.driver)]
    supply = load[:, d] + loss[:, d] + flow[:, ex].sum(axis=1) - flow[:, im].sum(axis=1)
    eta = np.empty((T, r))
    for k, j in enumerate(net.regions):
        eta[:, k] = spec.curves[j](supply)
        for a, fn in spec.cost_fns.get(j, {}).items():
            eta[:, k] += fn(flow[:, net.arc_index(a)])
    w = _var_path(spec.copula, T, rng, spec.burn_in)
    label_u = rng.random((T, r))
    if spec.zero_noise:
        eps = np.zeros((T, r))
        labels = np.zeros((T, r), dtype=int)
    else:
        u = special.ndtr(w / spec.copula.marginal_sd)
        eps = np.empty((T, r))
        labels = np.empty((T, r), dtype=int)
        for k, j in enumerate(net.regions):
            wts, a, s = spec.mixtures[j].arrays()
            eps[:, k] = mixture_ppf_table(u[:, k], wts, a, s)
            dens = wts * np.exp(-0.5 * ((eps[:, k, None] - a) / s) ** 2) / s
            post = np.cumsum(dens / dens.sum(axis=1, keepdims=True), axis=1)
            labels[:, k] = np.minimum((label_u[:, k, None] > post).sum(axis=1), 2)
    log_price = eta + eps
    price = inverse_log_transform(log_price, spec.floor_offset)
    stamps = np.datetime64(spec.start) + t * np.timedelta64(spec.period_minutes, "m")
    data = PanelDataset.build(net, stamps, price, load, flow, loss, floor_offset=spec.floor_offset)
    return data, Truth(spec, labels, eta, eps, w)


# ---------------------------------------------------------------- calibrations
BASIS = SplineBasis(np.array([0.2, 0.35, 0.5, 0.65, 0.8]))


def spline_curve(bounds, linear: float, quadratic: float = 0.0, kinks=None) -> MonotoneFunction:
    """linear*b + quadratic*b^2 + sum_k c_k (b - knot_k)_+^2 on normalized b, with kinks {knot_index: c_k}."""
    beta = np.zeros(BASIS.dim)
    beta[0], beta[1] = linear, quadratic
    for k, c in (kinks or {}).items():
        beta[2 + k] = c
    return MonotoneFunction.from_beta(BASIS, beta, bounds)


def _mixture(alpha1, omega2=0.07, omega3=0.01, sigma1=0.005):
    return MixtureParams(
        (1 - omega2 - omega3, omega2, omega3),
        (alpha1, alpha1 - 0.002, alpha1 + 0.5),
        (sigma1, 5 * sigma1, 120 * sigma1),
    )


# (omega, alpha, sigma) per region, magnitudes typical of half-hourly NEM log prices
NEM_MIXTURES = {
    "NSW": ((0.751, 0.222, 0.027), (6.928, 6.927, 7.092), (0.0025, 0.012, 0.446)),
    "QLD": ((0.864, 0.123, 0.013), (6.924, 6.923, 7.160), (0.0035, 0.023, 0.732)),
    "SA": ((0.901, 0.008, 0.091), (6.926, 6.876, 6.941), (0.0056, 1.251, 0.024)),
    "TAS": ((0.900, 0.094, 0.006), (6.929, 6.928, 7.343), (0.0053, 0.024, 0.670)),
    "VIC": ((0.933, 0.063, 0.004), (6.928, 6.927, 7.646), (0.0059, 0.033, 0.909)),
}


def nem_spec(seed: int = 0, *, zero_noise: bool = False, driver: str = "VIC") -> GeneratorSpec:
    """Five-region NEM calibration with VIC supply driving prices.

    The NSW price responds to VIC supply with an early kink (a steep rise from a
    low supply level), SA and VIC respond late and TAS and QLD weakly.  The
    QLD disturbance is nearly independent of the others.
    """
    net = MarketNetwork.nem()
    loads = {
        "NSW": LoadSpec(8000.0), "QLD": LoadSpec(6000.0, peak_hour=17.0), "SA": LoadSpec(1400.0, daily=0.2),
        "TAS": LoadSpec(1100.0, daily=0.1), "VIC": LoadSpec(5500.0),
    }
    bounds = (2500.0, 8500.0)
    curves = {
        "NSW": spline_curve(bounds, 0.03, kinks={0: 0.35}),
        "QLD": spline_curve(bounds, 0.015, 0.03),
        "SA": spline_curve(bounds, 0.05, kinks={3: 0.6}),
        "TAS": spline_curve(bounds, 0.03, 0.05),
        "VIC": spline_curve(bounds, 0.05, kinks={2: 0.5}),
    }
    flow_fn = lambda cap, c: spline_curve((0.0, cap), 0.0, c)  # noqa: E731
    cost_fns = {
        "NSW": {"v6": flow_fn(1525.0, 0.01)},
        "SA": {"v8": flow_fn(457.0, 0.01)},
        "TAS": {"v11": flow_fn(478.0, 0.005)},
    }
    mixtures = {j: MixtureParams(*NEM_MIXTURES[j]) for j in net.regions}
    copula = nem_copula(net.regions, periods_per_day=48)
    return GeneratorSpec(net, driver, loads, curves, cost_fns, mixtures, copula, seed=seed, zero_noise=zero_noise)


def nem_copula(regions, periods_per_day: int = 48) -> CopulaModel:
    """Sparse VAR with lags {1, 2, one day}: strong own persistence, moderate
    links among NSW, SA, TAS and VIC, and QLD almost decoupled."""
    r = len(regions)
    lags = (1, 2, periods_per_day)
    coefs = np.zeros((3, r, r))
    coefs[0] = 0.7 * np.eye(r)
    coefs[1] = 0.08 * np.eye(r)
    coefs[2] = 0.1 * np.eye(r)
    linked = [k for k, j in enumerate(regions) if j != "QLD"]
    for a in linked:
        for b in linked:
            if a != b:
                coefs[0, a, b] = 0.03
    corr = np.full((r, r), 0.4)
    for k, j in enumerate(regions):
        if j == "QLD":
            corr[k, :] = corr[:, k] = 0.02
    np.fill_diagonal(corr, 1.0)
    return CopulaModel(lags, coefs, np.linalg.cholesky(corr), tuple(regions))


def simple_spec(network: MarketNetwork, driver: str, *, seed: int = 0, zero_noise: bool = False,
                lags=(1,), ar: float = 0.6, omega3: float = 0.01, sigma1: float = 0.01) -> GeneratorSpec:
    """Generic calibration for small test networks: convex curves, AR(1)-type copula."""
    r = network.r
    loads = {j: LoadSpec(2000.0 + 300.0 * k) for k, j in enumerate(network.regions)}
    bounds = (800.0, 4000.0)
    curves = {j: spline_curve(bounds, 0.1 + 0.05 * k, 0.1, kinks={2: 0.3}) for k, j in enumerate(network.regions)}
    cost_fns = {}
    for j in network.regions:
        arcs = network.arcs_between(driver, j)
        if arcs:
            cost_fns[j] = {a: spline_curve((0.0, network.arc(a).max_capacity), 0.02, 0.02) for a in arcs[:1]}
    mixtures = {j: _mixture(6.9 + 0.01 * k, omega3=omega3, sigma1=sigma1) for k, j in enumerate(network.regions)}
    coefs = np.zeros((len(lags), r, r))
    coefs[0] = ar * np.eye(r)
    corr = np.full((r, r), 0.3)
    np.fill_diagonal(corr, 1.0)
    copula = CopulaModel(tuple(lags), coefs, np.linalg.cholesky(corr), tuple(network.regions))
    return GeneratorSpec(network, driver, loads, curves, cost_fns, mixtures, copula,
                         flow_sd=0.25, seed=seed, zero_noise=zero_noise)
