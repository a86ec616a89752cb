"""Slice-within-Gibbs sampler for a monotone spline regression with a
three-component Gaussian mixture disturbance.

The posterior is augmented with a scalar ``z`` so that every full conditional
becomes the prior restricted to the set where the negative log-likelihood
``s`` stays below ``z``.  Each sweep draws ``z = s + Exp(1)`` and then updates
labels, weights, means, variances and the (inclusion, coefficient) pairs of
every spline block in turn.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numba
import numpy as np
from scipy import optimize
from scipy.linalg import solve_triangular

from . import truncnorm
from .errors import NumericalError, ValidationError
from .market import PanelDataset, covariate_bounds, flow_bounds, normalize_covariate
from .mixture import MixtureParams
from .spline import DEFAULT_KNOTS, MonotoneFunction, SplineBasis, build_LJ, place_knots

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)
LOG_2 = math.log(2.0)


class ConvergenceWarning(UserWarning):
    pass


@dataclass
class SamplerConfig:
    sweeps: int = 5000
    burn_in: int = 2000
    seed: int = 0
    n_knots: int = DEFAULT_KNOTS
    p_zero: float = 0.8
    c_coef: float | None = None  # None -> number of observations
    c_mean: float = 100.0**2
    c_var: float = 100.0
    var_ratio: float = 0.25
    single_component: bool = False
    force_inclusion: bool = False
    check_slice: bool = False
    keep_traces: bool = True
    init: str = "full"  # or "linear": linear term only


@dataclass
class Block:
    """One monotone function of one covariate."""

    name: str
    basis: SplineBasis
    X: np.ndarray
    bounds: tuple[float, float]

    @property
    def dim(self) -> int:
        return self.basis.dim


@dataclass
class RegressionData:
    y: np.ndarray
    blocks: list[Block]

    @property
    def T(self) -> int:
        return len(self.y)

    @classmethod
    def from_covariates(cls, y, covariates: Mapping[str, np.ndarray], *, n_knots: int = DEFAULT_KNOTS,
                        bounds: Mapping[str, tuple[float, float]] | None = None,
                        knots: Mapping[str, np.ndarray] | None = None) -> "RegressionData":
        """Build blocks from raw covariates; the first covariate uses (min, max) bounds,
        later ones (flows) use (0, max)."""
        blocks = []
        for k, (name, x) in enumerate(covariates.items()):
            x = np.asarray(x, dtype=float)
            if bounds and name in bounds:
                bd = tuple(bounds[name])
            else:
                bd = covariate_bounds(x) if k == 0 else flow_bounds(x)
            xn = normalize_covariate(x, bd)
            kn = np.asarray(knots[name]) if knots and name in knots else place_knots(xn, n_knots)
            basis = SplineBasis(kn)
            blocks.append(Block(name, basis, basis.matrix(xn), bd))
        return cls(np.asarray(y, dtype=float), blocks)


def regression_data(dataset: PanelDataset, supply_region: str, price_region: str, *,
                    n_knots: int = DEFAULT_KNOTS) -> RegressionData:
    """Log price of `price_region` on supply of `supply_region` plus flows on E_{i,j}."""
    net = dataset.network
    covs = {"supply": dataset.column("supply", supply_region)}
    for a in net.arcs_between(supply_region, price_region):
        v = dataset.column("flow", a)
        if np.max(v) > 0:
            covs[a] = v
        else:
            log.warning("arc %s carries no flow in the training window; cost function omitted", a)
    return RegressionData.from_covariates(dataset.column("log_price", price_region), covs, n_knots=n_knots)


@dataclass
class SamplerState:
    labels: np.ndarray
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    J: list[np.ndarray]
    gamma: list[np.ndarray]  # full length per block, zero where excluded
    z: float = np.inf

    def copy(self) -> "SamplerState":
        return SamplerState(self.labels.copy(), self.weights.copy(), self.means.copy(), self.variances.copy(),
                            [j.copy() for j in self.J], [g.copy() for g in self.gamma], self.z)


def block_beta(J, gamma_full, knots) -> np.ndarray:
    out = np.zeros(len(J))
    if J.any():
        out[J] = solve_triangular(build_LJ(J, knots), gamma_full[J], lower=True)
    return out


def compute_eta(state: SamplerState, data: RegressionData) -> np.ndarray:
    eta = np.zeros(data.T)
    for b, blk in enumerate(data.blocks):
        if state.J[b].any():
            eta += blk.X @ block_beta(state.J[b], state.gamma[b], blk.basis.knots)
    return eta


def _s_from_residual(e, labels, means, variances) -> float:
    v = variances[labels]
    d = e - means[labels]
    return float(0.5 * np.sum(LOG_2PI + np.log(v)) + np.sum(d * d / (2.0 * v)))


def neg_loglik(state: SamplerState, data: RegressionData, eta: np.ndarray | None = None) -> float:
    """s = -log f(y | labels, means, variances, J, gamma)."""
    if np.any(state.variances <= 0):
        raise ValidationError("component variances must be positive")
    if eta is None:
        eta = compute_eta(state, data)
    return _s_from_residual(data.y - eta, state.labels, state.means, state.variances)


@numba.njit(cache=True)
def _label_kernel(e, labels, weights, means, variances, slack, u):
    T = e.shape[0]
    half_log = np.empty(3)
    inv2v = np.empty(3)
    for l in range(3):
        half_log[l] = 0.5 * (math.log(2.0 * math.pi) + math.log(variances[l]))
        inv2v[l] = 0.5 / variances[l]
    cost = np.empty(3)
    feas = np.empty(3)
    for t in range(T):
        c = labels[t]
        for l in range(3):
            d = e[t] - means[l]
            cost[l] = half_log[l] + d * d * inv2v[l]
        tot = 0.0
        for l in range(3):
            if l == c or cost[l] - cost[c] < slack:
                feas[l] = weights[l]
            else:
                feas[l] = 0.0
            tot += feas[l]
        target = u[t] * tot
        new = c
        acc = 0.0
        for l in range(3):
            if feas[l] > 0.0:
                acc += feas[l]
                new = l
                if target < acc:
                    break
        slack -= cost[new] - cost[c]
        labels[t] = new
    return slack


def quadratic_interval(A: float, B: float, C: float):
    """Open interval where A x^2 + B x + C < 0 (A >= 0); None if empty."""
    if A <= 0:
        if B == 0:
            return (-np.inf, np.inf) if C < 0 else None
        root = -C / B
        return (-np.inf, root) if B > 0 else (root, np.inf)
    disc = B * B - 4 * A * C
    if disc <= 0:
        return None
    sq = math.sqrt(disc)
    # numerically stable roots
    q = -0.5 * (B + math.copysign(sq, B)) if B != 0 else 0.5 * sq
    r1 = q / A
    r2 = C / q if q != 0 else -r1
    return (min(r1, r2), max(r1, r2))


def dirichlet_weights(counts, rng: np.random.Generator) -> np.ndarray:
    """Mixture weights given component counts under a uniform Dirichlet prior."""
    return rng.dirichlet(np.asarray(counts, dtype=float) + 1.0)


def inclusion_probability(feasible_without: bool, interval, sd: float, p_zero: float) -> float:
    """Pr(J_j = 1) given slice feasibility of exclusion and the feasible interval R for gamma_j."""
    logp0 = math.log(p_zero) if feasible_without and p_zero > 0 else -np.inf
    logp1 = -np.inf
    if interval is not None and p_zero < 1:
        # the prior for gamma_j given inclusion is the half-normal on (0, inf)
        logp1 = math.log1p(-p_zero) + LOG_2 + truncnorm.log_mass(interval[0], interval[1], sd)
    if logp0 == -np.inf and logp1 == -np.inf:
        raise NumericalError("both inclusion states infeasible")
    m = max(logp0, logp1)
    return math.exp(logp1 - m) / (math.exp(logp0 - m) + math.exp(logp1 - m))


class Sampler:
    """Holds data, configuration, RNG and current state; step methods mutate the state."""

    def __init__(self, data: RegressionData, config: SamplerConfig | None = None,
                 state: SamplerState | None = None):
        self.data = data
        self.config = config or SamplerConfig()
        self.rng = np.random.default_rng(self.config.seed)
        self.c_coef = float(self.config.c_coef if self.config.c_coef is not None else data.T)
        self.state = state if state is not None else self.initial_state()
        self._lj_cache: list[dict] = [{} for _ in data.blocks]
        self.eta = compute_eta(self.state, data)
        self.s = neg_loglik(self.state, data, self.eta)
        if not np.isfinite(self.state.z):
            self.state.z = self.s + 1.0

    # ----------------------------------------------------------------- init
    def initial_state(self) -> SamplerState:
        from scipy.optimize import lsq_linear

        data, cfg = self.data, self.config
        full = cfg.init == "full" or cfg.force_inclusion
        if cfg.init not in ("full", "linear"):
            raise ValidationError(f"unknown initialization {cfg.init!r}")
        if full:
            # constrained least squares over every coefficient, in gamma coordinates
            maps = [solve_triangular(build_LJ(np.ones(blk.dim, bool), blk.basis.knots), np.eye(blk.dim), lower=True)
                    for blk in data.blocks]
            cols = [blk.X @ Linv for blk, Linv in zip(data.blocks, maps)]
        else:
            cols = [blk.X[:, :1] for blk in data.blocks]
        Z = np.hstack([np.ones((data.T, 1))] + cols)
        lb = np.r_[-np.inf, np.zeros(Z.shape[1] - 1)]
        sol = lsq_linear(Z, data.y, bounds=(lb, np.full(Z.shape[1], np.inf)))
        J, gamma = [], []
        fitted = np.zeros(data.T)
        start = 1
        for b, blk in enumerate(data.blocks):
            coef = np.maximum(sol.x[start:start + cols[b].shape[1]], 0.0)
            fitted += cols[b] @ coef
            start += cols[b].shape[1]
            if full:
                j = np.ones(blk.dim, bool)
                g = coef
            else:
                j = np.zeros(blk.dim, bool)
                g = np.zeros(blk.dim)
                if coef[0] > 0:
                    j[0] = True
                    g[0] = coef[0]
            J.append(j)
            gamma.append(g)
        e = data.y - fitted
        labels, weights, means, variances = self._mixture_from_residuals(e)
        return SamplerState(labels, weights, means, variances, J, gamma)


    def _mixture_from_residuals(self, e: np.ndarray):
        """Labels, weights, means and variances from residual percentiles and terciles."""
        cfg = self.config
        if cfg.single_component:
            means = np.array([e.mean(), e.mean() - 1.0, e.mean() + 1.0])
            sd = max(e.std(), 1e-6)
            variances = np.array([sd**2, 4.4 * sd**2, 4.4 * sd**2])
            labels = np.zeros(len(e), dtype=np.int64)
            weights = np.array([1.0, 0.0, 0.0])
        else:
            p20, p50, p80 = np.percentile(e, [20, 50, 80])
            spread = max(np.std(e), 1e-6)
            means = np.array([p50, min(p20, p50 - 1e-3 * spread), max(p80, p50 + 1e-3 * spread)])
            order = np.argsort(e)
            thirds = np.array_split(order, 3)
            sd = [max(np.std(e[idx]), 1e-6 * spread) for idx in thirds]
            v1 = sd[1] ** 2
            variances = np.array([v1, max(sd[0] ** 2, v1 / cfg.var_ratio * 1.1), max(sd[2] ** 2, v1 / cfg.var_ratio * 1.1)])
            variances = np.minimum(variances, cfg.c_var)
            weights = np.full(3, 1 / 3)
            dens = -0.5 * np.log(variances) - (e[:, None] - means) ** 2 / (2 * variances) + np.log(weights)
            labels = np.argmax(dens, axis=1).astype(np.int64)
        return labels, weights, means, variances

    def _rescue_empty_components(self) -> bool:
        """Burn-in only: reset the mixture from current residuals if a component has emptied."""
        if self.config.single_component:
            return False
        counts = np.bincount(self.state.labels, minlength=3)
        if counts.min() >= max(3, int(0.002 * self.data.T)):
            return False
        st = self.state
        st.labels, st.weights, st.means, st.variances = self._mixture_from_residuals(self.data.y - self.eta)
        self.s = neg_loglik(st, self.data, self.eta)
        st.z = self.s + 1.0
        return True

    # ---------------------------------------------------------------- steps
    def _check(self, where: str):
        if self.config.check_slice:
            s = neg_loglik(self.state, self.data)
            if not s < self.state.z + 1e-9 * max(1.0, abs(self.state.z)):
                raise NumericalError(f"slice violated after {where}: s={s} z={self.state.z}")

    @property
    def slack(self) -> float:
        return self.state.z - self.s

    def step1_slice(self, zstar: float | None = None) -> float:
        if zstar is None:
            zstar = self.rng.exponential(1.0)
        self.state.z = self.s + zstar
        return self.state.z

    def step2_labels(self, u: np.ndarray | None = None) -> np.ndarray:
        st = self.state
        if self.config.single_component:
            return st.labels
        if u is None:
            u = self.rng.random(self.data.T)
        _label_kernel(self.data.y - self.eta, st.labels, st.weights, st.means, st.variances, self.slack, u)
        self.s = neg_loglik(st, self.data, self.eta)
        if not self.s < st.z:
            # accumulated rounding in the running slack; the kernel only made feasible moves
            if self.s - st.z > 1e-8 * max(1.0, abs(st.z)):
                raise NumericalError("label update left the slice")
            st.z = np.nextafter(self.s, np.inf)
        self._check("labels")
        return st.labels

    def step3_weights(self) -> np.ndarray:
        st = self.state
        if self.config.single_component:
            return st.weights
        st.weights = dirichlet_weights(np.bincount(st.labels, minlength=3), self.rng)
        return st.weights

    def _order_bounds_mean(self, l: int):
        a = self.state.means
        if self.config.single_component:
            return -np.inf, np.inf
        return {0: (a[1], a[2]), 1: (-np.inf, a[0]), 2: (a[0], np.inf)}[l]

    def mean_interval(self, l: int):
        """Slice interval for alpha_l before ordering constraints."""
        st = self.state
        idx = st.labels == l
        n = int(idx.sum())
        if n == 0:
            return -np.inf, np.inf
        e = (self.data.y - self.eta)[idx]
        A = n / (2 * st.variances[l])
        ebar = e.mean()
        R2 = self.slack / A + (st.means[l] - ebar) ** 2
        R = math.sqrt(max(R2, 0.0))
        return ebar - R, ebar + R

    def step4_means(self, l: int, u: float | None = None) -> float:
        st = self.state
        if self.config.single_component and l > 0:
            return st.means[l]
        bl, bu = self.mean_interval(l)
        lo, hi = self._order_bounds_mean(l)
        cur = st.means[l]
        lo, hi = max(lo, min(bl, cur)), min(hi, max(bu, cur))
        if not hi > lo:
            raise NumericalError("empty interval for component mean")
        if u is None:
            u = self.rng.random()
        st.means[l] = truncnorm.draw(lo, hi, math.sqrt(self.config.c_mean), u)
        self.s = neg_loglik(st, self.data, self.eta)
        self._check("means")
        return st.means[l]

    def _order_bounds_var(self, l: int):
        v, cfg = self.state.variances, self.config
        if cfg.single_component:
            return 0.0, cfg.c_var
        if l == 0:
            return 0.0, min(cfg.c_var, cfg.var_ratio * min(v[1], v[2]))
        return v[0] / cfg.var_ratio, cfg.c_var

    def var_interval(self, l: int, lo_c: float = 0.0, hi_c: float = np.inf):
        """Slice interval for sigma_l^2 intersected with (lo_c, hi_c)."""
        st = self.state
        idx = st.labels == l
        n = int(idx.sum())
        cur = st.variances[l]
        if n == 0:
            return lo_c, hi_c
        d = (self.data.y - self.eta)[idx] - st.means[l]
        Q = float(np.dot(d, d))

        def g(v):
            return 0.5 * n * (LOG_2PI + math.log(v)) + Q / (2 * v)

        G = self.slack + g(cur)
        vmin = Q / n if Q > 0 else 0.0
        # lower end
        if lo_c > 0 and g(lo_c) < G:
            a_lo = lo_c
        elif Q == 0:
            a_lo = lo_c
        else:
            hi_x = math.log(max(min(cur, vmin), 1e-300))
            lo_x = hi_x - 1.0
            floor_x = math.log(lo_c) if lo_c > 0 else -700.0
            while lo_x > floor_x and g(math.exp(lo_x)) < G:
                lo_x = hi_x - 2 * (hi_x - lo_x)
            lo_x = max(lo_x, floor_x)
            if g(math.exp(lo_x)) < G:
                a_lo = math.exp(lo_x)
            else:
                a_lo = math.exp(optimize.brentq(lambda x: g(math.exp(x)) - G, lo_x, hi_x, xtol=1e-12))
        # upper end
        if np.isfinite(hi_c) and g(hi_c) < G:
            a_hi = hi_c
        else:
            lo_x = math.log(max(cur, vmin))
            hi_x = lo_x + 1.0
            cap_x = math.log(hi_c) if np.isfinite(hi_c) else 700.0
            while hi_x < cap_x and g(math.exp(hi_x)) < G:
                hi_x = lo_x + 2 * (hi_x - lo_x)
            hi_x = min(hi_x, cap_x)
            a_hi = math.exp(optimize.brentq(lambda x: g(math.exp(x)) - G, lo_x, hi_x, xtol=1e-12))
        return max(a_lo, lo_c), min(a_hi, hi_c)

    def step5_vars(self, l: int, u: float | None = None) -> float:
        st = self.state
        if self.config.single_component and l > 0:
            return st.variances[l]
        lo_c, hi_c = self._order_bounds_var(l)
        cur = st.variances[l]
        lo, hi = self.var_interval(l, lo_c, hi_c)
        lo, hi = min(lo, cur), max(hi, cur)
        if not hi > lo:
            raise NumericalError("empty interval for component variance")
        if u is None:
            u = self.rng.random()
        st.variances[l] = lo + u * (hi - lo)
        self.s = neg_loglik(st, self.data, self.eta)
        self._check("variances")
        return st.variances[l]

    def _inverse_LJ(self, b: int, J: np.ndarray) -> np.ndarray:
        cache = self._lj_cache[b]
        key = J.tobytes()
        Linv = cache.get(key)
        if Linv is None:
            L = build_LJ(J, self.data.blocks[b].basis.knots)
            Linv = solve_triangular(L, np.eye(len(L)), lower=True)
            if len(cache) > 4096:
                cache.clear()
            cache[key] = Linv
        return Linv

    def _beta(self, b: int, J: np.ndarray, gamma_full: np.ndarray) -> np.ndarray:
        out = np.zeros(len(J))
        if J.any():
            out[J] = self._inverse_LJ(b, J) @ gamma_full[J]
        return out

    def coef_conditional(self, b: int, j: int):
        """Pieces of the (J_j, gamma_j) conditional for block `b`, coefficient `j`.

        Returns (feasible_without, eta_without, interval_with, eta_base_with, direction_with)
        where with J_j = 1 the mean function is ``eta_base_with + gamma_j * direction_with``.
        """
        st, blk = self.state, self.data.blocks[b]
        J, g = st.J[b], st.gamma[b]
        eta_other = self.eta - blk.X @ self._beta(b, J, g)
        resid_base = self.data.y - st.means[st.labels]
        iv = 1.0 / st.variances[st.labels]
        const = 0.5 * float(np.sum(LOG_2PI + np.log(st.variances[st.labels])))

        J0 = J.copy()
        J0[j] = False
        eta0 = eta_other + blk.X @ self._beta(b, J0, g) if J0.any() else eta_other
        r0 = resid_base - eta0
        s0 = const + 0.5 * float(np.sum(r0 * r0 * iv))
        feasible0 = s0 < st.z and not self.config.force_inclusion

        J1 = J.copy()
        J1[j] = True
        ga = g.copy()
        ga[j] = 0.0
        Linv1 = self._inverse_LJ(b, J1)
        pos = int(np.count_nonzero(J1[:j]))
        beta_a = np.zeros(blk.dim)
        beta_a[J1] = Linv1 @ ga[J1]
        beta_b = np.zeros(blk.dim)
        beta_b[J1] = Linv1[:, pos]
        p = eta_other + blk.X @ beta_a
        q = blk.X @ beta_b
        r = resid_base - p
        A = 0.5 * float(np.sum(q * q * iv))
        B = -float(np.sum(r * q * iv))
        C = const + 0.5 * float(np.sum(r * r * iv)) - st.z
        iv1 = quadratic_interval(A, B, C)
        if iv1 is not None:
            lo, hi = max(iv1[0], 0.0), iv1[1]
            iv1 = (lo, hi) if hi > lo else None
        if J[j]:
            cur = g[j]
            iv1 = (min(iv1[0], cur), max(iv1[1], cur)) if iv1 is not None else (cur, cur + 1e-300)
        return feasible0, eta0, iv1, p, q

    def step6_coef(self, b: int, j: int, u: tuple[float, float] | None = None):
        st, cfg = self.state, self.config
        feasible0, eta0, iv1, p, q = self.coef_conditional(b, j)
        sd = math.sqrt(self.c_coef * st.variances[0])
        pr1 = inclusion_probability(feasible0, iv1, sd, cfg.p_zero)
        if u is None:
            u = (self.rng.random(), self.rng.random())
        if u[0] < pr1:
            gj = truncnorm.draw(iv1[0], iv1[1], sd, u[1])
            st.J[b][j] = True
            st.gamma[b][j] = gj
            self.eta = p + gj * q
        else:
            st.J[b][j] = False
            st.gamma[b][j] = 0.0
            self.eta = eta0
        self.s = neg_loglik(st, self.data, self.eta)
        if not self.s < st.z:
            if self.s - st.z > 1e-8 * max(1.0, abs(st.z)):
                raise NumericalError("coefficient update left the slice")
            st.z = np.nextafter(self.s, np.inf)
        self._check("coefficients")
        return bool(st.J[b][j]), float(st.gamma[b][j])

    def sweep(self):
        # refresh the cached mean function to stop drift from incremental updates
        self.eta = np.zeros(self.data.T)
        for b, blk in enumerate(self.data.blocks):
            self.eta += blk.X @ self._beta(b, self.state.J[b], self.state.gamma[b])
        self.s = neg_loglik(self.state, self.data, self.eta)
        self.step1_slice()
        self.step2_labels()
        self.step3_weights()
        for l in range(3):
            self.step4_means(l)
        for l in range(3):
            self.step5_vars(l)
        for b, blk in enumerate(self.data.blocks):
            for j in range(blk.dim):
                self.step6_coef(b, j)

    # ------------------------------------------------------------------ run
    def run(self, progress: bool = False) -> "PosteriorSummary":
        cfg, data = self.config, self.data
        n_keep = cfg.sweeps
        acc = PosteriorSummary.empty(data, n_keep, cfg.keep_traces)
        rescues = 0
        for it in range(cfg.burn_in + n_keep):
            self.sweep()
            if it < cfg.burn_in // 2:
                rescues += self._rescue_empty_components()
            if it >= cfg.burn_in:
                acc.record(it - cfg.burn_in, self)
            if progress and (it + 1) % 500 == 0:
                log.info("sweep %d / %d", it + 1, cfg.burn_in + n_keep)
        acc.rescues = rescues
        return acc


@dataclass
class PosteriorSummary:
    n: int
    beta_sum: list[np.ndarray]
    incl_count: list[np.ndarray]
    label_count: np.ndarray
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    counts: np.ndarray
    s_trace: np.ndarray
    eta_mean_trace: np.ndarray
    gamma_trace: list[np.ndarray] | None = None
    rescues: int = 0
    empty_sweeps: int = 0

    @classmethod
    def empty(cls, data: RegressionData, n: int, traces: bool) -> "PosteriorSummary":
        return cls(
            n=0,
            beta_sum=[np.zeros(b.dim) for b in data.blocks],
            incl_count=[np.zeros(b.dim) for b in data.blocks],
            label_count=np.zeros((data.T, 3)),
            weights=np.zeros((n, 3)),
            means=np.zeros((n, 3)),
            variances=np.zeros((n, 3)),
            counts=np.zeros((n, 3), dtype=np.int64),
            s_trace=np.zeros(n),
            eta_mean_trace=np.zeros(n),
            gamma_trace=[np.zeros((n, b.dim)) for b in data.blocks] if traces else None,
        )

    def record(self, k: int, sampler: Sampler):
        st = sampler.state
        for b, blk in enumerate(sampler.data.blocks):
            self.beta_sum[b] += block_beta(st.J[b], st.gamma[b], blk.basis.knots)
            self.incl_count[b] += st.J[b]
            if self.gamma_trace is not None:
                self.gamma_trace[b][k] = st.gamma[b]
        self.label_count[np.arange(len(st.labels)), st.labels] += 1
        self.counts[k] = np.bincount(st.labels, minlength=3)
        if not sampler.config.single_component and self.counts[k].min() == 0:
            self.empty_sweeps += 1
        self.weights[k] = st.weights
        self.means[k] = st.means
        self.variances[k] = st.variances
        self.s_trace[k] = sampler.s
        self.eta_mean_trace[k] = sampler.eta.mean()
        self.n = k + 1


@dataclass
class RegressionFit:
    """Posterior-mean summary of one supply regression (supply region i, price region j)."""

    supply_region: str
    price_region: str
    supply_fn: MonotoneFunction
    cost_fns: dict[str, MonotoneFunction] = field(default_factory=dict)
    mixture: MixtureParams | None = None
    label_probs: np.ndarray | None = None
    inclusion: dict[str, np.ndarray] = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)

    @property
    def alpha_bar(self) -> float:
        """Posterior mean of the disturbance mean E(eps)."""
        if self.mixture is None:
            return float(self.diagnostics.get("single_mean", 0.0))
        # averaged per sweep: an emptied component has negligible weight but a
        # prior-driven mean, so the product of separate averages is biased
        return float(self.diagnostics.get("alpha_bar", self.mixture.mean))

    def eta(self, supply, flows: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
        out = self.supply_fn(supply)
        for a, fn in self.cost_fns.items():
            if flows is None or a not in flows:
                raise ValidationError(f"flow for arc {a} required")
            out = out + fn(flows[a])
        return out

    def eta_from_dataset(self, dataset: PanelDataset) -> np.ndarray:
        flows = {a: dataset.column("flow", a) for a in self.cost_fns}
        return self.eta(dataset.column("supply", self.supply_region), flows)

    def residuals(self, dataset: PanelDataset) -> np.ndarray:
        return dataset.column("log_price", self.price_region) - self.eta_from_dataset(dataset)

    def to_dict(self, include_labels: bool = False) -> dict:
        d = {
            "supply_region": self.supply_region,
            "price_region": self.price_region,
            "supply_fn": self.supply_fn.to_dict(),
            "cost_fns": {a: f.to_dict() for a, f in self.cost_fns.items()},
            "mixture": self.mixture.to_dict() if self.mixture is not None else None,
            "inclusion": {k: v.tolist() for k, v in self.inclusion.items()},
            "diagnostics": {k: v for k, v in self.diagnostics.items() if isinstance(v, (int, float, str, list, bool))},
        }
        if include_labels and self.label_probs is not None:
            d["label_probs"] = self.label_probs.tolist()
        return d

    @classmethod
    def from_dict(cls, d) -> "RegressionFit":
        return cls(
            supply_region=d["supply_region"],
            price_region=d["price_region"],
            supply_fn=MonotoneFunction.from_dict(d["supply_fn"]),
            cost_fns={a: MonotoneFunction.from_dict(f) for a, f in d.get("cost_fns", {}).items()},
            mixture=MixtureParams.from_dict(d["mixture"]) if d.get("mixture") else None,
            label_probs=np.asarray(d["label_probs"]) if d.get("label_probs") is not None else None,
            inclusion={k: np.asarray(v) for k, v in d.get("inclusion", {}).items()},
            diagnostics=dict(d.get("diagnostics", {})),
        )


def _split_half_shift(x: np.ndarray) -> float:
    h = len(x) // 2
    if h < 10:
        return 0.0
    sd = np.std(x)
    if sd == 0:
        return 0.0
    return float(abs(x[:h].mean() - x[h:].mean()) / sd)


def summarize(summary: PosteriorSummary, data: RegressionData, config: SamplerConfig,
              supply_region: str = "", price_region: str = "") -> RegressionFit:
    n = summary.n
    if n == 0:
        raise ValidationError("no retained sweeps")
    fns = []
    for b, blk in enumerate(data.blocks):
        beta = summary.beta_sum[b] / n
        beta[np.abs(beta) < 1e-15] = 0.0
        fns.append(MonotoneFunction.from_beta(blk.basis, beta, blk.bounds, tol=1e-6))
    w = summary.weights[:n].mean(axis=0)
    # component parameters averaged over sweeps where the component is occupied;
    # an empty component's draws come from the prior alone
    occupied = summary.counts[:n] > 0
    occupied[:, ~occupied.any(axis=0)] = True
    a = np.sum(summary.means[:n] * occupied, axis=0) / occupied.sum(axis=0)
    v = np.sum(summary.variances[:n] * occupied, axis=0) / occupied.sum(axis=0)
    diagnostics = {
        "sweeps": n,
        "burn_in": config.burn_in,
        "seed": config.seed,
        "s_mean": float(summary.s_trace[:n].mean()),
        "weights_sd": summary.weights[:n].std(axis=0).tolist(),
        "means_sd": summary.means[:n].std(axis=0).tolist(),
        "variances_mean": v.tolist(),
        "burn_in_rescues": summary.rescues,
        "empty_component_fraction": summary.empty_sweeps / n,
        "alpha_bar": float(np.mean(np.sum(summary.weights[:n] * summary.means[:n], axis=1))),
    }
    if diagnostics["empty_component_fraction"] > 0.05:
        warnings.warn(f"a mixture component was empty in {summary.empty_sweeps} of {n} retained sweeps",
                      ConvergenceWarning, stacklevel=2)
    mixture = None
    if config.single_component:
        diagnostics["single_mean"] = float(a[0])
        diagnostics["single_sd"] = float(math.sqrt(v[0]))
    else:
        try:
            mixture = MixtureParams(tuple(w / w.sum()), tuple(a), tuple(np.sqrt(v)))
        except ValidationError:
            # occupied-sweep averages can break the ordering; all-sweep averages cannot
            a_all, v_all = summary.means[:n].mean(axis=0), summary.variances[:n].mean(axis=0)
            try:
                mixture = MixtureParams(tuple(w / w.sum()), tuple(a_all), tuple(np.sqrt(v_all)))
            except ValidationError as exc:
                raise NumericalError(f"posterior mean mixture violates constraints: {exc}") from None
    shifts = {
        "alpha1": _split_half_shift(summary.means[:n, 0]),
        "log_var1": _split_half_shift(np.log(summary.variances[:n, 0])),
        "eta_mean": _split_half_shift(summary.eta_mean_trace[:n]),
    }
    diagnostics["split_half_shift"] = max(shifts.values())
    if diagnostics["split_half_shift"] > 2.0:
        warnings.warn(f"possible non-convergence: split-half mean shifts {shifts}", ConvergenceWarning, stacklevel=2)
    return RegressionFit(
        supply_region=supply_region,
        price_region=price_region,
        supply_fn=fns[0],
        cost_fns={blk.name: fns[b] for b, blk in enumerate(data.blocks) if b > 0},
        mixture=mixture,
        label_probs=summary.label_count / n,
        inclusion={blk.name: summary.incl_count[b] / n for b, blk in enumerate(data.blocks)},
        diagnostics=diagnostics,
    )


def fit_data(data: RegressionData, config: SamplerConfig | None = None, *, supply_region: str = "",
             price_region: str = "", return_summary: bool = False):
    config = config or SamplerConfig()
    sampler = Sampler(data, config)
    summary = sampler.run()
    fit = summarize(summary, data, config, supply_region, price_region)
    return (fit, summary) if return_summary else fit


def fit_regression(dataset: PanelDataset, supply_region: str, price_region: str,
                   config: SamplerConfig | None = None) -> RegressionFit:
    """Fit the region-i supply regression for prices in region j."""
    config = config or SamplerConfig()
    data = regression_data(dataset, supply_region, price_region, n_knots=config.n_knots)
    return fit_data(data, config, supply_region=supply_region, price_region=price_region)
