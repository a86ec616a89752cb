"""Gaussian copula with a sparse-lag VAR latent process.

Residuals from the r regressions of one supply region are pushed through
their marginal distributions to uniforms, then to normal scores ``w``.  The
scores follow a stationary VAR with coefficients only at a sparse lag set;
its autocorrelation blocks R(h) are the copula parameters.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse, special, stats

from .errors import NumericalError, ValidationError
from .mixture import MixtureParams, mixture_ppf

log = logging.getLogger(__name__)

TARGET_RADIUS = 0.995
DENSE_LYAPUNOV_MAX = 1000  # companion size above which Gamma comes from the MA series


# ---------------------------------------------------------------- margins
@dataclass(frozen=True)
class NormalRef:
    """Single normal reference distribution for the tails of a marginal transform."""

    mean: float
    sd: float

    def cdf(self, x):
        return special.ndtr((np.asarray(x, dtype=float) - self.mean) / self.sd)

    def sf(self, x):
        return special.ndtr(-(np.asarray(x, dtype=float) - self.mean) / self.sd)

    def ppf(self, q):
        return self.mean + self.sd * special.ndtri(np.asarray(q, dtype=float))

    def to_dict(self):
        return {"normal": {"mean": self.mean, "sd": self.sd}}


def _ref_from_dict(d):
    if "normal" in d:
        return NormalRef(**d["normal"])
    return MixtureParams.from_dict(d)


@dataclass(frozen=True, eq=False)
class MarginalTransform:
    """Composite CDF: empirical distribution of the training residuals, with the
    reference (fitted mixture) CDF supplying the tails beyond the sample range.

    At the k-th order statistic the CDF equals k/(T+1); in between it is linear.
    """

    reference: MixtureParams | NormalRef
    table: np.ndarray  # sorted training residuals

    def __post_init__(self):
        t = np.sort(np.asarray(self.table, dtype=float))
        if t.ndim != 1 or len(t) < 2 or not np.all(np.isfinite(t)):
            raise ValidationError("transform table needs at least two finite residuals")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @classmethod
    def from_residuals(cls, residuals, reference) -> "MarginalTransform":
        return cls(reference, np.asarray(residuals, dtype=float))

    @property
    def n(self) -> int:
        return len(self.table)

    @property
    def levels(self) -> np.ndarray:
        return np.arange(1, self.n + 1) / (self.n + 1)

    def pit(self, x) -> np.ndarray:
        """Reference-distribution PIT (the mixture CDF)."""
        return self.reference.cdf(x)

    def cdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        xs, n = self.table, self.n
        out = np.interp(x, xs, self.levels)
        lo, hi = x < xs[0], x > xs[-1]
        if np.any(lo):
            out = np.where(lo, self.reference.cdf(np.where(lo, x, xs[0])) / self.reference.cdf(xs[0]) / (n + 1), out)
        if np.any(hi):
            tail = self.reference.sf(np.where(hi, x, xs[-1])) / self.reference.sf(xs[-1]) / (n + 1)
            out = np.where(hi, 1.0 - tail, out)
        return out

    def ppf(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        xs, n = self.table, self.n
        out = np.interp(u, self.levels, xs)
        lo, hi = u < 1.0 / (n + 1), u > n / (n + 1.0)
        if np.any(lo):
            target = u[lo] * (n + 1) * self.reference.cdf(xs[0])
            out[lo] = np.minimum(self._ref_ppf(target), xs[0])
        if np.any(hi):
            target = (1.0 - u[hi]) * (n + 1) * self.reference.sf(xs[-1])
            out[hi] = np.maximum(self._ref_ppf(1.0 - target, upper_tail=target), xs[-1])
        return out

    def _ref_ppf(self, q, upper_tail=None):
        ref = self.reference
        if isinstance(ref, NormalRef):
            if upper_tail is not None:
                return ref.mean - ref.sd * special.ndtri(upper_tail)
            return ref.ppf(q)
        w, a, s = ref.arrays()
        if upper_tail is not None:
            # solve on the survival side to keep precision for tiny tail mass
            from scipy import optimize

            out = np.empty(len(upper_tail))
            for k, p in enumerate(upper_tail):
                if p <= 0:
                    out[k] = np.inf
                    continue
                f = lambda x: math.log(max(float(ref.sf(x)), 1e-320)) - math.log(p)  # noqa: E731
                lo, hi = float(np.min(a)), float(np.max(a + 40 * s))
                while f(lo) < 0:
                    lo -= 10 * float(np.max(s))
                while f(hi) > 0:
                    hi += 10 * float(np.max(s))
                out[k] = optimize.brentq(f, lo, hi, xtol=1e-12)
            return out
        return mixture_ppf(q, w, a, s)

    def to_dict(self) -> dict:
        return {"reference": self.reference.to_dict(), "table": self.table.tolist()}

    @classmethod
    def from_dict(cls, d) -> "MarginalTransform":
        return cls(_ref_from_dict(d["reference"]), np.asarray(d["table"], dtype=float))


@dataclass
class CopulaData:
    residuals: np.ndarray  # (T, r)
    u_tilde: np.ndarray  # reference PIT
    u_hat: np.ndarray  # rank / (T + 1)
    w_hat: np.ndarray  # normal scores
    transforms: list[MarginalTransform]


def rank_uniforms(x) -> np.ndarray:
    """Column-wise ordinal ranks divided by T + 1."""
    x = np.asarray(x, dtype=float)
    ranks = stats.rankdata(x, method="ordinal", axis=0)
    return ranks / (x.shape[0] + 1)


def compute_copula_data(residuals, references: Sequence) -> CopulaData:
    """Copula data from a (T, r) residual matrix and one reference distribution per column."""
    e = np.asarray(residuals, dtype=float)
    if e.ndim != 2 or e.shape[1] != len(references):
        raise ValidationError("one reference distribution per residual column required")
    if not np.all(np.isfinite(e)):
        raise ValidationError("non-finite residuals")
    u_tilde = np.column_stack([ref.cdf(e[:, k]) for k, ref in enumerate(references)])
    u_hat = rank_uniforms(e)
    w_hat = special.ndtri(u_hat)
    transforms = [MarginalTransform.from_residuals(e[:, k], ref) for k, ref in enumerate(references)]
    return CopulaData(e, u_tilde, u_hat, w_hat, transforms)


def copula_data_from_fits(fits, dataset) -> CopulaData:
    """Residuals of the r regressions of one supply region (ordered by price region)."""
    e = np.column_stack([f.residuals(dataset) for f in fits])
    return compute_copula_data(e, [reference_distribution(f) for f in fits])


def reference_distribution(fit):
    """The fitted disturbance distribution: the mixture, or a normal for single-component fits."""
    if fit.mixture is not None:
        return fit.mixture
    return NormalRef(fit.alpha_bar, float(fit.diagnostics["single_sd"]))


def to_scores(transforms: Sequence[MarginalTransform], eps) -> np.ndarray:
    """Normal scores Phi^{-1}(F(eps)) for a (n, r) block of disturbances."""
    eps = np.asarray(eps, dtype=float)
    u = np.column_stack([tr.cdf(eps[:, k]) for k, tr in enumerate(transforms)])
    return special.ndtri(np.clip(u, 1e-300, 1 - 1e-16))


# ---------------------------------------------------------------- VAR
def _design(w, lags, start):
    T = w.shape[0]
    Y = w[start:]
    X = np.hstack([w[start - h: T - h] for h in lags])
    return Y, X


def conditional_loglik(w, lags, coefs, sigma, start=None) -> float:
    """Gaussian log-likelihood of w[start:] given the earlier rows."""
    w = np.asarray(w, dtype=float)
    lags = tuple(lags)
    start = max(lags) if start is None else start
    Y, X = _design(w, lags, start)
    B = np.vstack([np.asarray(coefs[k]).T for k in range(len(lags))])
    E = Y - X @ B
    r = w.shape[1]
    L = np.linalg.cholesky(sigma)
    z = np.linalg.solve(L, E.T)
    logdet = 2 * np.sum(np.log(np.diag(L)))
    n = Y.shape[0]
    return float(-0.5 * (n * r * math.log(2 * math.pi) + n * logdet + np.sum(z * z)))


@dataclass
class CopulaModel:
    """Sparse-lag VAR for the normal scores; ``coefs[k]`` multiplies w_{t - lags[k]}."""

    lags: tuple[int, ...]
    coefs: np.ndarray  # (|L|, r, r)
    chol: np.ndarray  # lower Cholesky factor of the innovation covariance
    regions: tuple[str, ...] = ()
    rescale: float = 1.0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.lags = tuple(int(h) for h in self.lags)
        self.coefs = np.asarray(self.coefs, dtype=float)
        self.chol = np.asarray(self.chol, dtype=float)
        if len(self.lags) == 0 or any(h < 1 for h in self.lags) or len(set(self.lags)) != len(self.lags):
            raise ValidationError("lag set must be nonempty distinct positive integers")
        if self.coefs.shape != (len(self.lags), self.r, self.r):
            raise ValidationError("coefficient array shape does not match lags")
        order = np.argsort(self.lags)
        self.lags = tuple(self.lags[k] for k in order)
        self.coefs = self.coefs[order]

    @property
    def r(self) -> int:
        return self.chol.shape[0]

    @property
    def p(self) -> int:
        return max(self.lags)

    @property
    def sigma(self) -> np.ndarray:
        return self.chol @ self.chol.T

    def coef(self, h: int) -> np.ndarray:
        return self.coefs[self.lags.index(h)] if h in self.lags else np.zeros((self.r, self.r))

    def companion(self) -> sparse.csr_matrix:
        return companion_matrix(self.coefs, self.lags, self.r)

    def spectral_radius(self) -> float:
        return spectral_radius(self.companion())

    def autocov(self, hs) -> np.ndarray:
        return autocovariance(self, hs)

    @property
    def marginal_sd(self) -> np.ndarray:
        if "sd" not in self._cache:
            self._cache["sd"] = np.sqrt(np.diag(self.autocov([0])[0]))
        return self._cache["sd"]

    def to_dict(self) -> dict:
        return {
            "lags": list(self.lags),
            "coefs": self.coefs.tolist(),
            "chol": self.chol.tolist(),
            "regions": list(self.regions),
            "rescale": self.rescale,
        }

    @classmethod
    def from_dict(cls, d) -> "CopulaModel":
        return cls(tuple(d["lags"]), np.asarray(d["coefs"]), np.asarray(d["chol"]),
                   tuple(d.get("regions", ())), float(d.get("rescale", 1.0)))


def companion_matrix(coefs, lags, r) -> sparse.csr_matrix:
    p = max(lags)
    n = r * p
    rows, cols, vals = [], [], []
    for A, h in zip(coefs, lags):
        ii, jj = np.nonzero(A)
        rows.append(ii)
        cols.append(jj + (h - 1) * r)
        vals.append(A[ii, jj])
    if p > 1:
        idx = np.arange(r, n)
        rows.append(idx)
        cols.append(idx - r)
        vals.append(np.ones(n - r))
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def spectral_radius(C) -> float:
    n = C.shape[0]
    if n == 0:
        return 0.0
    dense = C.toarray() if sparse.issparse(C) else np.asarray(C)
    return float(np.max(np.abs(np.linalg.eigvals(dense))))


def _var_radius(coefs, lags, r) -> float:
    return spectral_radius(companion_matrix(coefs, lags, r))


def stabilize(coefs, lags, r, target: float = TARGET_RADIUS):
    """Smallest shrink factor c in (0, 1] with radius(c * coefs) <= target (bisection)."""
    rho = _var_radius(coefs, lags, r)
    if rho < 1.0:
        return coefs, 1.0
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _var_radius(mid * coefs, lags, r) <= target:
            lo = mid
        else:
            hi = mid
    return lo * coefs, lo


def fit_var(w, lags, *, start: int | None = None, regions: Sequence[str] = ()) -> CopulaModel:
    """Conditional least-squares (Gaussian conditional MLE) fit with zero mean."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or not np.all(np.isfinite(w)):
        raise ValidationError("scores must be a finite (T, r) array")
    lags = tuple(sorted(int(h) for h in lags))
    start = max(lags) if start is None else int(start)
    T, r = w.shape
    if T - start <= r * len(lags) + r:
        raise ValidationError(f"need more than {start + r * len(lags) + r} observations for lags {lags}")
    Y, X = _design(w, lags, start)
    B, *_ = np.linalg.lstsq(X, Y, rcond=None)
    coefs = np.stack([B[k * r:(k + 1) * r].T for k in range(len(lags))])
    E = Y - X @ B
    sigma = E.T @ E / len(Y)
    coefs, scale = stabilize(coefs, lags, r)
    if scale < 1.0:
        warnings.warn(f"fitted VAR not stationary; coefficients shrunk by factor {scale:.4f}", RuntimeWarning,
                      stacklevel=2)
        E = Y - X @ np.vstack([A.T for A in coefs])
        sigma = E.T @ E / len(Y)
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise NumericalError("innovation covariance is not positive definite") from None
    return CopulaModel(lags, coefs, chol, tuple(regions), scale)


def lag_candidates(periods_per_day: int = 48, max_short: int = 5, max_days: int = 7):
    return [
        (q, D, tuple(range(1, q + 1)) + tuple(periods_per_day * d for d in range(1, D + 1)))
        for q in range(1, max_short + 1)
        for D in range(1, max_days + 1)
    ]


@dataclass
class LagSelection:
    lags: tuple[int, ...]
    q: int
    D: int
    table: list[dict]


def bic(w, lags, start) -> tuple[float, float, int]:
    """(BIC, log-likelihood, number of coefficients) of the CLS fit on rows start: of w."""
    w = np.asarray(w, dtype=float)
    T, r = w.shape
    Y, X = _design(w, lags, start)
    B, *_ = np.linalg.lstsq(X, Y, rcond=None)
    E = Y - X @ B
    n = len(Y)
    sigma = E.T @ E / n
    sign, logdet = np.linalg.slogdet(sigma)
    if sign <= 0:
        raise NumericalError("singular residual covariance in lag selection")
    ll = -0.5 * n * (r * math.log(2 * math.pi) + logdet + r)
    k = r * r * len(lags)
    return -2 * ll + k * math.log(n), ll, k


def select_lags(w, *, periods_per_day: int = 48, max_short: int = 5, max_days: int = 7) -> LagSelection:
    """BIC over contiguous short lags 1..q and daily lags d * periods_per_day, d = 1..D."""
    w = np.asarray(w, dtype=float)
    pmax = periods_per_day * max_days
    if w.shape[0] <= 2 * pmax:
        raise ValidationError(f"lag selection needs more than {2 * pmax} observations, got {w.shape[0]}")
    table = []
    for q, D, lags in lag_candidates(periods_per_day, max_short, max_days):
        b, ll, k = bic(w, lags, pmax)
        table.append({"q": q, "D": D, "bic": b, "loglik": ll, "k": k})
    best = min(table, key=lambda row: row["bic"])
    lags = tuple(range(1, best["q"] + 1)) + tuple(periods_per_day * d for d in range(1, best["D"] + 1))
    return LagSelection(lags, best["q"], best["D"], table)


# ---------------------------------------------------------------- autocovariances
def lyapunov_doubling(C, Q, *, tol: float = 1e-10, max_iter: int = 64) -> np.ndarray:
    """Solve P = C P C' + Q by doubling: P <- P + C_k P C_k', C_k <- C_k^2.

    ``C`` may be sparse; it is kept sparse while its density stays low.
    """
    Q = np.asarray(Q, dtype=float)
    P = Q.copy()
    Ck = sparse.csr_matrix(C) if sparse.issparse(C) else np.asarray(C, dtype=float)
    n = Q.shape[0]
    for _ in range(max_iter):
        if sparse.issparse(Ck):
            CP = np.asarray(Ck @ P)
            incr = np.asarray(Ck @ CP.T).T
            Ck = Ck @ Ck
            if Ck.nnz > 0.1 * n * n:
                Ck = Ck.toarray()
        else:
            incr = Ck @ P @ Ck.T
            Ck = Ck @ Ck
        P = P + incr
        scale = max(1.0, float(np.max(np.abs(P))))
        if np.max(np.abs(incr)) <= 1e-16 * scale:
            break
        if not np.all(np.isfinite(P)):
            raise NumericalError("Lyapunov doubling diverged (non-stationary companion matrix)")
    P = 0.5 * (P + P.T)
    CP = C @ P
    res = P - np.asarray(C @ np.asarray(CP).T).T - Q
    rel = float(np.max(np.abs(res))) / max(1.0, float(np.max(np.abs(P))))
    if rel > tol:
        raise NumericalError(f"Lyapunov solver did not converge: residual norm {rel:.3e}")
    return P


def _gamma_recursion(model: CopulaModel, base: dict[int, np.ndarray], hmax: int) -> dict[int, np.ndarray]:
    """Extend Gamma(0..p-1) to Gamma(h) for h >= p with Gamma(h) = sum_k A_k Gamma(h - k)."""
    out = dict(base)
    for h in range(model.p, hmax + 1):
        out[h] = sum(A @ out[h - lag] for A, lag in zip(model.coefs, model.lags))
    return out


def autocov_lyapunov(model: CopulaModel, hs) -> np.ndarray:
    r, p = model.r, model.p
    C = model.companion()
    Q = np.zeros((r * p, r * p))
    Q[:r, :r] = model.sigma
    P = lyapunov_doubling(C, Q)
    base = {k: P[:r, k * r:(k + 1) * r] for k in range(p)}
    hs = [int(h) for h in hs]
    full = _gamma_recursion(model, base, max(max(abs(h) for h in hs), p - 1))
    return np.stack([full[h] if h >= 0 else full[-h].T for h in hs])


def autocov_ma(model: CopulaModel, hs, *, tol: float = 1e-13, max_terms: int = 2_000_000) -> np.ndarray:
    """Gamma(h) = sum_j Psi_{j+h} Sigma Psi_j' from the moving-average weights."""
    r = model.r
    hs = [int(h) for h in hs]
    hmax = max(abs(h) for h in hs)
    psi = [np.eye(r)]
    chunk_norm = 1.0
    j = 0
    while j < max_terms:
        j += 1
        nxt = np.zeros((r, r))
        for A, lag in zip(model.coefs, model.lags):
            if j - lag >= 0:
                nxt += A @ psi[j - lag]
        psi.append(nxt)
        if j % model.p == 0 or j == hmax:
            chunk_norm = max(np.abs(m).max() for m in psi[-model.p:])
            if j > hmax + model.p and chunk_norm < tol:
                break
    else:
        raise NumericalError("moving-average weights did not decay; model not stationary")
    Psi = np.stack(psi)
    Phi = Psi @ model.chol
    n = len(Phi)
    out = []
    for h in hs:
        a = abs(h)
        G = np.einsum("jab,jcb->ac", Phi[a:], Phi[: n - a])
        out.append(G if h >= 0 else G.T)
    return np.stack(out)


def autocovariance(model: CopulaModel, hs) -> np.ndarray:
    """Gamma(h) = E[w_t w_{t-h}'] for each h in `hs` (negative h gives the transpose)."""
    if model.r * model.p <= DENSE_LYAPUNOV_MAX:
        return autocov_lyapunov(model, hs)
    return autocov_ma(model, hs)


def autocorr_blocks(model: CopulaModel, hs) -> np.ndarray:
    hs = list(hs)
    G = autocovariance(model, [0] + hs)
    d = 1.0 / np.sqrt(np.diag(G[0]))
    return G[1:] * d[:, None] * d[None, :]


def block_toeplitz(R, n_blocks: int) -> np.ndarray:
    """Correlation matrix of (w_t, ..., w_{t+n-1}) from R(0..n-1)."""
    r = R[0].shape[0]
    out = np.zeros((n_blocks * r, n_blocks * r))
    for a in range(n_blocks):
        for b in range(n_blocks):
            blk = R[a - b] if a >= b else R[b - a].T
            out[a * r:(a + 1) * r, b * r:(b + 1) * r] = blk
    return out


def kendall_tau(phi):
    """Rank dependence (6/pi) arcsin(phi/2) of a Gaussian copula with latent correlation phi.

    This is the measure reported in the auto-dependence matrices.  For a
    Gaussian pair it equals the population Spearman correlation; the
    population Kendall coefficient would be (2/pi) arcsin(phi).
    """
    phi = np.asarray(phi, dtype=float)
    if np.any(np.abs(phi) > 1 + 1e-12):
        raise ValidationError("latent correlation must lie in [-1, 1]")
    return 6.0 / math.pi * np.arcsin(np.clip(phi, -1.0, 1.0) / 2.0)


def auto_dependence(model: CopulaModel, h: int) -> np.ndarray:
    """Kendall tau between w_{j,t} and w_{l,t-h} (rows j, columns l)."""
    return kendall_tau(autocorr_blocks(model, [h])[0])


# ---------------------------------------------------------------- simulation
SIM_BLOCK = 1024


def simulate_scores(model: CopulaModel, history, horizon: int, n_draws: int, seed: int | Sequence[int],
                    *, block: int = SIM_BLOCK) -> np.ndarray:
    """w-paths of shape (n_draws, horizon, r) continuing the last p rows of `history`.

    Draws are generated in fixed-size blocks, each seeded from (seed, block index),
    so results do not depend on how blocks are scheduled.
    """
    hist = np.asarray(history, dtype=float)
    r, p = model.r, model.p
    if hist.ndim != 2 or hist.shape[1] != r:
        raise ValidationError(f"history must have shape (>= {p}, {r})")
    if hist.shape[0] < p:
        raise ValidationError(f"history needs at least {p} rows, got {hist.shape[0]}")
    if not np.all(np.isfinite(hist[-p:])):
        raise ValidationError("history contains non-finite values")
    hist = hist[-p:]
    out = np.empty((n_draws, horizon, r))
    for b0 in range(0, n_draws, block):
        nb = min(block, n_draws - b0)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b0 // block,)))
        z = rng.standard_normal((block, horizon, r))[:nb]
        buf = np.empty((nb, p + horizon, r))
        buf[:, :p] = hist
        for h in range(horizon):
            t = p + h
            mean = np.zeros((nb, r))
            for A, lag in zip(model.coefs, model.lags):
                mean += buf[:, t - lag] @ A.T
            buf[:, t] = mean + z[:, h] @ model.chol.T
        out[b0:b0 + nb] = buf[:, p:]
    return out


def scores_to_disturbances(model: CopulaModel, transforms: Sequence[MarginalTransform], w) -> np.ndarray:
    """eps = F^{-1}(Phi(w / sd)) per region, with sd the stationary sd of each score."""
    w = np.asarray(w, dtype=float)
    u = special.ndtr(w / model.marginal_sd)
    eps = np.empty_like(u)
    for k, tr in enumerate(transforms):
        eps[..., k] = tr.ppf(u[..., k].ravel()).reshape(u.shape[:-1])
    return eps


def simulate_forward(model: CopulaModel, transforms: Sequence[MarginalTransform], history, horizon: int,
                     n_draws: int, seed: int | Sequence[int]) -> np.ndarray:
    """Disturbance draws (n_draws, horizon, r) given the score history."""
    if len(transforms) != model.r:
        raise ValidationError("one marginal transform per region required")
    w = simulate_scores(model, history, horizon, n_draws, seed)
    return scores_to_disturbances(model, transforms, w)
