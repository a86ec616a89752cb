"""Three-component Gaussian mixture disturbances."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from .errors import ValidationError


@dataclass(frozen=True)
class MixtureParams:
    """Weights, means and standard deviations of the disturbance mixture.

    Component 1 is the baseline; component 2 has lower mean, component 3 higher
    mean, and both have larger spread than component 1.
    """

    weights: tuple[float, float, float]
    means: tuple[float, float, float]
    sds: tuple[float, float, float]

    def __post_init__(self):
        w, a, s = (np.asarray(x, dtype=float) for x in (self.weights, self.means, self.sds))
        if w.shape != (3,) or a.shape != (3,) or s.shape != (3,):
            raise ValidationError("mixture parameters must have three components")
        if np.any(w <= 0) or abs(w.sum() - 1) > 1e-9:
            raise ValidationError("mixture weights must be positive and sum to one")
        if not (a[1] < a[0] < a[2]):
            raise ValidationError("mixture means must satisfy alpha2 < alpha1 < alpha3")
        if np.any(s <= 0) or not (s[0] < s[1] and s[0] < s[2]):
            raise ValidationError("mixture sds must satisfy sigma1 < sigma2 and sigma1 < sigma3")
        for name, x in (("weights", w), ("means", a), ("sds", s)):
            object.__setattr__(self, name, tuple(float(v) for v in x))

    @property
    def mean(self) -> float:
        """Marginal mean sum_l w_l alpha_l."""
        return float(np.dot(self.weights, self.means))

    def arrays(self):
        return np.array(self.weights), np.array(self.means), np.array(self.sds)

    def cdf(self, x):
        return mixture_cdf(x, *self.arrays())

    def sf(self, x):
        return mixture_sf(x, *self.arrays())

    def pdf(self, x):
        return mixture_pdf(x, *self.arrays())

    def ppf(self, q):
        return mixture_ppf(q, *self.arrays())

    def sample(self, n: int, rng: np.random.Generator, return_labels: bool = False):
        w, a, s = self.arrays()
        lab = rng.choice(3, size=n, p=w)
        x = a[lab] + s[lab] * rng.standard_normal(n)
        return (x, lab) if return_labels else x

    def log_price_mean(self) -> float:
        """E[exp(eps)] for eps drawn from the mixture (lognormal components)."""
        w, a, s = self.arrays()
        return float(np.sum(w * np.exp(a + 0.5 * s * s)))

    def to_dict(self) -> dict:
        return {"weights": list(self.weights), "means": list(self.means), "sds": list(self.sds)}

    @classmethod
    def from_dict(cls, d) -> "MixtureParams":
        return cls(tuple(d["weights"]), tuple(d["means"]), tuple(d["sds"]))


def _z(x, a, s):
    x = np.asarray(x, dtype=float)
    return (x[..., None] - a) / s


def mixture_cdf(x, w, a, s):
    return np.sum(w * special.ndtr(_z(x, a, s)), axis=-1)


def mixture_sf(x, w, a, s):
    return np.sum(w * special.ndtr(-_z(x, a, s)), axis=-1)


def mixture_pdf(x, w, a, s):
    z = _z(x, a, s)
    return np.sum(w * np.exp(-0.5 * z * z) / (np.sqrt(2 * np.pi) * s), axis=-1)


def mixture_logcdf(x, w, a, s):
    return special.logsumexp(special.log_ndtr(_z(x, a, s)), b=w, axis=-1)


def mixture_logsf(x, w, a, s):
    return special.logsumexp(special.log_ndtr(-_z(x, a, s)), b=w, axis=-1)


def mixture_ppf(q, w, a, s, *, tol: float = 1e-12):
    """Quantile function by bracketed root finding on the log CDF / log SF.

    Works for quantiles arbitrarily close to 0 or 1.
    """
    q = np.asarray(q, dtype=float)
    flat = q.ravel()
    out = np.empty_like(flat)
    w, a, s = (np.asarray(v, dtype=float) for v in (w, a, s))
    lo0, hi0 = float(np.min(a - 40 * s)), float(np.max(a + 40 * s))
    for k, p in enumerate(flat):
        if not 0 < p < 1:
            out[k] = -np.inf if p <= 0 else np.inf
            continue
        if p < 0.5:
            target = np.log(p)
            f = lambda x: mixture_logcdf(x, w, a, s) - target  # noqa: E731
        else:
            target = np.log1p(-p)
            f = lambda x: target - mixture_logsf(x, w, a, s)  # noqa: E731
        lo, hi = lo0, hi0
        while f(lo) > 0:
            lo -= (hi0 - lo0)
        while f(hi) < 0:
            hi += (hi0 - lo0)
        out[k] = optimize.brentq(f, lo, hi, xtol=tol * max(1.0, abs(lo0)), rtol=4 * np.finfo(float).eps)
    return out.reshape(q.shape)


def mixture_ppf_table(q, w, a, s, grid_size: int = 4001, newton_steps: int = 3):
    """Vectorized quantiles: interpolate a dense CDF table, then polish with Newton steps.

    Much faster than root finding when many quantiles of one mixture are needed;
    use `mixture_ppf` when extreme tail accuracy matters.
    """
    q = np.asarray(q, dtype=float)
    w, a, s = (np.asarray(v, dtype=float) for v in (w, a, s))
    lo, hi = float(np.min(a - 12 * s)), float(np.max(a + 12 * s))
    xs = np.linspace(lo, hi, grid_size)
    cs = mixture_cdf(xs, w, a, s)
    x = np.interp(q, cs, xs)
    for _ in range(newton_steps):
        dens = np.maximum(mixture_pdf(x, w, a, s), 1e-300)
        x = np.clip(x - (mixture_cdf(x, w, a, s) - q) / dens, lo, hi)
    return x
