"""Hand-built models with known curves, for tests that should not depend on MCMC output."""
import numpy as np

from nemprice.copula import CopulaModel, MarginalTransform, NormalRef
from nemprice.forecast import SupplyRegionModel
from nemprice.mcmc import RegressionFit
from nemprice.spline import MonotoneFunction, SplineBasis

BASIS = SplineBasis(np.array([0.25, 0.5, 0.75]))


def curve(slope, curvature=0.0, bounds=(0.0, 1.0)):
    """slope*b + curvature*b^2 on normalized b (both >= 0 keeps it monotone)."""
    beta = np.zeros(BASIS.dim)
    beta[0], beta[1] = slope, curvature
    return MonotoneFunction.from_beta(BASIS, beta, bounds)


def single_fit(supply_region, price_region, supply_fn, mean, sd=0.1, cost_fns=None):
    return RegressionFit(
        supply_region, price_region, supply_fn, dict(cost_fns or {}),
        diagnostics={"single_mean": float(mean), "single_sd": float(sd)},
    )


def white_copula(r, lags=(1,), coef=0.0):
    coefs = np.zeros((len(lags), r, r))
    coefs[0] = coef * np.eye(r)
    chol = np.sqrt(1 - coef**2) * np.eye(r) if len(lags) == 1 else np.eye(r)
    return CopulaModel(tuple(lags), coefs, chol)


def normal_transforms(fits, n=2000, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for f in fits:
        ref = NormalRef(f.alpha_bar, f.diagnostics["single_sd"])
        out.append(MarginalTransform.from_residuals(rng.normal(ref.mean, ref.sd, n), ref))
    return out


def toy_model(network, supply_region, curves, means, *, sd=0.1, copula=None, cost_fns=None, seed=0):
    """A SupplyRegionModel whose fit for price region j is curves[j](b) + cost_fns[j] + means[j] + noise."""
    fits = [
        single_fit(supply_region, reg, curves[k], means[k], sd, (cost_fns or {}).get(reg))
        for k, reg in enumerate(network.regions)
    ]
    copula = copula or white_copula(network.r)
    return SupplyRegionModel(supply_region, fits, copula, normal_transforms(fits, seed=seed))
