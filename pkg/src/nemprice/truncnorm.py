"""Zero-mean truncated normal mass and inverse-CDF draws, stable in both tails."""
from __future__ import annotations

import numpy as np
from scipy import special


def _log_diff(la: float, lb: float) -> float:
    """log(exp(lb) - exp(la)) for la <= lb."""
    if la == -np.inf:
        return lb
    return lb + np.log1p(-np.exp(la - lb))


def log_mass(lo: float, hi: float, sd: float, mean: float = 0.0) -> float:
    """log P(lo < X < hi) for X ~ N(mean, sd^2)."""
    if not hi > lo:
        return -np.inf
    a, b = (lo - mean) / sd, (hi - mean) / sd
    if b - a < 1e-7:
        mid = 0.5 * (a + b)
        return float(-0.5 * mid * mid - 0.5 * np.log(2 * np.pi) + np.log(b - a))
    if a >= 0:
        return float(_log_diff(special.log_ndtr(-b), special.log_ndtr(-a)))
    if b <= 0:
        return float(_log_diff(special.log_ndtr(a), special.log_ndtr(b)))
    return float(np.log(special.ndtr(b) - special.ndtr(a)))


def _left_draw(A: float, B: float, u: float) -> float:
    """Inverse-CDF draw on (A, B) with B <= 0, working with log CDF values."""
    lA, lB = special.log_ndtr(A), special.log_ndtr(B)
    r = np.exp(lA - lB)
    logp = lB + np.log(r + u * (1.0 - r))
    return float(special.ndtri_exp(logp))


def draw(lo: float, hi: float, sd: float, u: float, mean: float = 0.0) -> float:
    """Draw from N(mean, sd^2) truncated to (lo, hi) using the uniform `u`."""
    if not hi > lo:
        raise ValueError(f"empty truncation interval ({lo}, {hi})")
    a, b = (lo - mean) / sd, (hi - mean) / sd
    if b - a < 1e-7 * max(1.0, abs(a), abs(b)):
        x = a + u * (b - a)
    elif b <= 0:
        x = _left_draw(a, b, u)
    elif a >= 0:
        x = -_left_draw(-b, -a, 1.0 - u)
    else:
        pa, pb = special.ndtr(a), special.ndtr(b)
        x = float(special.ndtri(pa + u * (pb - pa)))
    x = min(max(x, a), b)
    return mean + sd * x
