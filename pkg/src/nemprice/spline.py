"""Quadratic regression splines with monotonicity constraints.

A function on the normalized domain is

    f(b) = beta_1 b + beta_2 b^2 + sum_k beta_{k+2} (b - knot_k)_+^2

and its derivative is piecewise linear with breakpoints at the knots, so it is
nonnegative on [0, 1] iff it is nonnegative at 0, at every included knot and
at 1.  Those checkpoint rows form the lower-triangular matrix ``L_J`` that
maps included coefficients ``beta_J`` to ``gamma_J = L_J beta_J >= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NumericalError, ValidationError
from .market import normalize_covariate

DEFAULT_KNOTS = 25


def basis_row(b: float, knots) -> np.ndarray:
    """(b, b^2, (b - k_1)_+^2, ..., (b - k_m)_+^2)."""
    return basis_matrix(np.atleast_1d(float(b)), knots)[0]


def basis_matrix(b, knots) -> np.ndarray:
    b = np.asarray(b, dtype=float)[:, None]
    knots = np.asarray(knots, dtype=float)[None, :]
    return np.hstack([b, b * b, np.maximum(b - knots, 0.0) ** 2])


def derivative_matrix(b, knots) -> np.ndarray:
    """Rows of d/db basis_matrix: (1, 2b, 2(b - k_1)_+, ...)."""
    b = np.asarray(b, dtype=float)[:, None]
    knots = np.asarray(knots, dtype=float)[None, :]
    return np.hstack([np.ones_like(b), 2.0 * b, 2.0 * np.maximum(b - knots, 0.0)])


def checkpoints(J, knots) -> np.ndarray:
    """Points where the derivative is constrained, one per included coefficient.

    The point 0 is skipped when the linear term is excluded (the derivative is
    identically zero there) and the first included knot is skipped when the
    quadratic term is excluded (the derivative is constant up to that knot).
    """
    J = np.asarray(J, dtype=bool)
    knots = np.asarray(knots, dtype=float)
    inc_knots = list(knots[J[2:]])
    pts = []
    if J[0]:
        pts.append(0.0)
    if not J[1] and inc_knots:
        inc_knots = inc_knots[1:]
    pts.extend(inc_knots)
    if J.any():
        pts.append(1.0)
    pts = np.array(pts, dtype=float)
    if len(pts) != J.sum():
        # linear term alone: derivative constant, 0 and 1 coincide
        pts = pts[: J.sum()]
    return pts


def build_LJ(J, knots) -> np.ndarray:
    """Lower-triangular constraint matrix over the included coefficients."""
    J = np.asarray(J, dtype=bool)
    d = int(J.sum())
    if d == 0:
        return np.zeros((0, 0))
    L = derivative_matrix(checkpoints(J, knots), knots)[:, J]
    if L.shape != (d, d) or np.any(np.abs(np.triu(L, 1)) > 1e-12) or np.any(np.diag(L) <= 0):
        raise NumericalError("constraint matrix is not lower triangular with positive diagonal")
    return np.tril(L)


def place_knots(x, m: int = DEFAULT_KNOTS) -> np.ndarray:
    """Knots at equally spaced quantiles of the normalized covariate values inside (0, 1).

    Falls back to equal spacing when the quantiles are not strictly increasing.
    """
    x = np.asarray(x, dtype=float)
    inside = x[(x > 0) & (x < 1)]
    equal = np.arange(1, m + 1) / (m + 1)
    if len(inside) < 2 * m:
        return equal
    q = np.quantile(inside, equal)
    if np.all(np.diff(q) > 1e-6) and q[0] > 1e-6 and q[-1] < 1 - 1e-6:
        return q
    return equal


@dataclass(frozen=True)
class SplineBasis:
    knots: np.ndarray

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        if k.ndim != 1 or (len(k) and (k[0] <= 0 or k[-1] >= 1 or np.any(np.diff(k) <= 0))):
            raise ValidationError("knots must be strictly increasing inside (0, 1)")
        k = k.copy()
        k.setflags(write=False)
        object.__setattr__(self, "knots", k)

    @property
    def m(self) -> int:
        return len(self.knots)

    @property
    def dim(self) -> int:
        return self.m + 2

    def matrix(self, b) -> np.ndarray:
        return basis_matrix(b, self.knots)


@dataclass(frozen=True, eq=False)
class MonotoneFunction:
    """A nondecreasing spline stored as inclusion vector ``J`` and ``gamma_J >= 0``.

    ``bounds`` maps raw covariate values to [0, 1]; ``shift`` (normalized units)
    gives the translated function ``b -> f(b + shift)``.  Outside [0, 1] the
    function continues linearly with its boundary derivative.
    """

    basis: SplineBasis
    J: np.ndarray
    gamma: np.ndarray
    bounds: tuple[float, float] = (0.0, 1.0)
    shift: float = 0.0

    def __post_init__(self):
        J = np.asarray(self.J, dtype=bool).copy()
        g = np.asarray(self.gamma, dtype=float).copy()
        if J.shape != (self.basis.dim,):
            raise ValidationError(f"J must have length {self.basis.dim}")
        if g.shape != (int(J.sum()),):
            raise ValidationError("gamma must have one entry per included coefficient")
        if np.any(g < 0):
            raise ValidationError("gamma must be nonnegative")
        J.setflags(write=False)
        g.setflags(write=False)
        object.__setattr__(self, "J", J)
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "bounds", (float(self.bounds[0]), float(self.bounds[1])))

    @classmethod
    def zero(cls, basis: SplineBasis, bounds=(0.0, 1.0)) -> "MonotoneFunction":
        return cls(basis, np.zeros(basis.dim, bool), np.zeros(0), bounds)

    @classmethod
    def from_beta(cls, basis: SplineBasis, beta, bounds=(0.0, 1.0), tol: float = 1e-9) -> "MonotoneFunction":
        """Re-express a full-length coefficient vector; tiny negative gammas are clipped."""
        beta = np.asarray(beta, dtype=float)
        J = beta != 0
        gamma = build_LJ(J, basis.knots) @ beta[J] if J.any() else np.zeros(0)
        scale = max(1.0, float(np.max(np.abs(gamma), initial=0.0)))
        if np.any(gamma < -tol * scale):
            raise ValidationError("coefficients do not define a monotone function")
        return cls(basis, J, np.maximum(gamma, 0.0), bounds)

    @cached_property
    def beta(self) -> np.ndarray:
        """Full-length beta (zeros where excluded); read-only."""
        out = np.zeros(self.basis.dim)
        if self.J.any():
            out[self.J] = solve_triangular(build_LJ(self.J, self.basis.knots), self.gamma, lower=True)
        out.setflags(write=False)
        return out

    def _raw_eval(self, b, beta) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        flat = b.ravel()
        inside = np.clip(flat, 0.0, 1.0)
        val = basis_matrix(inside, self.basis.knots) @ beta
        slope = derivative_matrix(inside, self.basis.knots) @ beta
        val = val + slope * (flat - inside)
        return val.reshape(b.shape)

    def eval(self, b) -> np.ndarray:
        """Evaluate at normalized covariate values."""
        return self._raw_eval(np.asarray(b, dtype=float) + self.shift, self.beta)

    def derivative(self, b) -> np.ndarray:
        b = np.clip(np.asarray(b, dtype=float) + self.shift, 0.0, 1.0)
        return (derivative_matrix(b.ravel(), self.basis.knots) @ self.beta).reshape(b.shape)

    def normalize(self, x) -> np.ndarray:
        return normalize_covariate(x, self.bounds)

    def __call__(self, x) -> np.ndarray:
        """Evaluate at raw covariate values (e.g. MWh)."""
        return self.eval(self.normalize(x))

    def shifted(self, delta_raw: float) -> "MonotoneFunction":
        """x -> f(x + delta_raw), with delta in raw covariate units."""
        lo, hi = self.bounds
        return MonotoneFunction(self.basis, self.J, self.gamma, self.bounds, self.shift + delta_raw / (hi - lo))

    def to_dict(self) -> dict:
        return {
            "knots": self.basis.knots.tolist(),
            "J": self.J.astype(int).tolist(),
            "gamma": self.gamma.tolist(),
            "bounds": list(self.bounds),
            "shift": self.shift,
        }

    @classmethod
    def from_dict(cls, d) -> "MonotoneFunction":
        return cls(
            SplineBasis(np.asarray(d["knots"], dtype=float)),
            np.asarray(d["J"], dtype=bool),
            np.asarray(d["gamma"], dtype=float),
            tuple(d.get("bounds", (0.0, 1.0))),
            float(d.get("shift", 0.0)),
        )
