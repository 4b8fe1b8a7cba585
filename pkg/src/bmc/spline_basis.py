"""Cubic B-spline design matrices on the log10-dose scale.

Knots are the five-number summary (min, Q1, median, Q3, max) of the dose
set, giving 3 interior knots and hence p = 7 basis columns at cubic order.
Columns are centered per cell to exclude the intercept direction.
"""

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

__all__ = [
    "KnotVector",
    "BasisMatrix",
    "knots_from_doses",
    "basis_matrix",
    "center_columns",
    "ols_coefficients",
    "empirical_R",
    "P_BASIS",
]

ORDER = 4  # cubic
P_BASIS = 3 + ORDER  # 3 interior knots


class DegenerateDesignError(ValueError):
    pass


class ExtrapolationError(ValueError):
    pass


@dataclass(frozen=True)
class KnotVector:
    boundary_and_interior: tuple  # nondecreasing, >= 2 distinct values

    def __post_init__(self):
        k = self.boundary_and_interior
        if len(set(k)) < 2:
            raise DegenerateDesignError("need at least 2 distinct knot values")
        if any(k[i] > k[i + 1] for i in range(len(k) - 1)):
            raise ValueError("knots must be nondecreasing")

    @property
    def lo(self):
        return self.boundary_and_interior[0]

    @property
    def hi(self):
        return self.boundary_and_interior[-1]

    @property
    def interior(self):
        return self.boundary_and_interior[1:-1]

    @property
    def p(self):
        return len(self.interior) + ORDER


@dataclass(frozen=True)
class BasisMatrix:
    values: np.ndarray  # (K, p)
    knots: KnotVector
    centered: bool = False
    column_means: np.ndarray = None  # set when centered

    @property
    def p(self):
        return self.values.shape[1]


def knots_from_doses(doses):
    """Five-number summary knots: min, quartiles (linear interpolation), max."""
    doses = np.asarray(doses, dtype=float)
    if len(np.unique(doses)) < 2:
        raise DegenerateDesignError("need at least 2 distinct dose values")
    qs = np.quantile(doses, [0.0, 0.25, 0.5, 0.75, 1.0])  # type-7 default
    # collapse duplicates while keeping order
    uniq = [qs[0]]
    for v in qs[1:]:
        if v > uniq[-1]:
            uniq.append(v)
    return KnotVector(tuple(float(v) for v in uniq))


def _full_knots(knots):
    k = np.asarray(knots.boundary_and_interior)
    return np.concatenate([np.repeat(k[0], ORDER), k[1:-1], np.repeat(k[-1], ORDER)])


def basis_matrix(doses, knots):
    """Uncentered cubic B-spline basis; rows sum to 1 on the knot span."""
    doses = np.asarray(doses, dtype=float)
    if doses.size and (doses.min() < knots.lo or doses.max() > knots.hi):
        raise ExtrapolationError(
            f"dose outside knot span [{knots.lo}, {knots.hi}]"
        )
    t = _full_knots(knots)
    X = BSpline.design_matrix(doses, t, ORDER - 1, extrapolate=False).toarray()
    return BasisMatrix(X, knots, centered=False)


def center_columns(basis):
    """Subtract each column's mean; removes the intercept direction."""
    if basis.centered:
        raise ValueError("basis already centered")
    mu = basis.values.mean(axis=0) if basis.values.shape[0] else np.zeros(basis.p)
    return BasisMatrix(basis.values - mu, basis.knots, centered=True, column_means=mu)


def evaluate_basis(grid, knots, column_means):
    """Basis rows at new points minus the cell's stored column means."""
    raw = basis_matrix(np.asarray(grid, dtype=float), knots).values
    return raw - column_means


def ols_coefficients(responses, basis, ridge=1e-6):
    """Minimum-norm least squares of basis @ beta ~ responses.

    Falls back to a small ridge penalty when the normal matrix is singular.
    """
    y = np.asarray(responses, dtype=float)
    if y.size == 0:
        raise ValueError("empty cell: no responses to fit")
    X = basis.values
    beta, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if not np.all(np.isfinite(beta)) or rank < min(X.shape):
        A = X.T @ X + ridge * np.eye(X.shape[1])
        beta = np.linalg.solve(A, X.T @ y)
    return beta


def empirical_R(data, basis_for_cell):
    """Sample covariance of per-cell OLS coefficients across observed cells.

    basis_for_cell(i, j) must return the (centered) BasisMatrix used for
    cell (i, j). Result is symmetrized and ridged to positive definiteness.
    """
    coefs = []
    for cell in data.iter_observed():
        basis = basis_for_cell(cell.chemical_index, cell.endpoint_index)
        coefs.append(ols_coefficients(cell.responses(), basis))
    if len(coefs) < 2:
        raise ValueError("need at least 2 observed cells for empirical covariance")
    C = np.array(coefs)
    R = np.cov(C, rowvar=False, ddof=1)
    R = 0.5 * (R + R.T)
    # column-centered partition-of-unity bases make OLS coefficients sum to
    # a constant, so R is rank-deficient by construction; floor the spectrum
    # to keep downstream Cholesky/Wishart updates well conditioned
    w = np.linalg.eigvalsh(R)
    floor = 1e-6 * max(w[-1], 1e-12)
    if w[0] < floor:
        R = R + (floor - w[0]) * np.eye(R.shape[0])
    return R
