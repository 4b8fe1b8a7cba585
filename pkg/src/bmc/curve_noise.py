"""Spline-coefficient, endpoint-covariance and noise-variance updates,
plus fitted-curve evaluation and the cutoff-gated activity indicator.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .spline_basis import evaluate_basis
from .stochastic import sample_wishart

__all__ = [
    "CurveHyper",
    "CurveState",
    "update_beta_all",
    "update_sigma_endpoint",
    "update_noise_var",
    "fitted_curve",
    "kappa_indicator",
]


@dataclass
class CurveHyper:
    a: float          # Wishart degrees of freedom, default p + 2
    R: np.ndarray     # (p, p) PD scale
    nu0: float = 1.0
    sigma0_sq: float = 1.0

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        p = self.R.shape[0]
        if self.a <= p - 1:
            raise ValueError("Wishart df must exceed p - 1")


@dataclass
class CurveState:
    Beta: np.ndarray      # (m, J, p)
    SigmaJ: np.ndarray    # (J, p, p)
    sigma2: np.ndarray    # (J,)

    def sigma_inv_logdet(self):
        L = np.linalg.cholesky(self.SigmaJ)
        logdet = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=-1)
        inv = np.linalg.inv(self.SigmaJ)
        inv = 0.5 * (inv + np.swapaxes(inv, -1, -2))
        return inv, logdet


def update_beta_all(state, Gamma, XtX, Xty, Sigma_inv, rng):
    """Conditional normal draw of every cell's spline coefficients.

    Active cells (gamma = 1) use the weighted data likelihood; inactive
    cells are refreshed from their prior N(0, Sigma_j), which is their
    exact conditional since the likelihood does not involve them.
    """
    m, J, p = state.Beta.shape
    s2 = state.sigma2[None, :, None, None]
    A = XtX / s2 + Sigma_inv[None, :, :, :]
    L = np.linalg.cholesky(A)
    mean = np.linalg.solve(A, (Xty / state.sigma2[None, :, None])[..., None])[..., 0]
    z = rng.gen.standard_normal((m, J, p))
    draw = mean + np.linalg.solve(np.swapaxes(L, -1, -2), z[..., None])[..., 0]
    # prior refresh for inactive cells
    Lp = np.linalg.cholesky(state.SigmaJ)  # (J, p, p)
    zp = rng.gen.standard_normal((m, J, p))
    prior_draw = np.einsum("jpq,ijq->ijp", Lp, zp)
    g = (Gamma == 1)[..., None]
    state.Beta = np.where(g, draw, prior_draw)
    return state.Beta


def update_sigma_endpoint(state, j, hyper, contributing, rng):
    """Inverse-Wishart style update of one endpoint's coefficient covariance.

    contributing: boolean (m,) marking cells whose beta enters the sum.
    """
    B = state.Beta[contributing, j, :]
    S = hyper.R + B.T @ B
    df = hyper.a + int(contributing.sum())
    # the Wishart scale is S^{-1}; S can be ill-conditioned, so build a
    # factor M with M M^T = S^{-1} from S's Cholesky instead of inverting
    Ls = np.linalg.cholesky(S)
    M = solve_triangular(Ls, np.eye(S.shape[0]), lower=True).T
    prec = sample_wishart(df, M @ M.T, rng, scale_factor=M)
    state.SigmaJ[j] = np.linalg.inv(prec)
    state.SigmaJ[j] = 0.5 * (state.SigmaJ[j] + state.SigmaJ[j].T)
    return state.SigmaJ[j]


def update_noise_var(state, hyper, Gamma, Ytil, Btil, obs_mask, rng):
    """Conjugate gamma update of every endpoint's noise precision, using
    weighted residuals over that endpoint's observed cells."""
    fitted = np.einsum("ijkp,ijp->ijk", Btil, state.Beta)
    resid = np.where(obs_mask, Ytil - Gamma[..., None] * fitted, 0.0)
    sse = (resid**2).sum(axis=(0, 2))          # (J,)
    counts = obs_mask.sum(axis=(0, 2))         # (J,)
    shape = (hyper.nu0 + counts) / 2.0
    rate = (hyper.nu0 * hyper.sigma0_sq + sse) / 2.0
    prec = rng.gen.gamma(shape, 1.0 / rate)
    state.sigma2 = 1.0 / prec
    return state.sigma2


def fitted_curve(beta, grid, knots, column_means):
    """Centered-basis curve evaluation at the given dose grid."""
    return evaluate_basis(grid, knots, column_means) @ np.asarray(beta)


def kappa_indicator(gamma, beta, knots, column_means, cutoff, n_grid=101):
    """gamma gated by the fitted maximum exceeding the (normalized) cutoff."""
    if gamma == 0:
        return 0
    grid = np.linspace(knots.lo, knots.hi, n_grid)
    curve = fitted_curve(beta, grid, knots, column_means)
    return int(curve.max() > cutoff)
