"""Latent-factor probit block for the mean-effect indicators.

Holds loadings, factors, the global intercept, the probit augmentation
variables, the indicators themselves (updated with spline coefficients
integrated out), and the multiplicative-gamma shrinkage locals.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtr

from .stochastic import sample_truncated_normal

__all__ = [
    "MeanActivityHyper",
    "MeanActivityState",
    "update_z",
    "update_xi",
    "update_lambda",
    "update_eta",
    "update_mgp",
    "update_gamma_collapsed",
    "gamma_log_posterior_odds",
    "activity_probability",
]


@dataclass
class MeanActivityHyper:
    q: int = 5
    nu: float = 3.0
    a1: float = 2.1
    a2: float = 3.1
    mu_xi: float = 0.0
    var_xi: float = 1.0


@dataclass
class MeanActivityState:
    Lambda: np.ndarray   # (m, q)
    Eta: np.ndarray      # (J, q)
    xi: float
    Z: np.ndarray        # (m, J)
    Gamma: np.ndarray    # (m, J) in {0, 1}
    phi: np.ndarray      # (m, q) local precisions
    zeta: np.ndarray     # (q,) multiplicative increments
    tau: np.ndarray = None  # (q,) cumulative products

    def __post_init__(self):
        if self.tau is None:
            self.tau = np.cumprod(self.zeta)

    @property
    def linpred(self):
        return self.xi + self.Lambda @ self.Eta.T


def activity_probability(state):
    """Entrywise Phi(xi + lambda_i' eta_j)."""
    return ndtr(state.linpred)


def update_z(state, rng):
    """Probit augmentation draw; sign tied to the current indicators."""
    mean = state.linpred
    lower = np.where(state.Gamma == 1, 0.0, -np.inf)
    upper = np.where(state.Gamma == 1, np.inf, 0.0)
    state.Z = sample_truncated_normal(mean, 1.0, lower, upper, rng)
    return state.Z


def update_xi(state, hyper, rng, cell_mask=None):
    """Conjugate normal update of the global intercept.

    cell_mask selects which cells' z contribute (None = all cells).
    """
    resid = state.Z - state.Lambda @ state.Eta.T
    if cell_mask is not None:
        n = int(cell_mask.sum())
        s = float(resid[cell_mask].sum())
    else:
        n = resid.size
        s = float(resid.sum())
    prec = 1.0 / hyper.var_xi + n
    mean = (hyper.mu_xi / hyper.var_xi + s) / prec
    state.xi = float(mean + rng.gen.standard_normal() / np.sqrt(prec))
    return state.xi


def _batch_draw_mvn(A, b, rng):
    """Draws from N(A^{-1} b, A^{-1}) for stacked PD matrices A."""
    L = np.linalg.cholesky(A)
    mean = np.linalg.solve(A, b[..., None])[..., 0]
    z = rng.gen.standard_normal(b.shape)
    corr = np.linalg.solve(np.swapaxes(L, -1, -2), z[..., None])[..., 0]
    return mean + corr


def update_lambda(state, alpha, U, rng, cell_mask=None):
    """Row-wise conjugate update of the loading matrix.

    Regression information comes from both z (mean block) and u (variance
    block, through alpha). cell_mask restricts the contributing cells.
    """
    m, q = state.Lambda.shape
    a0, a1 = alpha
    Eta = state.Eta
    ztil = state.Z - state.xi
    ures = U - a0
    D = state.phi * state.tau  # (m, q) prior precisions
    if cell_mask is None:
        G = (1.0 + a1 * a1) * (Eta.T @ Eta)  # shared Gram
        A = G[None, :, :] + np.einsum("iq,qr->iqr", D, np.eye(q))
        b = ztil @ Eta + a1 * (ures @ Eta)
    else:
        W = cell_mask.astype(float)  # (m, J)
        A = (1.0 + a1 * a1) * np.einsum("ij,jq,jr->iqr", W, Eta, Eta)
        A += np.einsum("iq,qr->iqr", D, np.eye(q))
        b = (ztil * W) @ Eta + a1 * ((ures * W) @ Eta)
    state.Lambda = _batch_draw_mvn(A, b, rng)
    return state.Lambda


def update_eta(state, alpha, U, rng, cell_mask=None):
    """Column-wise conjugate update of the factor matrix."""
    J, q = state.Eta.shape
    a0, a1 = alpha
    Lam = state.Lambda
    ztil = state.Z - state.xi
    ures = U - a0
    if cell_mask is None:
        A0 = np.eye(q) + (1.0 + a1 * a1) * (Lam.T @ Lam)
        b = ztil.T @ Lam + a1 * (ures.T @ Lam)
        A = np.broadcast_to(A0, (J, q, q))
    else:
        W = cell_mask.astype(float)
        A = (1.0 + a1 * a1) * np.einsum("ij,iq,ir->jqr", W, Lam, Lam)
        A += np.eye(q)[None, :, :]
        b = (ztil * W).T @ Lam + a1 * ((ures * W).T @ Lam)
    state.Eta = _batch_draw_mvn(np.ascontiguousarray(A), b, rng)
    return state.Eta


def update_mgp(state, hyper, rng):
    """Conjugate updates of the shrinkage locals phi, zeta and tau."""
    m, q = state.Lambda.shape
    lam2 = state.Lambda**2
    nu = hyper.nu
    gen = rng.gen
    state.phi = gen.gamma(
        (nu + 1.0) / 2.0, 2.0 / (nu + state.tau[None, :] * lam2)
    )
    # sum over chemicals of phi * lambda^2 per column
    s = (state.phi * lam2).sum(axis=0)  # (q,)
    zeta = state.zeta.copy()
    for h in range(q):
        tau_wo = np.cumprod(np.where(np.arange(q) == h, 1.0, zeta))
        rate = 1.0 + 0.5 * float((tau_wo[h:] * s[h:]).sum())
        if h == 0:
            shape = hyper.a1 + m * q / 2.0
        else:
            shape = hyper.a2 + m * (q - h) / 2.0
        zeta[h] = gen.gamma(shape, 1.0 / rate)
    state.zeta = zeta
    state.tau = np.cumprod(zeta)
    return state.phi, state.zeta, state.tau


def gamma_log_posterior_odds(pi, XtX, Xty, Sigma_inv, Sigma_logdet, sigma2):
    """log r1 - log r0 of the collapsed indicator update, batched.

    XtX, Xty are built from the reweighted design; missing cells carry
    zeros and reduce exactly to the prior odds.
    """
    m, J, p, _ = XtX.shape
    s2 = sigma2[None, :, None, None]
    A = XtX / s2 + Sigma_inv[None, :, :, :]
    L = np.linalg.cholesky(A)
    logdetA = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=-1)
    w = np.linalg.solve(L, Xty[..., None])[..., 0]
    quad = (w * w).sum(axis=-1)
    s2m = sigma2[None, :]
    like = -0.5 * (logdetA + Sigma_logdet[None, :]) + quad / (2.0 * s2m * s2m)
    with np.errstate(divide="ignore"):
        prior = np.log(pi) - np.log1p(-pi)
    return prior + like


def update_gamma_collapsed(state, pi, XtX, Xty, Sigma_inv, Sigma_logdet, sigma2, rng):
    """Bernoulli draw of every indicator with spline coefficients
    marginalised out; log-domain throughout."""
    odds = gamma_log_posterior_odds(pi, XtX, Xty, Sigma_inv, Sigma_logdet, sigma2)
    prob = expit(odds)
    prob = np.where(pi <= 0.0, 0.0, prob)
    prob = np.where(pi >= 1.0, 1.0, prob)
    state.Gamma = (rng.gen.uniform(size=prob.shape) < prob).astype(np.int8)
    return state.Gamma
