"""Heteroscedasticity block: alpha coefficients, u augmentation, joint
Metropolis moves on (t, delta), the slab-variance rule, and response
reweighting that turns the dose-dependent noise into a homoscedastic one.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import t as student_t

from .stochastic import sample_mvn_canonical, sample_truncated_normal

__all__ = [
    "AlphaPrior",
    "VarActivityState",
    "update_alpha",
    "update_u",
    "update_t_delta",
    "compute_v_delta",
    "reweight_cell",
    "reweighted_products",
]

T_PROPOSAL_DF = 4


@dataclass
class AlphaPrior:
    mu_alpha: np.ndarray = None  # (2,)
    V_alpha: np.ndarray = None   # (2, 2) PD

    def __post_init__(self):
        if self.mu_alpha is None:
            self.mu_alpha = np.zeros(2)
        if self.V_alpha is None:
            self.V_alpha = np.eye(2)
        self.mu_alpha = np.asarray(self.mu_alpha, dtype=float)
        self.V_alpha = np.asarray(self.V_alpha, dtype=float)


@dataclass
class VarActivityState:
    alpha: np.ndarray    # (2,)
    U: np.ndarray        # (m, J)
    T: np.ndarray        # (m, J) in {0, 1}
    Delta: np.ndarray    # (m, J); exactly 0 where T == 0
    v_delta: float


def update_alpha(state, M, prior, rng, cell_mask=None):
    """Conjugate normal regression of u on [1, lambda_i' eta_j]."""
    if cell_mask is None:
        x = M.ravel()
        u = state.U.ravel()
    else:
        x = M[cell_mask]
        u = state.U[cell_mask]
    W = np.column_stack([np.ones_like(x), x])
    Vinv = np.linalg.inv(prior.V_alpha)
    prec = Vinv + W.T @ W
    b = Vinv @ prior.mu_alpha + W.T @ u
    state.alpha = sample_mvn_canonical(b, prec, rng)
    return state.alpha


def update_u(state, M, rng):
    """Probit augmentation for the variance indicators."""
    mean = state.alpha[0] + M * state.alpha[1]
    lower = np.where(state.T == 1, 0.0, -np.inf)
    upper = np.where(state.T == 1, np.inf, 0.0)
    state.U = sample_truncated_normal(mean, 1.0, lower, upper, rng)
    return state.U


def _loglik_delta(delta, resid2_over_s2, X, mask):
    """Heteroscedastic log-likelihood terms that depend on delta.

    resid2_over_s2: (..., K) squared residuals / sigma_j^2; X doses; mask
    marks real observations. Constant terms (log sigma) are omitted.
    """
    xd = X * delta[..., None]
    out = -0.5 * np.where(mask, xd + resid2_over_s2 * np.exp(-xd), 0.0)
    return out.sum(axis=-1)


def _log_slab(delta, v_delta):
    return -0.5 * (np.log(2.0 * np.pi * v_delta) + delta * delta / v_delta)


def _log_tprop(delta, scale):
    return student_t.logpdf(delta / scale, T_PROPOSAL_DF) - np.log(scale)


def update_t_delta(
    state,
    prior_prob,
    resid,
    X,
    mask,
    sigma2,
    rng,
    flip_fraction=0.1,
    prop_scale=0.2,
):
    """Metropolis sweep over the variance indicators and slopes.

    Per endpoint, a random subset of cells has its indicator flipped, with
    slope proposals from a Student-t(4) random walk (centered at 0 when
    entering the slab); remaining active cells get slope-only refreshes.
    Spike/slab dimension changes carry the proposal-density correction.
    Returns (accepted, proposed) move counts.
    """
    m, J = state.T.shape
    gen = rng.gen
    r2s2 = resid**2 / sigma2[None, :, None]
    logp = np.log(np.clip(prior_prob, 1e-300, 1.0))
    log1mp = np.log(np.clip(1.0 - prior_prob, 1e-300, 1.0))
    accepted = 0
    proposed = 0

    # indicator flips, one random subset per endpoint, per-cell acceptance
    max_flip = max(1, int(np.ceil(flip_fraction * m)))
    flip_mask = np.zeros((m, J), dtype=bool)
    for j in range(J):
        n_f = int(gen.integers(1, max_flip + 1))
        idx = gen.choice(m, size=n_f, replace=False)
        flip_mask[idx, j] = True

    fi, fj = np.nonzero(flip_mask)
    if fi.size:
        t_c = state.T[fi, fj]
        d_c = state.Delta[fi, fj]
        t_p = 1 - t_c
        d_p = np.where(t_p == 1, d_c + prop_scale * gen.standard_t(T_PROPOSAL_DF, fi.size), 0.0)
        ll = _loglik_delta(d_p, r2s2[fi, fj], X[fi, fj], mask[fi, fj]) - _loglik_delta(
            d_c, r2s2[fi, fj], X[fi, fj], mask[fi, fj]
        )
        pr = np.where(t_p == 1, logp[fi, fj], log1mp[fi, fj]) - np.where(
            t_c == 1, logp[fi, fj], log1mp[fi, fj]
        )
        slab = np.where(t_p == 1, _log_slab(d_p, state.v_delta), 0.0) - np.where(
            t_c == 1, _log_slab(d_c, state.v_delta), 0.0
        )
        # dimension-change correction: entering the slab divides by the
        # proposal density, leaving multiplies by it (reverse move's density)
        qcorr = np.where(t_p == 1, -_log_tprop(d_p, prop_scale), _log_tprop(d_c, prop_scale))
        logr = ll + pr + slab + qcorr
        acc = np.log(gen.uniform(size=fi.size)) < logr
        state.T[fi[acc], fj[acc]] = t_p[acc]
        state.Delta[fi[acc], fj[acc]] = d_p[acc]
        accepted += int(acc.sum())
        proposed += int(fi.size)

    # slope-only refresh for active cells not flipped this sweep
    ri, rj = np.nonzero((state.T == 1) & ~flip_mask)
    if ri.size:
        d_c = state.Delta[ri, rj]
        d_p = d_c + prop_scale * gen.standard_t(T_PROPOSAL_DF, ri.size)
        ll = _loglik_delta(d_p, r2s2[ri, rj], X[ri, rj], mask[ri, rj]) - _loglik_delta(
            d_c, r2s2[ri, rj], X[ri, rj], mask[ri, rj]
        )
        logr = ll + _log_slab(d_p, state.v_delta) - _log_slab(d_c, state.v_delta)
        acc = np.log(gen.uniform(size=ri.size)) < logr
        state.Delta[ri[acc], rj[acc]] = d_p[acc]
        accepted += int(acc.sum())
        proposed += int(ri.size)

    return accepted, proposed


def compute_v_delta(data):
    """Slab variance rule: square of the proxy-slope range over 4, floored
    at the sample variance of all responses.

    Each cell with at least two distinct replicated doses contributes a
    proxy slope from regressing 2*log(SD at dose) on dose.
    """
    proxies = []
    for cell in data.iter_observed():
        d = cell.doses()
        y = cell.responses()
        xs, ls = [], []
        for dv in np.unique(d):
            sel = d == dv
            if sel.sum() >= 2:
                sd = y[sel].std(ddof=1)
                if sd > 0:
                    xs.append(dv)
                    ls.append(2.0 * np.log(sd))
        if len(xs) >= 2:
            slope = np.polyfit(xs, ls, 1)[0]
            proxies.append(slope)
    all_y = data.all_responses()
    samp_var = float(all_y.var(ddof=1)) if all_y.size > 1 else 1.0
    if not proxies:
        warnings.warn(
            "no cell has replicated doses; falling back to the response sample variance"
        )
        return samp_var
    rng_prox = max(proxies) - min(proxies)
    return max(rng_prox**2 / 4.0, samp_var)


def reweight_cell(responses, basis, doses, delta):
    """Divide responses and basis rows by exp(x * delta / 2)."""
    w = np.exp(-np.asarray(doses) * delta / 2.0)
    return np.asarray(responses) * w, np.asarray(basis) * w[:, None]


def reweighted_products(design, Delta):
    """Batched weighted responses, basis, and Gram products for all cells."""
    w = np.where(design.obs_mask, np.exp(-design.X * Delta[..., None] / 2.0), 0.0)
    Ytil = design.Y * w
    Btil = design.B * w[..., None]
    XtX = np.einsum("ijkp,ijkq->ijpq", Btil, Btil)
    Xty = np.einsum("ijkp,ijk->ijp", Btil, Ytil)
    return Ytil, Btil, XtX, Xty
