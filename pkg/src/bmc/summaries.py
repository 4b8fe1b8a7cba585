"""Posterior products: activity probability matrices, rankings, curve
bands, predictive intervals, latent-structure summaries, CSV export.

All indicator combinations (union, cutoff-gated) are computed per draw
before averaging; gamma and t are dependent, so averaging marginals would
be wrong.
"""

import os
from dataclasses import dataclass

import numpy as np

from .spline_basis import evaluate_basis
from .stochastic import RngStream

__all__ = [
    "ActivitySummary",
    "activity_summary",
    "chemical_ranking",
    "endpoint_activation_list",
    "curve_bands",
    "chemical_correlation",
    "predict_cells",
    "posterior_mean_fit",
    "normalized_residuals",
    "write_summary_outputs",
]


@dataclass
class ActivitySummary:
    p_gamma: np.ndarray
    p_t: np.ndarray
    p_kappa: np.ndarray
    p_union: np.ndarray        # gamma OR t
    p_kappa_union: np.ndarray  # kappa OR t
    held_out: np.ndarray       # boolean (m, J)
    observed: np.ndarray       # boolean (m, J)

    def __post_init__(self):
        for a in (self.p_gamma, self.p_t, self.p_kappa, self.p_union, self.p_kappa_union):
            if np.any((a < 0) | (a > 1)):
                raise ValueError("probabilities must lie in [0, 1]")
        if np.any(self.p_kappa > self.p_gamma + 1e-12):
            raise ValueError("p_kappa must not exceed p_gamma")


def _grid_bases(design, n_grid):
    """Per-cell centered basis on an equispaced grid over the dose span."""
    m, J, p = design.m, design.J, design.p
    G = np.zeros((m, J, n_grid, p))
    grids = np.zeros((m, J, n_grid))
    for i in range(m):
        for j in range(J):
            kn = design.knots[i][j]
            if kn is None:
                continue
            g = np.linspace(kn.lo, kn.hi, n_grid)
            grids[i, j] = g
            G[i, j] = evaluate_basis(g, kn, design.col_means[i, j])
    return grids, G


def kappa_draws(chain, n_grid=101, chunk=50):
    """Per-draw cutoff-gated indicators, recomputed from the curve draws.

    Cutoffs default to 0 on the raw scale where none was supplied; they are
    rescaled to each cell's normalized scale.
    """
    design = chain.design
    S = chain.n_draws
    m, J = design.m, design.J
    cutoff_raw = np.where(np.isfinite(design.cutoffs), design.cutoffs, 0.0)
    cutoff_norm = cutoff_raw[None, :] / design.scale  # (m, J)
    _, G = _grid_bases(design, n_grid)
    kap = np.zeros((S, m, J), dtype=np.int8)
    for s0 in range(0, S, chunk):
        s1 = min(s0 + chunk, S)
        beta = chain.draws["Beta"][s0:s1]          # (c, m, J, p)
        curves = np.einsum("ijgp,cijp->cijg", G, beta)
        mx = curves.max(axis=-1)
        gam = chain.draws["Gamma"][s0:s1] == 1
        kap[s0:s1] = (gam & (mx > cutoff_norm[None])).astype(np.int8)
    return kap


def activity_summary(chain, n_grid=101):
    """Across-draw means of all activity indicators."""
    if chain.n_draws == 0:
        raise ValueError("empty chain")
    G = chain.draws["Gamma"] == 1
    T = chain.draws["T"] == 1
    K = kappa_draws(chain, n_grid=n_grid) == 1
    held = (
        chain.holdout_mask
        if chain.holdout_mask is not None
        else np.zeros(chain.design.observed.shape, dtype=bool)
    )
    return ActivitySummary(
        p_gamma=G.mean(axis=0),
        p_t=T.mean(axis=0),
        p_kappa=K.mean(axis=0),
        p_union=(G | T).mean(axis=0),
        p_kappa_union=(K | T).mean(axis=0),
        held_out=held,
        observed=chain.design.observed,
    )


def chemical_ranking(summary, include_predictions=False):
    """Chemicals sorted by mean cutoff-gated union probability, descending;
    ties broken by chemical index. Averages over observed endpoints unless
    include_predictions is set."""
    sel = np.ones_like(summary.observed) if include_predictions else summary.observed
    with np.errstate(invalid="ignore"):
        means = np.where(
            sel.any(axis=1),
            (summary.p_kappa_union * sel).sum(axis=1) / np.maximum(sel.sum(axis=1), 1),
            0.0,
        )
    order = np.lexsort((np.arange(len(means)), -means))
    return [(int(i), float(means[i])) for i in order]


def endpoint_activation_list(summary, top_chemicals, threshold=0.9):
    """Endpoints ranked by mean union probability over the given chemicals,
    keeping those above the threshold."""
    if len(top_chemicals) == 0:
        raise ValueError("top_chemicals must be nonempty")
    idx = np.asarray(sorted(top_chemicals))
    means = summary.p_union[idx].mean(axis=0)
    order = np.lexsort((np.arange(len(means)), -means))
    return [(int(j), float(means[j])) for j in order if means[j] > threshold]


def curve_bands(chain, i, j, grid=None, n_grid=101, raw_scale=True, noise_stream=17):
    """Mean fitted curve, 95% CI, and 95% posterior predictive band.

    The predictive band adds fresh heteroscedastic noise per draw. Output
    is on the raw response scale by default.
    """
    design = chain.design
    kn = design.knots[i][j]
    if kn is None:
        raise ValueError(f"cell ({i}, {j}) has no dose span (missing)")
    if grid is None:
        grid = np.linspace(kn.lo, kn.hi, n_grid)
    grid = np.asarray(grid, dtype=float)
    Gb = evaluate_basis(grid, kn, design.col_means[i, j])
    beta = chain.draws["Beta"][:, i, j, :]
    gam = chain.draws["Gamma"][:, i, j]
    curves = (beta @ Gb.T) * gam[:, None]  # (S, n_grid)
    delta = chain.draws["Delta"][:, i, j]
    sigma = np.sqrt(chain.draws["sigma2"][:, j])
    rng = RngStream(chain.config.seed, noise_stream).substream(i * design.J + j)
    eps = rng.gen.standard_normal(curves.shape)
    pred = curves + np.exp(grid[None, :] * delta[:, None] / 2.0) * sigma[:, None] * eps
    if raw_scale:
        loc, scale = design.loc[i, j], design.scale[i, j]
        curves = loc + scale * curves
        pred = loc + scale * pred
    return {
        "grid": grid,
        "mean": curves.mean(axis=0),
        "ci_lo": np.percentile(curves, 2.5, axis=0),
        "ci_hi": np.percentile(curves, 97.5, axis=0),
        "ppi_lo": np.percentile(pred, 2.5, axis=0),
        "ppi_hi": np.percentile(pred, 97.5, axis=0),
    }


def chemical_correlation(chain):
    """Across-draw mean of the chemical correlation implied by the loadings."""
    if "Lambda" not in chain.draws:
        raise ValueError("correlation summary requires a factor-variant chain")
    lam = chain.draws["Lambda"]  # (S, m, q)
    cov = np.einsum("siq,skq->sik", lam, lam)
    m = lam.shape[1]
    cov += np.eye(m)[None]
    sd = np.sqrt(np.diagonal(cov, axis1=-2, axis2=-1))
    corr = cov / (sd[:, :, None] * sd[:, None, :])
    return corr.mean(axis=0)


def predict_cells(chain, mask):
    """Posterior means of gamma, t, and their union at held-out cells."""
    mask = np.asarray(mask, dtype=bool)
    if np.any(mask & chain.design.observed):
        raise ValueError("mask includes cells that were observed during fitting")
    G = chain.draws["Gamma"] == 1
    T = chain.draws["T"] == 1
    out = {}
    for i, j in np.argwhere(mask):
        out[(int(i), int(j))] = {
            "p_gamma": float(G[:, i, j].mean()),
            "p_t": float(T[:, i, j].mean()),
            "p_union": float((G[:, i, j] | T[:, i, j]).mean()),
        }
    return out


def posterior_mean_fit(chain, raw_scale=True):
    """Across-draw mean of gamma * f at each observed dose, per cell."""
    design = chain.design
    beta = chain.draws["Beta"]          # (S, m, J, p)
    gam = chain.draws["Gamma"]          # (S, m, J)
    S = beta.shape[0]
    fit = np.zeros(design.Y.shape)
    chunk = max(1, 200_000_000 // max(design.Y.size * 8, 1))
    for s0 in range(0, S, chunk):
        s1 = min(s0 + chunk, S)
        f = np.einsum("ijkp,sijp->sijk", design.B, beta[s0:s1])
        fit += (f * gam[s0:s1, :, :, None]).sum(axis=0)
    fit /= S
    fit = np.where(design.obs_mask, fit, 0.0)
    if raw_scale:
        fit = np.where(
            design.obs_mask, design.loc[..., None] + design.scale[..., None] * fit, 0.0
        )
    return fit


def normalized_residuals(chain):
    """Posterior mean of (y - gamma f) / exp(x delta / 2) per observation."""
    design = chain.design
    beta = chain.draws["Beta"]
    gam = chain.draws["Gamma"]
    delta = chain.draws["Delta"]
    S = beta.shape[0]
    acc = np.zeros(design.Y.shape)
    for s in range(S):
        f = np.einsum("ijkp,ijp->ijk", design.B, beta[s])
        r = (design.Y - gam[s][:, :, None] * f) * np.exp(
            -design.X * delta[s][:, :, None] / 2.0
        )
        acc += r
    acc /= S
    return np.where(design.obs_mask, acc, 0.0)


def write_summary_outputs(chain, out_dir, cells=None, n_grid=101):
    """Write activity_probs.csv, rankings.csv, correlation.csv and per-cell
    curve files. `cells` optionally restricts curve export to (i, j) pairs."""
    os.makedirs(out_dir, exist_ok=True)
    design = chain.design
    summ = activity_summary(chain, n_grid=n_grid)
    with open(os.path.join(out_dir, "activity_probs.csv"), "w") as fh:
        fh.write("chemical,assay_endpoint,p_gamma,p_t,p_kappa,p_union,p_kappa_union,held_out\n")
        for i in range(design.m):
            for j in range(design.J):
                fh.write(
                    f"{design.chemical_names[i]},{design.endpoint_names[j]},"
                    f"{summ.p_gamma[i, j]:.6g},{summ.p_t[i, j]:.6g},"
                    f"{summ.p_kappa[i, j]:.6g},{summ.p_union[i, j]:.6g},"
                    f"{summ.p_kappa_union[i, j]:.6g},{int(summ.held_out[i, j])}\n"
                )
    with open(os.path.join(out_dir, "rankings.csv"), "w") as fh:
        fh.write("rank,chemical,mean_p_kappa_union\n")
        for r, (i, v) in enumerate(chemical_ranking(summ), start=1):
            fh.write(f"{r},{design.chemical_names[i]},{v:.6g}\n")
    if "Lambda" in chain.draws:
        corr = chemical_correlation(chain)
        with open(os.path.join(out_dir, "correlation.csv"), "w") as fh:
            fh.write("," + ",".join(design.chemical_names) + "\n")
            for i in range(design.m):
                fh.write(
                    design.chemical_names[i] + ","
                    + ",".join(f"{v:.6g}" for v in corr[i]) + "\n"
                )
    curve_dir = os.path.join(out_dir, "curves")
    os.makedirs(curve_dir, exist_ok=True)
    if cells is None:
        cells = [
            (i, j)
            for i in range(design.m)
            for j in range(design.J)
            if design.observed[i, j]
        ]
    for i, j in cells:
        bands = curve_bands(chain, i, j, n_grid=n_grid)
        name = f"{design.chemical_names[i]}__{design.endpoint_names[j]}.csv"
        with open(os.path.join(curve_dir, name), "w") as fh:
            fh.write("grid,mean,ci_lo,ci_hi,ppi_lo,ppi_hi\n")
            for k in range(len(bands["grid"])):
                fh.write(
                    ",".join(
                        f"{bands[c][k]:.8g}"
                        for c in ("grid", "mean", "ci_lo", "ci_hi", "ppi_lo", "ppi_hi")
                    )
                    + "\n"
                )
    return summ
