"""Simulation generators with known truth, plus evaluation metrics.

Four scenarios: (1) the model itself generates the data at screening-like
scale; (2) a zero-inflated log-logistic alternative; (3) a multiplicity
design with fixed positives and growing endpoint count; (4) high- vs
weak-correlation chemical structure under varying missingness.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .data_model import CellData, Dataset, Observation, split_holdout
from .spline_basis import basis_matrix, knots_from_doses

__all__ = [
    "DOSES8",
    "SimulationTruth",
    "generate_sim1",
    "generate_sim2_zipll",
    "generate_sim3_multiplicity",
    "generate_sim4",
    "auc",
    "rmse",
    "false_positives",
    "write_truth",
    "read_truth",
    "true_mean_at_observations",
]

# the eight log10-dose values shared by all scenarios
DOSES8 = (0.301, 0.477, 0.602, 0.845, 1.000, 1.301, 1.602, 2.000)


@dataclass
class SimulationTruth:
    gamma_true: np.ndarray     # (m, J) binary
    t_true: np.ndarray         # (m, J) binary
    delta_true: np.ndarray     # (m, J); 0 where t_true = 0
    curve_coefs: np.ndarray    # (m, J, p) uncentered basis coefficients
    doses: np.ndarray          # unique dose grid used for generation
    sigma_j_true: np.ndarray   # (J,)
    lambda_true: np.ndarray = None
    eta_true: np.ndarray = None
    xi_true: float = 0.0
    alpha_true: tuple = (0.0, 0.0)
    meta: dict = field(default_factory=dict)

    def curve_values(self, i, j, grid):
        kn = knots_from_doses(self.doses)
        B = basis_matrix(np.asarray(grid), kn).values
        return B @ self.curve_coefs[i, j]

    def mean_value(self, i, j, grid):
        return self.gamma_true[i, j] * self.curve_values(i, j, grid)


def _mgp_loadings(m, q, nu, a1, a2, gen):
    phi = gen.gamma(nu / 2.0, 2.0 / nu, size=(m, q))
    zeta = np.concatenate(
        [gen.gamma(a1, 1.0, size=1), gen.gamma(a2, 1.0, size=max(q - 1, 0))]
    )
    tau = np.cumprod(zeta)
    return gen.standard_normal((m, q)) / np.sqrt(phi * tau[None, :])


def _random_curve(gen, kn, family=None):
    """Random spline coefficients in one of three shape families."""
    p = kn.p
    if family is None:
        family = gen.choice(["rise_fall", "increasing", "decreasing"])
    amp = gen.uniform(1.0, 3.0)
    if family == "rise_fall":
        template = np.array([0.0, 0.3, 0.8, 1.0, 0.8, 0.1, -0.5])[:p]
        coefs = amp * (template + 0.1 * gen.standard_normal(p))
    else:
        steps = np.abs(gen.standard_normal(p)) + 0.2
        ramp = np.cumsum(steps)
        ramp = (ramp - ramp[0]) / (ramp[-1] - ramp[0])  # 0 .. 1
        coefs = amp * ramp
        if family == "decreasing":
            coefs = -coefs + amp  # start high, end low
        coefs = coefs - coefs.mean()
    return coefs


def _build_dataset(Y, X, names=None):
    """Y, X: (m, J, K) with nan marking absent observations."""
    m, J, _ = Y.shape
    chems = tuple(f"chem{i:03d}" for i in range(m)) if names is None else names[0]
    eps = tuple(f"ep{j:03d}" for j in range(J)) if names is None else names[1]
    cells = []
    for i in range(m):
        row = []
        for j in range(J):
            sel = np.isfinite(Y[i, j])
            obs = tuple(
                Observation(float(X[i, j, k]), float(Y[i, j, k]))
                for k in np.nonzero(sel)[0]
            )
            row.append(CellData(i, j, obs))
        cells.append(tuple(row))
    return Dataset(m, J, tuple(cells), chems, eps)


def _generate_from_model(
    m, J, reps, gen, q_true, nu, xi_true, alpha_true, delta_mean, delta_sd,
    a1=2.1, a2=3.1, gamma_override=None, t_override=None,
):
    doses = np.array(DOSES8)
    K = reps * len(doses)
    x = np.tile(doses, reps)
    Eta = gen.standard_normal((J, q_true))
    Lambda = _mgp_loadings(m, q_true, nu, a1, a2, gen)
    M = Lambda @ Eta.T
    if gamma_override is None:
        gamma = (gen.uniform(size=(m, J)) < ndtr(xi_true + M)).astype(int)
    else:
        gamma = gamma_override
    if t_override is None:
        t = (gen.uniform(size=(m, J)) < ndtr(alpha_true[0] + M * alpha_true[1])).astype(int)
    else:
        t = t_override
    delta = np.where(t == 1, gen.normal(delta_mean, delta_sd, size=(m, J)), 0.0)
    sigma2 = 1.0 / gen.gamma(5.0 / 2.0, 2.0 / 0.5, size=J)
    kn = knots_from_doses(doses)
    B = basis_matrix(x, kn).values  # (K, p)
    coefs = np.zeros((m, J, kn.p))
    Y = np.empty((m, J, K))
    for i in range(m):
        for j in range(J):
            if gamma[i, j]:
                coefs[i, j] = _random_curve(gen, kn)
            f = B @ coefs[i, j] if gamma[i, j] else np.zeros(K)
            sd = np.exp(x * delta[i, j] / 2.0) * np.sqrt(sigma2[j])
            Y[i, j] = f + sd * gen.standard_normal(K)
    data = _build_dataset(Y, np.broadcast_to(x, Y.shape))
    truth = SimulationTruth(
        gamma_true=gamma, t_true=t, delta_true=delta, curve_coefs=coefs,
        doses=doses, sigma_j_true=sigma2, lambda_true=Lambda, eta_true=Eta,
        xi_true=xi_true, alpha_true=tuple(alpha_true),
    )
    return data, truth


def generate_sim1(m=30, J=150, reps=3, holdout_fraction=0.05, rng=None):
    """Model-generated data: 2 true factors, heteroscedasticity tied to the
    mean effect, random hold-out cells."""
    gen = rng.gen
    data, truth = _generate_from_model(
        m, J, reps, gen, q_true=2, nu=3.0, xi_true=0.0,
        alpha_true=(-0.1, 1.2), delta_mean=1.5, delta_sd=0.1,
    )
    seed = int(gen.integers(2**62))
    fit_data, mask = split_holdout(data, holdout_fraction, seed)
    truth.meta["holdout_fraction"] = holdout_fraction
    return data, fit_data, mask, truth


def generate_sim2_zipll(m=15, J=15, rng=None, holdout_fraction=0.10):
    """Zero-inflated log-logistic generator: monotone nondecreasing curves,
    homoscedastic noise, one observation per dose."""
    gen = rng.gen
    doses = np.array(DOSES8)
    K = len(doses)
    gamma = (gen.uniform(size=(m, J)) < 0.5).astype(int)
    top = gen.uniform(0.0, 10.0, size=(m, J))
    w = gen.uniform(1.0, 8.0, size=(m, J))
    a = doses.max()
    Y = np.empty((m, J, K))
    fvals = np.zeros((m, J, K))
    for i in range(m):
        for j in range(J):
            if gamma[i, j]:
                f = top[i, j] - top[i, j] / (
                    1.0 + np.exp(w[i, j] * (np.log(doses) - np.log(a)))
                )
                fvals[i, j] = f
            Y[i, j] = fvals[i, j] + 0.1 * gen.standard_normal(K)
    data = _build_dataset(Y, np.broadcast_to(doses, Y.shape))
    seed = int(gen.integers(2**62))
    fit_data, mask = split_holdout(data, holdout_fraction, seed)
    truth = SimulationTruth(
        gamma_true=gamma, t_true=np.zeros((m, J), dtype=int),
        delta_true=np.zeros((m, J)), curve_coefs=np.zeros((m, J, 7)),
        doses=doses, sigma_j_true=np.full(J, 0.01),
        meta={"zipll_top": top.tolist(), "zipll_w": w.tolist(), "zipll_a": float(a),
              "holdout_fraction": holdout_fraction},
    )
    truth.meta["fvals"] = fvals.tolist()
    return data, fit_data, mask, truth


def zipll_mean_at(truth, i, j, grid):
    top = truth.meta["zipll_top"][i][j]
    w = truth.meta["zipll_w"][i][j]
    a = truth.meta["zipll_a"]
    grid = np.asarray(grid, dtype=float)
    f = top - top / (1.0 + np.exp(w * (np.log(grid) - np.log(a))))
    return truth.gamma_true[i][j] * f


def generate_sim3_multiplicity(J, rng=None, n_gamma=20, n_t=18, reps=5):
    """Multiplicity design: m = 5, exactly n_gamma active cells and n_t
    heteroscedastic cells, fixed in the initial 5 x 5 block as J grows."""
    m = 5
    if J < 5:
        raise ValueError("J must be at least 5")
    if n_gamma > m * 5:
        raise ValueError("cannot place fixed positives in the initial block")
    gen = rng.gen
    gamma = np.zeros((m, J), dtype=int)
    t = np.zeros((m, J), dtype=int)
    # row-major placement inside the first 5 columns
    pos = [(k // 5, k % 5) for k in range(n_gamma)]
    for i, j in pos:
        gamma[i, j] = 1
    for i, j in pos[:n_t]:
        t[i, j] = 1
    data, truth = _generate_from_model(
        m, J, reps, gen, q_true=5, nu=3.0, xi_true=0.8,
        alpha_true=(0.3, 1.0), delta_mean=1.0, delta_sd=0.1,
        gamma_override=gamma, t_override=t,
    )
    return data, truth


def generate_sim4(regime, missing_fraction, rng=None, m=30, J=10, reps=5):
    """Correlation-structure design: high_corr (1 strong factor) vs
    weak_corr (10 diffuse factors), with cells masked at missing_fraction."""
    if regime not in ("high_corr", "weak_corr"):
        raise ValueError("regime must be 'high_corr' or 'weak_corr'")
    gen = rng.gen
    q_true, nu = (1, 0.1) if regime == "high_corr" else (10, 0.3)
    data, truth = _generate_from_model(
        m, J, reps, gen, q_true=q_true, nu=nu, xi_true=0.8,
        alpha_true=(0.3, 1.0), delta_mean=1.0, delta_sd=0.1,
    )
    seed = int(gen.integers(2**62))
    fit_data, mask = split_holdout(data, missing_fraction, seed)
    truth.meta["regime"] = regime
    truth.meta["missing_fraction"] = missing_fraction
    return data, fit_data, mask, truth


# --- metrics --------------------------------------------------------------


def auc(scores, labels):
    """Rank-based (Mann-Whitney) AUC with ties counted 1/2."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    n1 = int(labels.sum())
    n0 = len(labels) - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC undefined: both classes must be present")
    from scipy.stats import rankdata

    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def rmse(fitted, truth):
    fitted = np.asarray(fitted, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if fitted.shape != truth.shape:
        raise ValueError("length mismatch")
    return float(np.sqrt(np.mean((fitted - truth) ** 2)))


def false_positives(probabilities, truth, cutoff=0.5):
    probabilities = np.asarray(probabilities, dtype=float)
    truth = np.asarray(truth).astype(int)
    if probabilities.shape != truth.shape:
        raise ValueError("shape mismatch")
    return int(np.sum((probabilities > cutoff) & (truth == 0)))


def true_mean_at_observations(data, truth):
    """True mean response at every observed (cell, dose) point, matching the
    layout of the observed Dataset. Returns (values list, cell index list)."""
    vals, idx = [], []
    for cell in data.iter_observed():
        i, j = cell.chemical_index, cell.endpoint_index
        if truth.meta.get("zipll_a") is not None:
            mv = zipll_mean_at(truth, i, j, cell.doses())
        else:
            mv = truth.mean_value(i, j, cell.doses())
        vals.extend(np.atleast_1d(mv).tolist())
        idx.extend([(i, j)] * cell.k)
    return np.array(vals), idx


def write_truth(truth, path):
    payload = {
        "gamma_true": truth.gamma_true.tolist(),
        "t_true": truth.t_true.tolist(),
        "delta_true": truth.delta_true.tolist(),
        "curve_coefs": truth.curve_coefs.tolist(),
        "doses": truth.doses.tolist(),
        "sigma_j_true": truth.sigma_j_true.tolist(),
        "xi_true": truth.xi_true,
        "alpha_true": list(truth.alpha_true),
        "meta": truth.meta,
    }
    if truth.lambda_true is not None:
        payload["lambda_true"] = truth.lambda_true.tolist()
        payload["eta_true"] = truth.eta_true.tolist()
    with open(path, "w") as fh:
        json.dump(payload, fh)


def read_truth(path):
    with open(path) as fh:
        d = json.load(fh)
    return SimulationTruth(
        gamma_true=np.array(d["gamma_true"]),
        t_true=np.array(d["t_true"]),
        delta_true=np.array(d["delta_true"]),
        curve_coefs=np.array(d["curve_coefs"]),
        doses=np.array(d["doses"]),
        sigma_j_true=np.array(d["sigma_j_true"]),
        lambda_true=np.array(d["lambda_true"]) if "lambda_true" in d else None,
        eta_true=np.array(d["eta_true"]) if "eta_true" in d else None,
        xi_true=d["xi_true"],
        alpha_true=tuple(d["alpha_true"]),
        meta=d.get("meta", {}),
    )
