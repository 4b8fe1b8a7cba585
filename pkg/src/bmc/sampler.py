"""Partially collapsed Gibbs sampler: sweep orchestration, chain schedule,
initialization, prior variants, and draw persistence.
"""

import json
import os
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from ._design import Design, build_design
from .curve_noise import CurveHyper, CurveState, update_beta_all, update_noise_var, update_sigma_endpoint
from .data_model import normalize_cells
from .mean_activity import (
    MeanActivityHyper,
    MeanActivityState,
    activity_probability,
    update_eta,
    update_gamma_collapsed,
    update_lambda,
    update_mgp,
    update_xi,
    update_z,
)
from .stochastic import RngStream
from .variance_activity import (
    AlphaPrior,
    VarActivityState,
    compute_v_delta,
    reweighted_products,
    update_alpha,
    update_t_delta,
    update_u,
)

__all__ = ["Config", "SamplerState", "ChainOutput", "ChainAbort", "init_state", "run_chain", "load_chain"]

VARIANTS = ("factor", "bmc0", "bmc_i", "bmc_j")


class ChainAbort(RuntimeError):
    pass


@dataclass
class Config:
    q: int = 5
    nu: float = 3.0
    a1: float = 2.1
    a2: float = 3.1
    mu_xi: float = 0.0
    var_xi: float = 1.0
    mu_alpha: tuple = (0.0, 0.0)
    V_alpha: tuple = ((1.0, 0.0), (0.0, 1.0))
    wishart_df: float = None       # default p + 2
    R_matrix: tuple = None         # default: empirical OLS covariance
    nu0: float = 1.0
    sigma0_sq: float = None        # default: response sample variance
    v_delta: float = None          # default: range rule from the data
    flip_fraction: float = 0.1
    prop_scale: float = 0.2
    iterations: int = 6000
    burnin: int = 3000
    thin: int = 5
    prior_variant: str = "factor"
    latent_cells: str = "all"      # or "observed"
    seed: int = 0
    sigma_count_mode: str = "observed"  # cells counted in the Sigma_j update

    def __post_init__(self):
        if not 0 <= self.burnin < self.iterations:
            raise ValueError("burnin must lie in [0, iterations)")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.q < 1:
            raise ValueError("q must be >= 1")
        if self.prior_variant not in VARIANTS:
            raise ValueError(f"prior_variant must be one of {VARIANTS}")
        if self.latent_cells not in ("all", "observed"):
            raise ValueError("latent_cells must be 'all' or 'observed'")

    def to_dict(self):
        d = dict(self.__dict__)
        for k in ("mu_alpha", "V_alpha", "R_matrix"):
            if d[k] is not None:
                d[k] = np.asarray(d[k]).tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @property
    def n_saved(self):
        return (self.iterations - self.burnin) // self.thin


@dataclass
class SamplerState:
    mean: MeanActivityState
    var: VarActivityState
    curve: CurveState
    # flat-prior variant parameters (unused under the factor variant)
    pi0: float = 0.5
    pi_i: np.ndarray = None
    pi_j: np.ndarray = None
    pi_t: float = 0.5


@dataclass
class ChainOutput:
    draws: dict
    config: Config
    design: Design
    acceptance: dict
    holdout_mask: np.ndarray = None

    @property
    def n_draws(self):
        return self.draws["xi"].shape[0]


def _hypers(design, config):
    mean_h = MeanActivityHyper(
        q=config.q, nu=config.nu, a1=config.a1, a2=config.a2,
        mu_xi=config.mu_xi, var_xi=config.var_xi,
    )
    alpha_h = AlphaPrior(np.asarray(config.mu_alpha, float), np.asarray(config.V_alpha, float))
    R = np.asarray(config.R_matrix, float) if config.R_matrix is not None else design.R
    a = config.wishart_df if config.wishart_df is not None else design.p + 2
    s0 = config.sigma0_sq if config.sigma0_sq is not None else design.sample_var
    curve_h = CurveHyper(a=a, R=R, nu0=config.nu0, sigma0_sq=s0)
    return mean_h, alpha_h, curve_h


def init_state(design, config, rng, v_delta):
    """Deterministic-where-possible initialization; latent draws seeded."""
    m, J, p, q = design.m, design.J, design.p, config.q
    mean_h, alpha_h, curve_h = _hypers(design, config)
    gen = rng.gen

    # ridge OLS per cell on the unweighted design
    _, _, XtX, Xty = reweighted_products(design, np.zeros((m, J)))
    A = XtX + 1e-6 * np.eye(p)[None, None, :, :]
    beta = np.linalg.solve(A, Xty[..., None])[..., 0]
    fitted = np.einsum("ijkp,ijp->ijk", design.B, beta)
    resid = np.where(design.obs_mask, design.Y - fitted, 0.0)
    counts = design.obs_mask.sum(axis=(0, 2))
    sse = (resid**2).sum(axis=(0, 2))
    sigma2 = np.where(counts > p, sse / np.maximum(counts - p, 1), curve_h.sigma0_sq)
    sigma2 = np.maximum(sigma2, 1e-8)
    if curve_h.a > p + 1:
        Sigma0 = curve_h.R / (curve_h.a - p - 1)
    else:
        Sigma0 = curve_h.R.copy()
    SigmaJ = np.repeat(Sigma0[None, :, :], J, axis=0)
    curve = CurveState(Beta=beta, SigmaJ=SigmaJ, sigma2=sigma2)

    Lambda = 0.2 * gen.standard_normal((m, q))
    Eta = 0.2 * gen.standard_normal((J, q))
    Gamma = (gen.uniform(size=(m, J)) < 0.5).astype(np.int8)
    mean = MeanActivityState(
        Lambda=Lambda, Eta=Eta, xi=config.mu_xi,
        Z=np.zeros((m, J)), Gamma=Gamma,
        phi=np.ones((m, q)), zeta=np.ones(q),
    )
    var = VarActivityState(
        alpha=np.asarray(config.mu_alpha, float).copy(),
        U=np.zeros((m, J)),
        T=np.zeros((m, J), dtype=np.int8),
        Delta=np.zeros((m, J)),
        v_delta=v_delta,
    )
    st = SamplerState(mean=mean, var=var, curve=curve,
                      pi_i=np.full(m, 0.5), pi_j=np.full(J, 0.5))
    update_z(mean, rng)
    update_u(var, mean.Lambda @ mean.Eta.T, rng)
    return st


def _variant_pi(st, config, design):
    m, J = design.m, design.J
    if config.prior_variant == "bmc0":
        return np.full((m, J), st.pi0)
    if config.prior_variant == "bmc_i":
        return np.repeat(st.pi_i[:, None], J, axis=1)
    return np.repeat(st.pi_j[None, :], m, axis=0)


def _update_variant_priors(st, config, rng):
    """Beta-Bernoulli conjugate updates of the flat activity probabilities."""
    gen = rng.gen
    G = st.mean.Gamma
    if config.prior_variant == "bmc0":
        n1 = float(G.sum())
        st.pi0 = float(gen.beta(1.0 + n1, 1.0 + G.size - n1))
    elif config.prior_variant == "bmc_i":
        n1 = G.sum(axis=1).astype(float)
        st.pi_i = gen.beta(1.0 + n1, 1.0 + G.shape[1] - n1)
    elif config.prior_variant == "bmc_j":
        n1 = G.sum(axis=0).astype(float)
        st.pi_j = gen.beta(1.0 + n1, 1.0 + G.shape[0] - n1)
    n_t = float(st.var.T.sum())
    st.pi_t = float(gen.beta(1.0 + n_t, 1.0 + st.var.T.size - n_t))


def sweep(design, st, config, hypers, rng):
    """One full sampler iteration. Returns (accepted, proposed) MH counts."""
    mean_h, alpha_h, curve_h = hypers
    factor = config.prior_variant == "factor"
    cell_mask = design.observed if config.latent_cells == "observed" else None
    M = st.mean.Lambda @ st.mean.Eta.T

    # variance block
    if factor:
        update_alpha(st.var, M, alpha_h, rng, cell_mask)
        t_prior = ndtr(st.var.alpha[0] + M * st.var.alpha[1])
    else:
        _update_variant_priors(st, config, rng)
        t_prior = np.full((design.m, design.J), st.pi_t)
    fitted = np.einsum("ijkp,ijp->ijk", design.B, st.curve.Beta)
    resid = np.where(
        design.obs_mask, design.Y - st.mean.Gamma[..., None] * fitted, 0.0
    )
    acc, prop = update_t_delta(
        st.var, t_prior, resid, design.X, design.obs_mask, st.curve.sigma2, rng,
        flip_fraction=config.flip_fraction, prop_scale=config.prop_scale,
    )
    # the (t, delta) move marginalises u, so u must be refreshed right after
    # it; conditioning later steps on a stale u breaks the truncation signs
    if factor:
        update_u(st.var, M, rng)

    # reformulated (weighted) data consumed by the remaining steps
    Ytil, Btil, XtX, Xty = reweighted_products(design, st.var.Delta)
    Sigma_inv, Sigma_logdet = st.curve.sigma_inv_logdet()

    # mean-activity block
    if factor:
        update_lambda(st.mean, st.var.alpha, st.var.U, rng, cell_mask)
        update_eta(st.mean, st.var.alpha, st.var.U, rng, cell_mask)
        update_xi(st.mean, mean_h, rng, cell_mask)
        pi = activity_probability(st.mean)
        update_gamma_collapsed(
            st.mean, pi, XtX, Xty, Sigma_inv, Sigma_logdet, st.curve.sigma2, rng
        )
        # gamma is drawn with z marginalised out; redraw z given the new
        # gamma so the next lambda/eta/xi conditionals see a consistent state
        update_z(st.mean, rng)
        update_mgp(st.mean, mean_h, rng)
    else:
        pi = _variant_pi(st, config, design)
        update_gamma_collapsed(
            st.mean, pi, XtX, Xty, Sigma_inv, Sigma_logdet, st.curve.sigma2, rng
        )

    # curve and noise block
    update_beta_all(st.curve, st.mean.Gamma, XtX, Xty, Sigma_inv, rng)
    for j in range(design.J):
        if config.sigma_count_mode == "active":
            contributing = (st.mean.Gamma[:, j] == 1) & design.observed[:, j]
        else:
            contributing = design.observed[:, j]
        update_sigma_endpoint(st.curve, j, curve_h, contributing, rng)
    update_noise_var(st.curve, curve_h, st.mean.Gamma, Ytil, Btil, design.obs_mask, rng)
    return acc, prop


def _check_finite(st, it):
    vals = [st.mean.xi, float(st.var.alpha.sum())]
    if not all(np.isfinite(v) for v in vals) or not (
        np.all(np.isfinite(st.curve.sigma2))
        and np.all(np.isfinite(st.var.Delta))
        and np.all(np.isfinite(st.mean.Lambda))
    ):
        bad = np.argwhere(~np.isfinite(st.var.Delta))
        raise ChainAbort(
            f"non-finite state at iteration {it}; first bad delta cell: "
            f"{bad[0].tolist() if len(bad) else 'n/a'}; xi={st.mean.xi}, "
            f"alpha={st.var.alpha}, sigma2 range=({st.curve.sigma2.min()}, {st.curve.sigma2.max()})"
        )


def regenerate_responses(design, st, rng):
    """Draw new responses from the model given the current state (used by
    joint-distribution tests); writes into design.Y in place."""
    fitted = np.einsum("ijkp,ijp->ijk", design.B, st.curve.Beta)
    sd = np.exp(design.X * st.var.Delta[..., None] / 2.0) * np.sqrt(
        st.curve.sigma2[None, :, None]
    )
    noise = rng.gen.standard_normal(design.Y.shape) * sd
    design.Y = np.where(
        design.obs_mask, st.mean.Gamma[..., None] * fitted + noise, 0.0
    )
    return design.Y


def run_chain(data, config, records=None, out_dir=None, holdout_mask=None,
              stream_id=0, progress=False):
    """Run one chain on a Dataset; returns a ChainOutput.

    If records is None the data are normalized here. Thinned post-burn-in
    draws are kept in memory and, when out_dir is given, streamed to CSV.
    """
    if records is None:
        data, records = normalize_cells(data, rescale=False)
    design = build_design(data, records)
    v_delta = config.v_delta if config.v_delta is not None else compute_v_delta(data)
    rng = RngStream(config.seed, stream_id)
    hypers = _hypers(design, config)
    st = init_state(design, config, rng, v_delta)
    factor = config.prior_variant == "factor"

    keys = ["xi", "alpha", "Gamma", "T", "Delta", "Beta", "sigma2", "sigma_trace", "sigma_logdet"]
    if factor:
        keys += ["Lambda", "Eta"]
    else:
        keys += ["pi", "pi_t"]
    draws = {k: [] for k in keys}
    writer = _ChainWriter(out_dir, design, config, factor) if out_dir else None

    acc_tot = prop_tot = 0
    for it in range(1, config.iterations + 1):
        acc, prop = sweep(design, st, config, hypers, rng)
        acc_tot += acc
        prop_tot += prop
        _check_finite(st, it)
        if it > config.burnin and (it - config.burnin) % config.thin == 0:
            _, logdet = st.curve.sigma_inv_logdet()
            rec = {
                "xi": st.mean.xi,
                "alpha": st.var.alpha.copy(),
                "Gamma": st.mean.Gamma.copy(),
                "T": st.var.T.copy(),
                "Delta": st.var.Delta.copy(),
                "Beta": st.curve.Beta.copy(),
                "sigma2": st.curve.sigma2.copy(),
                "sigma_trace": np.trace(st.curve.SigmaJ, axis1=-2, axis2=-1),
                "sigma_logdet": logdet,
            }
            if factor:
                rec["Lambda"] = st.mean.Lambda.copy()
                rec["Eta"] = st.mean.Eta.copy()
            else:
                rec["pi"] = _variant_pi(st, config, design).copy()
                rec["pi_t"] = st.pi_t
            for k, v in rec.items():
                draws[k].append(v)
            if writer:
                writer.write_draw(rec)

    rate = acc_tot / max(prop_tot, 1)
    if not 0.05 < rate < 0.8:
        warnings.warn(
            f"(t, delta) acceptance rate {rate:.3f} outside (0.05, 0.8); "
            "consider tuning flip_fraction or prop_scale"
        )
    acceptance = {"t_delta_accepted": acc_tot, "t_delta_proposed": prop_tot,
                  "t_delta_rate": rate, "v_delta": v_delta}
    stacked = {k: np.array(v) for k, v in draws.items()}
    out = ChainOutput(draws=stacked, config=config, design=design,
                      acceptance=acceptance, holdout_mask=holdout_mask)
    if writer:
        writer.finalize(acceptance, holdout_mask)
    return out


# --- persistence ---------------------------------------------------------


class _ChainWriter:
    """Streams saved draws to CSV files under the chain directory."""

    def __init__(self, out_dir, design, config, factor):
        self.dir = out_dir
        self.design = design
        os.makedirs(os.path.join(out_dir, "draws"), exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w") as fh:
            json.dump(config.to_dict(), fh, indent=2)
        m, J, p = design.m, design.J, design.p
        cells = [
            f"{design.chemical_names[i]}__{design.endpoint_names[j]}"
            for i in range(m) for j in range(J)
        ]
        self.files = {}
        headers = {
            "xi": ["xi"],
            "alpha": ["alpha0", "alpha1"],
            "Gamma": cells,
            "T": cells,
            "Delta": cells,
            "Beta": [f"{c}__b{k}" for c in cells for k in range(p)],
            "sigma2": list(design.endpoint_names),
            "sigma_trace": list(design.endpoint_names),
            "sigma_logdet": list(design.endpoint_names),
        }
        if factor:
            q = None  # determined on first draw
            headers["Lambda"] = None
            headers["Eta"] = None
        else:
            headers["pi"] = cells
            headers["pi_t"] = ["pi_t"]
        self.headers = headers
        self.factor = factor
        self._write_normalization()
        self._write_design()

    def _path(self, key):
        return os.path.join(self.dir, "draws", f"{key.lower()}.csv")

    def write_draw(self, rec):
        for key, val in rec.items():
            arr = np.atleast_1d(np.asarray(val, dtype=float)).ravel()
            if key not in self.files:
                hdr = self.headers.get(key)
                if hdr is None:
                    hdr = [f"{key.lower()}_{k}" for k in range(arr.size)]
                fh = open(self._path(key), "w")
                fh.write(",".join(hdr) + "\n")
                self.files[key] = fh
            self.files[key].write(",".join(f"{v:.10g}" for v in arr) + "\n")

    def _write_normalization(self):
        d = self.design
        with open(os.path.join(self.dir, "normalization.csv"), "w") as fh:
            fh.write("chemical,assay_endpoint,location,scale\n")
            for i in range(d.m):
                for j in range(d.J):
                    if d.observed[i, j]:
                        fh.write(
                            f"{d.chemical_names[i]},{d.endpoint_names[j]},"
                            f"{d.loc[i, j]!r},{d.scale[i, j]!r}\n"
                        )

    def _write_design(self):
        d = self.design
        knot_arr = np.full((d.m, d.J, 5), np.nan)
        for i in range(d.m):
            for j in range(d.J):
                if d.knots[i][j] is not None:
                    ks = d.knots[i][j].boundary_and_interior
                    knot_arr[i, j, : len(ks)] = ks
        np.savez_compressed(
            os.path.join(self.dir, "design.npz"),
            Y=d.Y, X=d.X, B=d.B, obs_mask=d.obs_mask, kcount=d.kcount,
            observed=d.observed, col_means=d.col_means, loc=d.loc,
            scale=d.scale, R=d.R, cutoffs=d.cutoffs, knots=knot_arr,
            chemical_names=np.array(d.chemical_names),
            endpoint_names=np.array(d.endpoint_names),
            sample_var=d.sample_var,
        )

    def finalize(self, acceptance, holdout_mask):
        for fh in self.files.values():
            fh.close()
        with open(os.path.join(self.dir, "acceptance.json"), "w") as fh:
            json.dump(acceptance, fh, indent=2)
        if holdout_mask is not None:
            np.savetxt(
                os.path.join(self.dir, "holdout_mask.csv"),
                holdout_mask.astype(int), fmt="%d", delimiter=",",
            )


def load_chain(chain_dir):
    """Rebuild a ChainOutput from a persisted chain directory."""
    from .spline_basis import KnotVector

    cfg_path = os.path.join(chain_dir, "config.json")
    dz_path = os.path.join(chain_dir, "design.npz")
    if not (os.path.exists(cfg_path) and os.path.exists(dz_path)):
        raise FileNotFoundError(f"incomplete chain directory: {chain_dir}")
    with open(cfg_path) as fh:
        config = Config.from_dict(json.load(fh))
    z = np.load(dz_path, allow_pickle=False)
    m, J = z["observed"].shape
    knots = [[None] * J for _ in range(m)]
    for i in range(m):
        for j in range(J):
            ks = z["knots"][i, j]
            ks = ks[np.isfinite(ks)]
            if ks.size:
                knots[i][j] = KnotVector(tuple(float(v) for v in ks))
    design = Design(
        m=m, J=J, p=z["B"].shape[-1], kmax=z["Y"].shape[-1],
        Y=z["Y"], X=z["X"], B=z["B"], obs_mask=z["obs_mask"],
        kcount=z["kcount"], observed=z["observed"], knots=knots,
        col_means=z["col_means"], loc=z["loc"], scale=z["scale"],
        chemical_names=tuple(z["chemical_names"].tolist()),
        endpoint_names=tuple(z["endpoint_names"].tolist()),
        cutoffs=z["cutoffs"], R=z["R"], sample_var=float(z["sample_var"]),
    )
    factor = config.prior_variant == "factor"
    p = design.p
    shapes = {
        "xi": (), "alpha": (2,), "Gamma": (m, J), "T": (m, J),
        "Delta": (m, J), "Beta": (m, J, p), "sigma2": (J,),
        "sigma_trace": (J,), "sigma_logdet": (J,),
    }
    if factor:
        shapes["Lambda"] = (m, config.q)
        shapes["Eta"] = (J, config.q)
    else:
        shapes["pi"] = (m, J)
        shapes["pi_t"] = ()
    draws = {}
    for key, shp in shapes.items():
        path = os.path.join(chain_dir, "draws", f"{key.lower()}.csv")
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing draw file: {path}")
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        draws[key] = arr.reshape((arr.shape[0],) + shp)
    acc_path = os.path.join(chain_dir, "acceptance.json")
    acceptance = {}
    if os.path.exists(acc_path):
        with open(acc_path) as fh:
            acceptance = json.load(fh)
    hm_path = os.path.join(chain_dir, "holdout_mask.csv")
    holdout = None
    if os.path.exists(hm_path):
        holdout = np.loadtxt(hm_path, delimiter=",", ndmin=2).astype(bool)
    return ChainOutput(draws=draws, config=config, design=design,
                       acceptance=acceptance, holdout_mask=holdout)
