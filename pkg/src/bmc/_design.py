"""Internal padded-array representation of a normalized Dataset.

Cells are padded to a common observation count so every sweep step can run
as batched numpy over the full m x J grid; padding rows carry zero weight.
"""

from dataclasses import dataclass

import numpy as np

from .spline_basis import (
    P_BASIS,
    basis_matrix,
    center_columns,
    empirical_R,
    knots_from_doses,
)

__all__ = ["Design", "build_design"]


@dataclass
class Design:
    m: int
    J: int
    p: int
    kmax: int
    Y: np.ndarray          # (m, J, kmax) normalized responses, 0-padded
    X: np.ndarray          # (m, J, kmax) log10 doses, 0-padded
    B: np.ndarray          # (m, J, kmax, p) centered basis rows, 0-padded
    obs_mask: np.ndarray   # (m, J, kmax) valid-observation mask
    kcount: np.ndarray     # (m, J) number of observations
    observed: np.ndarray   # (m, J) cell observed at fit time
    knots: list            # m x J list of KnotVector (None for missing)
    col_means: np.ndarray  # (m, J, p) basis column means used for centering
    loc: np.ndarray        # (m, J) normalization locations
    scale: np.ndarray      # (m, J) normalization scales
    chemical_names: tuple
    endpoint_names: tuple
    cutoffs: np.ndarray    # (J,) raw-scale cutoffs, nan where absent
    R: np.ndarray          # (p, p) empirical OLS covariance
    sample_var: float      # sample variance of all normalized responses

    @property
    def n_cells(self):
        return self.m * self.J

    def dose_span(self, i, j):
        kn = self.knots[i][j]
        return kn.lo, kn.hi


def _cell_knots(data):
    """Per-cell knot rule: cell doses when rich enough, else endpoint-wide,
    else dataset-wide; always requiring the full 7-column basis."""
    all_doses = np.unique(
        np.concatenate([c.doses() for c in data.iter_observed()])
    )
    global_knots = knots_from_doses(all_doses)
    ep_doses = []
    for j in range(data.J):
        ds = [
            data.cells[i][j].doses()
            for i in range(data.m)
            if not data.cells[i][j].missing
        ]
        ep_doses.append(np.unique(np.concatenate(ds)) if ds else None)

    knots = [[None] * data.J for _ in range(data.m)]
    for i in range(data.m):
        for j in range(data.J):
            cell = data.cells[i][j]
            if cell.missing:
                continue
            d = np.unique(cell.doses())
            kn = None
            if d.size >= 5:
                cand = knots_from_doses(d)
                if cand.p == P_BASIS:
                    kn = cand
            if kn is None and ep_doses[j] is not None and ep_doses[j].size >= 2:
                cand = knots_from_doses(ep_doses[j])
                if cand.p == P_BASIS:
                    kn = cand
            if kn is None:
                kn = global_knots
            knots[i][j] = kn
    if global_knots.p != P_BASIS:
        raise ValueError("dose set too degenerate for the 7-column basis")
    return knots


def build_design(data, records):
    """Build the padded design from a normalized Dataset and its records."""
    m, J = data.m, data.J
    p = P_BASIS
    kcount = np.array([[data.cells[i][j].k for j in range(J)] for i in range(m)])
    kmax = max(int(kcount.max()), 1)
    Y = np.zeros((m, J, kmax))
    X = np.zeros((m, J, kmax))
    B = np.zeros((m, J, kmax, p))
    obs_mask = np.zeros((m, J, kmax), dtype=bool)
    col_means = np.zeros((m, J, p))
    loc = np.zeros((m, J))
    scale = np.ones((m, J))
    knots = _cell_knots(data)
    centered_cache = {}

    for i in range(m):
        for j in range(J):
            cell = data.cells[i][j]
            if cell.missing:
                continue
            k = cell.k
            d = cell.doses()
            # clamp tiny numerical overshoots outside the knot span
            kn = knots[i][j]
            d = np.clip(d, kn.lo, kn.hi)
            Y[i, j, :k] = cell.responses()
            X[i, j, :k] = d
            key = (kn.boundary_and_interior, tuple(d))
            if key in centered_cache:
                cb = centered_cache[key]
            else:
                cb = center_columns(basis_matrix(d, kn))
                centered_cache[key] = cb
            B[i, j, :k] = cb.values
            col_means[i, j] = cb.column_means
            obs_mask[i, j, :k] = True
            rec = records[i][j]
            loc[i, j] = rec.location
            scale[i, j] = rec.scale

    observed = kcount > 0
    basis_lookup = {}
    for i in range(m):
        for j in range(J):
            if observed[i, j]:
                kn = knots[i][j]
                d = np.clip(data.cells[i][j].doses(), kn.lo, kn.hi)
                basis_lookup[(i, j)] = centered_cache[
                    (kn.boundary_and_interior, tuple(d))
                ]
    R = empirical_R(data, lambda i, j: basis_lookup[(i, j)])
    cutoffs = np.full(J, np.nan)
    if data.cutoffs is not None:
        for j, c in enumerate(data.cutoffs):
            if c is not None:
                cutoffs[j] = c
    all_y = data.all_responses()
    sample_var = float(all_y.var(ddof=1)) if all_y.size > 1 else 1.0
    return Design(
        m=m,
        J=J,
        p=p,
        kmax=kmax,
        Y=Y,
        X=X,
        B=B,
        obs_mask=obs_mask,
        kcount=kcount,
        observed=observed,
        knots=knots,
        col_means=col_means,
        loc=loc,
        scale=scale,
        chemical_names=data.chemical_names,
        endpoint_names=data.endpoint_names,
        cutoffs=cutoffs,
        R=R,
        sample_var=sample_var,
    )
