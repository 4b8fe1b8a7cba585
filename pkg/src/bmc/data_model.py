"""Matrix-structured dose-response data: ingest, normalization, hold-outs.

A Dataset is an m x J grid of cells; each cell holds zero or more
(log10 dose, response) observations. Cells with zero observations are
missing. Datasets are immutable after construction.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Observation",
    "CellData",
    "Dataset",
    "NormalizationRecord",
    "ingest_csv",
    "ingest_cutoffs",
    "normalize_cells",
    "denormalize",
    "split_holdout",
    "write_csv",
    "write_mask",
    "read_mask",
]


class ParseError(ValueError):
    pass


@dataclass(frozen=True)
class Observation:
    log10_dose: float
    response: float

    def __post_init__(self):
        if not (math.isfinite(self.log10_dose) and math.isfinite(self.response)):
            raise ValueError("observation values must be finite")


@dataclass(frozen=True)
class CellData:
    chemical_index: int
    endpoint_index: int
    observations: tuple = ()

    @property
    def k(self):
        return len(self.observations)

    @property
    def missing(self):
        return self.k == 0

    def doses(self):
        return np.array([o.log10_dose for o in self.observations])

    def responses(self):
        return np.array([o.response for o in self.observations])


@dataclass(frozen=True)
class NormalizationRecord:
    location: float
    scale: float

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")


@dataclass(frozen=True)
class Dataset:
    m: int
    J: int
    cells: tuple  # m x J nested tuples of CellData
    chemical_names: tuple
    endpoint_names: tuple
    cutoffs: tuple = None  # per-endpoint efficacy cutoffs, or None

    def __post_init__(self):
        if len(self.chemical_names) != self.m or len(self.endpoint_names) != self.J:
            raise ValueError("label lengths must match matrix dimensions")
        if self.cutoffs is not None and len(self.cutoffs) != self.J:
            raise ValueError("cutoffs length must equal J")

    def cell(self, i, j):
        return self.cells[i][j]

    @property
    def observed_mask(self):
        return np.array(
            [[not self.cells[i][j].missing for j in range(self.J)] for i in range(self.m)]
        )

    @property
    def n_missing(self):
        return int(self.m * self.J - self.observed_mask.sum())

    def iter_observed(self):
        for i in range(self.m):
            for j in range(self.J):
                if not self.cells[i][j].missing:
                    yield self.cells[i][j]

    def all_responses(self):
        vals = [o.response for c in self.iter_observed() for o in c.observations]
        return np.array(vals)


_HEADER = ["chemical", "assay_endpoint", "log10_dose_uM", "response"]


def ingest_csv(path):
    """Read a long-format CSV into a Dataset.

    Chemicals and endpoints are indexed in first-appearance order so runs
    are reproducible from the same file.
    """
    chem_idx, ep_idx = {}, {}
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file")
        if [h.strip() for h in header] != _HEADER:
            raise ParseError(f"{path}: expected header {','.join(_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 fields, got {len(row)}")
            chem, ep, dose_s, resp_s = (f.strip() for f in row)
            try:
                dose = float(dose_s)
                resp = float(resp_s)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: non-numeric dose or response")
            if not (math.isfinite(dose) and math.isfinite(resp)):
                raise ParseError(f"{path}:{lineno}: non-finite dose or response")
            if chem not in chem_idx:
                chem_idx[chem] = len(chem_idx)
            if ep not in ep_idx:
                ep_idx[ep] = len(ep_idx)
            rows.append((chem_idx[chem], ep_idx[ep], dose, resp))
    if not rows:
        raise ParseError(f"{path}: no data rows")
    m, J = len(chem_idx), len(ep_idx)
    obs = [[[] for _ in range(J)] for _ in range(m)]
    for i, j, dose, resp in rows:
        obs[i][j].append(Observation(dose, resp))
    cells = tuple(
        tuple(CellData(i, j, tuple(obs[i][j])) for j in range(J)) for i in range(m)
    )
    return Dataset(m, J, cells, tuple(chem_idx), tuple(ep_idx))


def ingest_cutoffs(path, endpoint_names):
    """Read `assay_endpoint,cutoff` CSV; returns per-endpoint tuple (None gaps)."""
    table = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["assay_endpoint", "cutoff"]:
            raise ParseError(f"{path}: expected header assay_endpoint,cutoff")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not f.strip() for f in row):
                continue
            try:
                table[row[0].strip()] = float(row[1])
            except (IndexError, ValueError):
                raise ParseError(f"{path}:{lineno}: malformed cutoff row")
    return tuple(table.get(name) for name in endpoint_names)


def write_csv(data, path):
    """Write a Dataset back to the long CSV format (17 significant digits)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(_HEADER)
        for i in range(data.m):
            for j in range(data.J):
                for o in data.cells[i][j].observations:
                    w.writerow(
                        [
                            data.chemical_names[i],
                            data.endpoint_names[j],
                            repr(o.log10_dose),
                            repr(o.response),
                        ]
                    )


def normalize_cells(data, rescale=True):
    """Per-cell standardization: center by the sample mean, scale by the
    sample SD. Cells with fewer than 2 observations or zero variance are
    centered only (scale = 1). Returns (normalized Dataset, records grid).

    With rescale=False only the centering is applied (scale = 1 for every
    cell), which keeps the endpoint-specific noise variances meaningful;
    model fits use this mode since per-cell rescaling would force every
    inactive cell to unit variance regardless of its endpoint.
    """
    records = [[None] * data.J for _ in range(data.m)]
    new_cells = []
    for i in range(data.m):
        row = []
        for j in range(data.J):
            cell = data.cells[i][j]
            if cell.missing:
                records[i][j] = None
                row.append(cell)
                continue
            y = cell.responses()
            loc = float(y.mean())
            if rescale and cell.k >= 2:
                sd = float(y.std(ddof=1))
            else:
                sd = 0.0
            scale = sd if sd > 0 else 1.0
            records[i][j] = NormalizationRecord(loc, scale)
            obs = tuple(
                Observation(o.log10_dose, (o.response - loc) / scale)
                for o in cell.observations
            )
            row.append(CellData(i, j, obs))
        new_cells.append(tuple(row))
    out = Dataset(
        data.m,
        data.J,
        tuple(new_cells),
        data.chemical_names,
        data.endpoint_names,
        data.cutoffs,
    )
    return out, records


def denormalize(values, record):
    """Invert a NormalizationRecord on an array of normalized responses."""
    return record.location + record.scale * np.asarray(values)


def split_holdout(data, fraction, seed):
    """Mask a seeded uniform random selection of observed cells.

    Returns (Dataset with those cells missing, m x J boolean hold-out mask).
    """
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    observed = [
        (i, j) for i in range(data.m) for j in range(data.J) if not data.cells[i][j].missing
    ]
    n_hold = int(round(fraction * len(observed)))
    gen = np.random.Generator(np.random.Philox(key=int(seed)))
    mask = np.zeros((data.m, data.J), dtype=bool)
    if n_hold:
        pick = gen.choice(len(observed), size=n_hold, replace=False)
        for k in pick:
            mask[observed[k]] = True
    new_cells = tuple(
        tuple(
            CellData(i, j, ()) if mask[i, j] else data.cells[i][j]
            for j in range(data.J)
        )
        for i in range(data.m)
    )
    out = Dataset(
        data.m, data.J, new_cells, data.chemical_names, data.endpoint_names, data.cutoffs
    )
    return out, mask


def write_mask(mask, data, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["chemical", "assay_endpoint"])
        for i in range(data.m):
            for j in range(data.J):
                if mask[i, j]:
                    w.writerow([data.chemical_names[i], data.endpoint_names[j]])


def read_mask(path, data):
    mask = np.zeros((data.m, data.J), dtype=bool)
    chem = {n: i for i, n in enumerate(data.chemical_names)}
    ep = {n: j for j, n in enumerate(data.endpoint_names)}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if [h.strip() for h in header] != ["chemical", "assay_endpoint"]:
            raise ParseError(f"{path}: expected header chemical,assay_endpoint")
        for row in reader:
            if not row or all(not f.strip() for f in row):
                continue
            try:
                mask[chem[row[0].strip()], ep[row[1].strip()]] = True
            except KeyError as e:
                raise ParseError(f"{path}: unknown label {e}")
    return mask
