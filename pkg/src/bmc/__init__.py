"""Bayesian matrix completion for sparse dose-response screening data."""

from .data_model import Dataset, ingest_csv, normalize_cells, split_holdout
from .sampler import Config, load_chain, run_chain
from .summaries import activity_summary, chemical_ranking, curve_bands

__all__ = [
    "Dataset",
    "ingest_csv",
    "normalize_cells",
    "split_holdout",
    "Config",
    "run_chain",
    "load_chain",
    "activity_summary",
    "chemical_ranking",
    "curve_bands",
]
