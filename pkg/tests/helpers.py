"""Shared fixtures-by-hand for the test suite."""

import numpy as np

from bmc.data_model import CellData, Dataset, Observation


def toy_dataset(m=3, J=4, k=6, seed=0, missing=()):
    gen = np.random.default_rng(seed)
    cells = []
    for i in range(m):
        row = []
        for j in range(J):
            if (i, j) in missing:
                row.append(CellData(i, j, ()))
                continue
            obs = tuple(
                Observation(float(x), float(gen.normal()))
                for x in np.linspace(0.3, 2.0, k)
            )
            row.append(CellData(i, j, obs))
        cells.append(tuple(row))
    return Dataset(
        m, J, tuple(cells),
        tuple(f"c{i}" for i in range(m)), tuple(f"e{j}" for j in range(J)), None,
    )
