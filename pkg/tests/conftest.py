"""Shared fixtures: the high-precision special-function table and cached
expensive solver objects reused across test modules."""

import pathlib

import numpy as np
import pytest

FIXTURES = pathlib.Path(__file__).parent / "fixtures"


def load_specfun_table():
    """Parse specfun_table.txt into (kind, order, x, value) records."""
    records = []
    for line in (FIXTURES / "specfun_table.txt").read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        kind, n, x, re, im = line.split()
        records.append((kind, int(n), float(x), complex(float(re), float(im))))
    return records


@pytest.fixture(scope="session")
def specfun_table():
    return load_specfun_table()


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(514229)
