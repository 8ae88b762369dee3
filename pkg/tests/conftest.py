from __future__ import annotations

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from hodgemix.data import ComparisonDataset  # noqa: E402


def random_dataset(rng, n_items=5, n_annotators=3, m=20, weighted=False, connected=True):
    """Small random dataset; with ``connected`` a spanning chain is included."""
    rows = []
    if connected:
        for i in range(n_items - 1):
            rows.append((int(rng.integers(n_annotators)), i, i + 1))
    while len(rows) < m:
        i, j = rng.choice(n_items, 2, replace=False)
        rows.append((int(rng.integers(n_annotators)), int(i), int(j)))
    a, l, r = (np.array(c) for c in zip(*rows))
    perm = rng.permutation(len(rows))
    a, l, r = a[perm], l[perm], r[perm]
    y = rng.normal(size=a.size)
    w = rng.uniform(0.2, 3.0, size=a.size) if weighted else None
    return ComparisonDataset.from_arrays(a, l, r, y, w, n_items=n_items, n_annotators=n_annotators)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def chain():
    # 0 > 1 and 1 > 2, one annotator
    return ComparisonDataset.from_arrays([0, 0], [0, 1], [1, 2], [1.0, 1.0], n_items=3, n_annotators=1)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
