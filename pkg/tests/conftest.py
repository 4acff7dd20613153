from __future__ import annotations

import numpy as np
import pytest

from switchpdmp.system import Box, SwitchingSystem


def twin(field, d=None, lo=None, hi=None, rate=0.0, lambda_bar=1.0, wrap=None, name="twin"):
    """Two identical regimes: behaves as a single flow when ``rate`` is 0."""
    field = list(field)
    d = d or len(field)
    lo = lo if lo is not None else (-2.0,) * d
    hi = hi if hi is not None else (2.0,) * d
    box = Box(lo, hi, wrap=wrap or (False,) * d)
    return SwitchingSystem([field, field], [[0.0, rate], [rate, 0.0]], lambda_bar, box, name=name)


def two_state(l0=1.0, l1=2.0, lambda_bar=5.0, d=1):
    """Frozen 2-regime system with constant rates ``l0`` (leave 0) and ``l1``."""
    box = Box((0.0,) * d, (1.0,) * d)
    zero = ["0"] * d
    return SwitchingSystem([zero, zero], [[0.0, l0], [l1, 0.0]], lambda_bar, box, name="two_state")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def segment_check(grid, p0, p1, n=2000):
    """(max distance of occupied centres to [p0, p1] in cells, covered share
    of the segment)."""
    p0, p1 = np.asarray(p0, dtype=float), np.asarray(p1, dtype=float)
    c = grid.occupied_centers()
    d = p1 - p0
    s = np.clip(((c - p0) @ d) / (d @ d), 0, 1)
    dist = np.linalg.norm(c - (p0 + s[:, None] * d), axis=1)
    pts = p0 + np.linspace(0, 1, n)[:, None] * d
    cover = np.mean([grid.contains(p) for p in pts])
    return float(dist.max() / grid.cell.max()), float(cover)
