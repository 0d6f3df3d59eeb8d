import os

# Tiny matrices dominate this suite; multithreaded BLAS only adds sync
# overhead on them. Must be set before numpy loads.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

from sdenoise.sde import DiffusionSchedule


@pytest.fixture
def schedule():
    return DiffusionSchedule(sigma=25.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_diff_vjp(score_fn, x, t, v, h=None):
    """Central-difference estimate of v^T (d score / d x)."""
    x = np.asarray(x, dtype=float)
    scale = max(1.0, float(np.max(np.abs(x))))
    h = h if h is not None else 1e-4 * scale
    out = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        out[j] = (v @ score_fn(x + e, t) - v @ score_fn(x - e, t)) / (2 * h)
    return out


def rel_err(got, want):
    want = np.asarray(want, dtype=float)
    denom = np.linalg.norm(want)
    return np.linalg.norm(np.asarray(got, dtype=float) - want) / (denom if denom > 0 else 1.0)
