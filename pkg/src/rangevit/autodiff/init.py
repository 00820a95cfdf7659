"""Weight initializers. All take an explicit ``numpy.random.Generator``."""

from __future__ import annotations

import math

import numpy as np


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) truncated to +-bound*std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int, slope: float = 0.01) -> np.ndarray:
    gain = math.sqrt(2.0 / (1.0 + slope * slope))
    return rng.standard_normal(shape) * (gain / math.sqrt(fan_in))
