"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tensor, backward

STEP = 1e-5
# Denominator floor for relative error, multiplied by max(1, |loss|): FD
# round-off in 64-bit is ~1e-16 * |loss| / step, so exactly-zero analytic
# entries are compared against this instead of against 0.
FLOOR = 1e-6


@dataclass
class GradReport:
    name: str
    max_rel_error: float
    checked: int
    worst: str = ""
    per_tensor: dict = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic, numeric, floor: float = FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Mapping[str, Tensor],
    *,
    name: str = "check",
    step: float = STEP,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradReport:
    """Compare backprop gradients of ``fn()`` against central differences.

    ``fn`` must rebuild the graph from ``tensors`` on every call. With
    ``max_entries`` set, each tensor is probed at that many random entries
    (all entries when it is smaller).
    """
    for t in tensors.values():
        t.zero_grad()
    base = fn()
    floor = FLOOR * max(1.0, abs(float(base.data)))
    backward(base)
    analytic = {k: t.grad.copy() for k, t in tensors.items()}

    rng = rng or np.random.default_rng(0)
    worst, worst_at, checked = 0.0, "", 0
    per_tensor = {}
    for key, t in tensors.items():
        flat = t.data.reshape(-1)
        if not np.shares_memory(flat, t.data):
            raise ValueError(f"tensor {key!r} must be contiguous for in-place probing")
        n = flat.size
        if max_entries is None or n <= max_entries:
            probe = np.arange(n)
        else:
            probe = rng.choice(n, size=max_entries, replace=False)
        errs = []
        for i in probe:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = float(fn().data)
            flat[i] = orig - step
            f_minus = float(fn().data)
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * step)
            errs.append(float(relative_error(analytic[key].reshape(-1)[i], num, floor)))
        checked += len(probe)
        top = max(errs) if errs else 0.0
        per_tensor[key] = top
        if top > worst:
            worst, worst_at = top, key
    return GradReport(name=name, max_rel_error=worst, checked=checked, worst=worst_at, per_tensor=per_tensor)
