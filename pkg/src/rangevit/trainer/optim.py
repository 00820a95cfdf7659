"""AdamW and the warm-up + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..model import ParamStore


@dataclass(frozen=True)
class WarmupCosine:
    """Linear ramp 0 -> peak over ``warmup_epochs``, then half a cosine.

    The cosine reaches 0 at the start of the last epoch, so the whole
    final epoch runs at (numerically) zero learning rate.
    """

    peak_lr: float
    epochs: int
    warmup_epochs: float = 10.0

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError("peak learning rate must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warm-up ({self.warmup_epochs}) must be shorter than training ({self.epochs} epochs)")

    def __call__(self, epoch_fraction: float) -> float:
        if epoch_fraction < self.warmup_epochs:
            return self.peak_lr * max(epoch_fraction, 0.0) / self.warmup_epochs
        span = self.epochs - 1 - self.warmup_epochs
        t = 1.0 if span <= 0 else min((epoch_fraction - self.warmup_epochs) / span, 1.0)
        return self.peak_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def lr_at(epoch_fraction: float, peak_lr: float, epochs: int, warmup_epochs: float = 10) -> float:
    return WarmupCosine(peak_lr, epochs, warmup_epochs)(epoch_fraction)


def adamw_update(w: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, step: int, lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """One in-place AdamW update; ``step`` counts from 1."""
    b1, b2 = betas
    w *= 1.0 - lr * weight_decay
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    w -= lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    """AdamW over the trainable tensors of a ParamStore.

    Frozen tensors are never touched, not even by weight decay.
    """

    def __init__(self, params: ParamStore, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.first: dict[str, np.ndarray] = {}
        self.second: dict[str, np.ndarray] = {}

    def step(self, lr: float) -> None:
        self.step_count += 1
        for name, t in self.params.items():
            if not t.requires_grad:
                continue
            if name not in self.first:
                self.first[name] = np.zeros_like(t.data)
                self.second[name] = np.zeros_like(t.data)
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            adamw_update(t.data, g, self.first[name], self.second[name], self.step_count, lr,
                         self.betas, self.eps, self.weight_decay)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([self.step_count], dtype=np.float32)}
        out.update({f"m.{k}": v for k, v in self.first.items()})
        out.update({f"v.{k}": v for k, v in self.second.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.step_count = int(arrays["step"][0])
        dtype = next(iter(self.params.items()))[1].dtype if len(self.params) else np.float32
        for key, value in arrays.items():
            if key.startswith("m."):
                self.first[key[2:]] = value.astype(dtype)
            elif key.startswith("v."):
                self.second[key[2:]] = value.astype(dtype)
