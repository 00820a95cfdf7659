"""Named parameter storage with per-tensor trainability."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from ..autodiff import Tensor
from ..autodiff.init import kaiming_normal, trunc_normal


@dataclass(frozen=True)
class ParamSpec:
    """Shape and initializer of one parameter tensor.

    ``init`` is one of ``kaiming`` (LeakyReLU gain), ``linear`` (unit
    gain, for layers feeding a softmax or a residual stream),
    ``trunc_normal``, ``zeros`` or ``ones``.
    """

    name: str
    shape: tuple[int, ...]
    init: str
    fan_in: int = 1

    @property
    def size(self) -> int:
        return math.prod(self.shape)


def conv_spec(prefix: str, c_in: int, c_out: int, kh: int, kw: int | None = None) -> list[ParamSpec]:
    kw = kh if kw is None else kw
    return [ParamSpec(f"{prefix}.weight", (c_out, c_in, kh, kw), "kaiming", c_in * kh * kw),
            ParamSpec(f"{prefix}.bias", (c_out,), "zeros")]


def linear_spec(prefix: str, d_in: int, d_out: int, init: str = "trunc_normal") -> list[ParamSpec]:
    return [ParamSpec(f"{prefix}.weight", (d_out, d_in), init, d_in),
            ParamSpec(f"{prefix}.bias", (d_out,), "zeros")]


def norm_spec(prefix: str, width: int) -> list[ParamSpec]:
    return [ParamSpec(f"{prefix}.weight", (width,), "ones"), ParamSpec(f"{prefix}.bias", (width,), "zeros")]


def _initial_value(spec: ParamSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.init == "zeros":
        return np.zeros(spec.shape)
    if spec.init == "ones":
        return np.ones(spec.shape)
    if spec.init == "trunc_normal":
        return trunc_normal(rng, spec.shape)
    if spec.init == "kaiming":
        return kaiming_normal(rng, spec.shape, spec.fan_in)
    if spec.init == "linear":
        return rng.standard_normal(spec.shape) / math.sqrt(spec.fan_in)
    raise ValueError(f"unknown initializer {spec.init!r}")


class ParamStore:
    """Ordered name -> Tensor mapping plus non-trainable buffers.

    Buffers (batch-norm running statistics, input normalization) are
    saved with the parameters but excluded from parameter counts and
    from the optimizer.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    @classmethod
    def from_specs(cls, specs: Iterable[ParamSpec], buffers: dict[str, np.ndarray],
                   rng: np.random.Generator, dtype=np.float32) -> "ParamStore":
        store = cls()
        for spec in specs:
            store.add(spec.name, _initial_value(spec, rng).astype(dtype))
        for name, value in buffers.items():
            store.add_buffer(name, np.array(value, dtype=dtype))
        return store

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._tensors or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=trainable, name=name)
        if not trainable:
            t.grad = np.zeros_like(t.data)
        self._tensors[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        if name in self._tensors or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.buffers[name] = value

    # -- mapping interface --------------------------------------------------------
    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"parameter {name!r} is not registered") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self) -> list[str]:
        return list(self._tensors)

    def group(self, prefix: str) -> dict[str, Tensor]:
        """Parameters under ``prefix.``, keyed by the remainder of their name."""
        cut = len(prefix) + 1
        return {k[cut:]: t for k, t in self._tensors.items() if k.startswith(prefix + ".")}

    # -- trainability ------------------------------------------------------------
    def is_trainable(self, name: str) -> bool:
        return self[name].requires_grad

    def set_trainable(self, name: str, flag: bool) -> None:
        t = self[name]
        t.requires_grad = bool(flag)
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        elif not flag:
            t.grad.fill(0)

    def trainable_names(self) -> list[str]:
        return [k for k, t in self._tensors.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    # -- sizes and conversion ------------------------------------------------------
    def num_scalars(self, prefix: str | None = None) -> int:
        return sum(t.size for k, t in self._tensors.items() if prefix is None or k.startswith(prefix))

    def astype(self, dtype) -> "ParamStore":
        """Copy with every tensor and buffer cast to ``dtype`` (trainability kept)."""
        out = ParamStore()
        for k, t in self._tensors.items():
            out.add(k, t.data.astype(dtype), trainable=t.requires_grad)
        for k, v in self.buffers.items():
            out.add_buffer(k, v.astype(dtype))
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        """Parameters then buffers, as plain arrays (no copy)."""
        out = {k: t.data for k, t in self._tensors.items()}
        out.update(self.buffers)
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.arrays().items()}

    def assign(self, name: str, value: np.ndarray) -> None:
        """Overwrite a parameter or buffer in place, keeping its dtype."""
        if name in self._tensors:
            target = self._tensors[name].data
        elif name in self.buffers:
            target = self.buffers[name]
        else:
            raise KeyError(f"parameter {name!r} is not registered")
        value = np.asarray(value)
        if value.shape != target.shape:
            raise ValueError(f"{name}: shape {value.shape} does not match {target.shape}")
        target[...] = value
