"""Parameter containers on top of :mod:`geodsr.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class that discovers parameters by walking attributes.

    Attributes holding a grad-requiring :class:`Tensor`, a :class:`Module`, or
    a list of modules are visited in definition order, so parameter names
    are stable path strings like ``depth_groups.1.blocks.0.gsa.weight``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} does not match {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (used for float64 gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, bias: bool = True):
        fan_in = cin * k * k
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = T.parameter(_uniform(rng, bound, (cout, cin, k, k)))
        self.bias = T.parameter(_uniform(rng, bound, (cout,))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)

    def zero_(self) -> None:
        self.weight.data[...] = 0
        if self.bias is not None:
            self.bias.data[...] = 0


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(din)
        self.weight = T.parameter(_uniform(rng, bound, (dout, din)))
        self.bias = T.parameter(_uniform(rng, bound, (dout,)))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class ChannelNorm(Module):
    """Layer norm over the channel axis with per-channel gain and offset."""

    def __init__(self, channels: int):
        self.gain = T.parameter(np.ones(channels, dtype=np.float32))
        self.offset = T.parameter(np.zeros(channels, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm_channels(x, self.gain, self.offset)
