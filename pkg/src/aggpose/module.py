"""Minimal parameter-container base class and weight initializers."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Module:
    """Collects parameters from attributes, recursively, in definition
    order.  Attribute values may be Tensors, Modules, or lists/tuples of
    either; names are dotted paths with list indices inline."""

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, item in value.items():
            yield from _walk(item, f"{name}.{k}")


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> Tensor:
    """Normal(0, std) with tails beyond 2*std redrawn."""
    draw = rng.normal(0.0, std, size=shape)
    bad = np.abs(draw) > 2.0 * std
    while bad.any():
        draw[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(draw) > 2.0 * std
    return Tensor(draw.astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
