"""Tiny parameter-container base class shared by all model components."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from .tensor import Tensor


def parameter(data: np.ndarray, name: Optional[str] = None) -> Tensor:
    """Trainable tensor (float32 unless the array says otherwise)."""
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return Tensor(arr, requires_grad=True, name=name)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class Module:
    """Base for layers: collects parameters from attributes, recursively.

    Attributes that are trainable ``Tensor``s, ``Module``s, or lists of
    modules are discovered in definition order, so parameter naming is
    deterministic for a fixed construction path.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}" if prefix else attr
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Name -> raw value mapping, used by checkpointing."""
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(arrays))
        extra = sorted(set(arrays) - set(own))
        if missing or extra:
            raise KeyError(f"parameter names do not match: missing={missing}, unexpected={extra}")
        # validate everything first so a bad file cannot partially load
        for name, p in own.items():
            if arrays[name].shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: checkpoint {arrays[name].shape} vs model {p.data.shape}")
        for name, p in own.items():
            p.data = arrays[name].astype(p.data.dtype)
            p.grad = np.zeros_like(p.data)

    def copy_values_from(self, other: "Module") -> None:
        self.load_state_arrays({k: v.copy() for k, v in other.state_arrays().items()})


def cast_parameters(module: Module, dtype) -> None:
    """Re-type every parameter in place (e.g. float64 for gradient checks)."""
    for _, p in module.named_parameters():
        p.data = p.data.astype(dtype)
        p.grad = np.zeros_like(p.data)
