"""Two-group parameter updates: one learning rate for the pretrained-LM
group, another for the translation-model group.

The base rate follows the inverse-sqrt warmup curve
``d_model**-0.5 * min(t**-0.5, t * warmup**-1.5)``; the LM group's rate is
supplied per step by the caller (scheduled, constant multiple, or zero).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from .tensor import Tensor


def nmt_rate(t: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    """Inverse-sqrt schedule with linear warmup; peaks at t == warmup."""
    if t < 1:
        raise ValueError(f"schedule step must be >= 1, got {t}")
    return scale * d_model ** -0.5 * min(t ** -0.5, t * warmup ** -1.5)


@dataclass
class ParamGroups:
    """Disjoint partition of trainable parameters into LM and NMT groups."""

    lm: list[Tensor] = field(default_factory=list)
    nmt: list[Tensor] = field(default_factory=list)

    def __post_init__(self):
        seen: set[int] = set()
        for p in self.lm + self.nmt:
            if id(p) in seen:
                raise ValueError(f"parameter {p.name!r} appears in both groups")
            seen.add(id(p))

    def all_params(self) -> list[Tensor]:
        return self.lm + self.nmt

    def check_exhaustive(self, trainables: Iterable[Tensor]) -> None:
        grouped = {id(p) for p in self.all_params()}
        for p in trainables:
            if p.requires_grad and id(p) not in grouped:
                raise ValueError(f"trainable parameter {p.name!r} is not assigned to any group")


class Optimizer:
    """Adam-style (default) or plain-SGD updates with per-group rates.

    Gradients are clipped to a global norm across both groups before the
    update, and cleared afterwards. A zero group rate leaves that group's
    values bit-identical.
    """

    def __init__(self, groups: ParamGroups, mode: str = "adam",
                 beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9,
                 clip_norm: Optional[float] = 1.0,
                 trainables: Optional[Iterable[Tensor]] = None):
        if mode not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer mode {mode!r}")
        self.groups = groups
        self.mode = mode
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        if trainables is not None:
            groups.check_exhaustive(trainables)
        if mode == "adam":
            self._m = {id(p): np.zeros_like(p.data) for p in groups.all_params()}
            self._v = {id(p): np.zeros_like(p.data) for p in groups.all_params()}
        else:
            self._m = self._v = {}

    def clip_gradients(self) -> float:
        """Scale all gradients so their global norm is at most ``clip_norm``."""
        total = 0.0
        for p in self.groups.all_params():
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        norm = math.sqrt(total)
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = np.asarray(self.clip_norm / norm, dtype=np.float32)
            for p in self.groups.all_params():
                if p.grad is not None:
                    p.grad *= factor.astype(p.grad.dtype)
        return norm

    def step(self, lr_nmt: float, lr_lm: float) -> None:
        for p in self.groups.all_params():
            if p.grad is None:
                raise RuntimeError(f"parameter {p.name!r} has no gradient buffer (broken graph)")
        self.t += 1
        self.clip_gradients()
        self._update(self.groups.nmt, lr_nmt)
        self._update(self.groups.lm, lr_lm)
        for p in self.groups.all_params():
            p.grad.fill(0.0)

    def _update(self, params: list[Tensor], lr: float) -> None:
        if self.mode == "sgd":
            for p in params:
                p.data -= np.asarray(lr, dtype=p.data.dtype) * p.grad
            return
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in params:
            g = p.grad
            m = self._m[id(p)]
            v = self._v[id(p)]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= np.asarray(lr, dtype=p.data.dtype) * update

    def state(self) -> dict:
        """Serializable optimizer state keyed by group and position."""
        out = {"t": self.t, "mode": self.mode}
        if self.mode == "adam":
            for gname in ("lm", "nmt"):
                params = getattr(self.groups, gname)
                out[f"m_{gname}"] = [self._m[id(p)] for p in params]
                out[f"v_{gname}"] = [self._v[id(p)] for p in params]
        return out

    def load_state(self, state: dict) -> None:
        if state["mode"] != self.mode:
            raise ValueError(f"optimizer mode mismatch: checkpoint {state['mode']!r} vs {self.mode!r}")
        self.t = int(state["t"])
        if self.mode == "adam":
            for gname in ("lm", "nmt"):
                params = getattr(self.groups, gname)
                for p, m, v in zip(params, state[f"m_{gname}"], state[f"v_{gname}"]):
                    self._m[id(p)][...] = m
                    self._v[id(p)][...] = v
