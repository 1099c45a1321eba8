"""The three concerted-training mechanisms that couple a pretrained LM to
the translation model:

* a distillation loss pulling a chosen encoder layer toward frozen teacher
  features, mixed into the objective as ``alpha * L_nmt + (1-alpha) * L_kd``;
* a per-token sigmoid switch gate convexly blending teacher features with
  the encoder's own input representation;
* a slanted-triangular factor ``rho(t)`` scaling the LM group's learning
  rate relative to the base rate (ramp to 1 at t', decay to 0 at t_end).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .module import Module, parameter
from .teacher import TeacherFeatures
from .tensor import ShapeError, Tensor, add, matmul, mse, mul, scale, sigmoid, sub

LM_REGIMES = ("sched", "const1", "const0.01", "frozen")


@dataclass
class FusionConfig:
    alpha: float = 0.9
    student_tap_layer: Optional[int] = None   # None: top encoder layer
    teacher_tap_layer: Optional[int] = None   # None: second-to-last teacher layer
    use_ad: bool = False
    use_ds: bool = False
    use_schedule: bool = False
    t_prime: Optional[int] = None             # None: 10% of total steps
    t_end: Optional[int] = None               # None: 20% of total steps
    lm_regime: str = "sched"
    ad_side: str = "encoder"                  # "decoder" is experimental

    def __post_init__(self):
        self.validate()

    def validate(self, num_encoder_layers: Optional[int] = None) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.t_prime is not None and self.t_end is not None and not self.t_prime < self.t_end:
            raise ValueError(f"schedule needs t_prime < t_end, got {self.t_prime} >= {self.t_end}")
        if self.lm_regime not in LM_REGIMES:
            raise ValueError(f"unknown LM-rate regime {self.lm_regime!r}; choose from {LM_REGIMES}")
        if self.ad_side not in ("encoder", "decoder"):
            raise ValueError(f"ad_side must be encoder or decoder, got {self.ad_side!r}")
        if (num_encoder_layers is not None and self.student_tap_layer is not None
                and not 0 <= self.student_tap_layer <= num_encoder_layers):
            raise ValueError(f"student tap layer {self.student_tap_layer} outside [0, {num_encoder_layers}]")

    def resolve_schedule(self, total_steps: int) -> tuple[int, int]:
        """Fill t_prime/t_end from the step budget when unset (10% / 20%)."""
        tp = self.t_prime if self.t_prime is not None else max(1, total_steps // 10)
        te = self.t_end if self.t_end is not None else max(tp + 1, total_steps // 5)
        if not tp < te:
            raise ValueError(f"schedule needs t_prime < t_end, got {tp} >= {te}")
        return tp, te


class TeacherProjection(Module):
    """Maps teacher width onto the model width; identity when they match.

    Lives in the NMT parameter group, so it always trains at the base rate.
    """

    def __init__(self, d_teacher: int, d_model: int, rng: np.random.Generator):
        if d_teacher == d_model:
            w = np.eye(d_model, dtype=np.float32)
        elif d_teacher > d_model:
            q, _ = np.linalg.qr(rng.standard_normal((d_teacher, d_teacher)))
            w = q[:, :d_model].astype(np.float32)
        else:
            w = (rng.standard_normal((d_teacher, d_model)) / np.sqrt(d_teacher)).astype(np.float32)
        self.w = parameter(w, name="proj.w")

    def __call__(self, features: Tensor) -> Tensor:
        return matmul(features, self.w)


class SwitchGate(Module):
    """Parameters of the sigmoid switch; zero init makes the gate start at
    exactly 0.5, i.e. plain elementwise averaging."""

    def __init__(self, d: int):
        self.w = parameter(np.zeros((d, d), dtype=np.float32), name="gate.w")
        self.u = parameter(np.zeros((d, d), dtype=np.float32), name="gate.u")
        self.b = parameter(np.zeros(d, dtype=np.float32), name="gate.b")


def dynamic_switch(h_lm: Tensor, h_nmt: Tensor, gate: SwitchGate) -> Tensor:
    """Per-token, per-dimension convex blend of LM and NMT representations.

    g = sigmoid(h_lm W + h_nmt U + b); returns g*h_lm + (1-g)*h_nmt.
    A hugely negative bias recovers the plain NMT input, a hugely positive
    one feeds the LM features through unchanged.
    """
    if h_lm.shape != h_nmt.shape:
        raise ShapeError(f"dynamic_switch shapes differ: {h_lm.shape} vs {h_nmt.shape}")
    g = sigmoid(add(add(matmul(h_lm, gate.w), matmul(h_nmt, gate.u)), gate.b))
    return add(mul(g, h_lm), mul(sub(Tensor(np.asarray(1.0, dtype=g.data.dtype)), g), h_nmt))


def average_fusion(h_lm: Tensor, h_nmt: Tensor) -> Tensor:
    """Fixed 0.5/0.5 pooling, the gate's init point and ablation baseline."""
    if h_lm.shape != h_nmt.shape:
        raise ShapeError(f"average_fusion shapes differ: {h_lm.shape} vs {h_nmt.shape}")
    return add(scale(h_lm, 0.5), scale(h_nmt, 0.5))


def asymptotic_distillation_loss(teacher: Union[Tensor, TeacherFeatures],
                                 student_state: Tensor,
                                 mask: Optional[np.ndarray] = None) -> Tensor:
    """Masked mean squared error between student states and (projected,
    detached) teacher features. Minimizing it pulls the student toward the
    teacher; gradients never reach the teacher's own values."""
    target = teacher.vectors if isinstance(teacher, TeacherFeatures) else teacher
    if target.shape != student_state.shape:
        raise ShapeError(
            f"distillation needs matching sequences: teacher {target.shape} vs student {student_state.shape}")
    return mse(student_state, target, mask)


def combined_loss(l_nmt: Tensor, l_kd: Tensor, alpha: float) -> Tensor:
    """alpha * L_nmt + (1 - alpha) * L_kd; alpha = 1 disables distillation."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return add(scale(l_nmt, alpha), scale(l_kd, 1.0 - alpha))


def rho(t: int, t_prime: int, t_end: int) -> float:
    """Slanted-triangular factor: 0 -> 1 over [0, t'], 1 -> 0 over [t', t_end],
    exactly 0 afterwards."""
    if t_prime <= 0 or not t_prime < t_end:
        raise ValueError(f"need 0 < t_prime < t_end, got {t_prime}, {t_end}")
    if t < 0:
        raise ValueError(f"step must be >= 0, got {t}")
    if t <= t_prime:
        return t / t_prime
    if t <= t_end:
        return 1.0 - (t - t_prime) / (t_end - t_prime)
    return 0.0


def lm_learning_rate(t: int, eta_nmt: float, regime: str,
                     t_prime: Optional[int] = None, t_end: Optional[int] = None) -> float:
    """LM-group rate for step t: scheduled rho(t) * eta_nmt, a fixed multiple
    of eta_nmt (1 or 0.01), or 0 for the frozen feature regime."""
    if eta_nmt < 0:
        raise ValueError(f"eta_nmt must be >= 0, got {eta_nmt}")
    if regime == "sched":
        if t_prime is None or t_end is None:
            raise ValueError("scheduled regime needs t_prime and t_end")
        return rho(t, t_prime, t_end) * eta_nmt
    if regime == "const1":
        return eta_nmt
    if regime == "const0.01":
        return 0.01 * eta_nmt
    if regime == "frozen":
        return 0.0
    raise ValueError(f"unknown LM-rate regime {regime!r}; choose from {LM_REGIMES}")
