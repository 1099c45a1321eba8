"""Desk-scale NMT with pretrained-LM distillation, gated fusion, and
rate-scheduled two-group training."""

__version__ = "0.1.0"

from .tensor import Tensor, Tape, no_grad, backward, grad_check

__all__ = ["Tensor", "Tape", "no_grad", "backward", "grad_check", "__version__"]
