"""Dense float tensors with tape-recorded reverse-mode autodiff.

The tape is define-by-run: while a ``Tape`` is active, every differentiable
op appends one record (inputs, output, backward closure) in execution order.
``backward(loss)`` replays the records in reverse, accumulating gradients into
the ``grad`` buffers of leaf tensors that require gradients.

Forward arithmetic is float32 by default; ``grad_check`` re-runs the function
under test in a float64 shadow so central finite differences are meaningful.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf, expit


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


class Tensor:
    """N-dimensional array of floats, optionally tracked for gradients.

    ``grad`` is allocated (zeros) iff ``requires_grad`` is set, and always
    has the same shape as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):
            self.data = np.asarray(data)  # 0-d op results arrive as numpy scalars
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def detach(self) -> "Tensor":
        """Constant view of this tensor's values, cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    # Operator sugar; python scalars are promoted to constants of matching dtype.
    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        return sub(self, self._coerce(other))

    def __rsub__(self, other):
        return sub(self._coerce(other), self)

    def __mul__(self, other):
        if not isinstance(other, Tensor):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class OpRecord:
    """One forward op on the tape: where its output grad flows back to."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of ops, rebuilt each training step (define-by-run).

    Records are appended in execution order, which is a valid topological
    order; ``backward`` visits each record exactly once, in reverse.
    """

    _stack: list = []

    def __init__(self):
        self.records: list[OpRecord] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    @staticmethod
    def active() -> Optional["Tape"]:
        if _NO_GRAD_DEPTH[0] > 0:
            return None
        return Tape._stack[-1] if Tape._stack else None

    def __len__(self):
        return len(self.records)


_NO_GRAD_DEPTH = [0]


class no_grad:
    """Context manager suppressing tape recording (feature extraction, eval)."""

    def __enter__(self):
        _NO_GRAD_DEPTH[0] += 1
        return self

    def __exit__(self, *exc):
        _NO_GRAD_DEPTH[0] -= 1
        return False


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    tape = Tape.active()
    out = Tensor(out_data)
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.grad = None  # intermediate grads live in backward's scratch map
        out._tape = tape
        tape.records.append(OpRecord(op, inputs, out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape`` (trailing-dim rules)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _record("mul", (a, b), out, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    out = x.data * np.asarray(c, dtype=x.data.dtype)

    def bwd(g):
        return (g * np.asarray(c, dtype=g.dtype),)

    return _record("scale", (x,), out, bwd)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _record("sigmoid", (x,), s, bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    pos = x.data > 0

    def bwd(g):
        return (g * pos,)

    return _record("relu", (x,), out, bwd)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """x * Phi(x) with the exact Gaussian CDF (erf form)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(xd.dtype)

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return _record("gelu", (x,), out, bwd)


_ELEMENTWISE = {}


def elementwise(kind: str, *inputs):
    """Dispatch one of {add, sub, mul, sigmoid, relu, gelu, scale} by name."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*inputs)


_ELEMENTWISE.update(add=add, sub=sub, mul=mul, sigmoid=sigmoid, relu=relu,
                    gelu=gelu, scale=scale)


# ---------------------------------------------------------------------------
# shape / structure ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = x.data.reshape(shape)
    orig = x.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _record("reshape", (x,), out, bwd)


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inv),)

    return _record("permute", (x,), out, bwd)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.data.ndim < 2:
        raise ShapeError(f"transpose needs >= 2 dims, got shape {x.shape}")
    axes = list(range(x.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)
    shape = x.shape

    def bwd(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum_all", (x,), out, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Supported layouts: 2D @ 2D, ND @ 2D (shared right operand), and
    ND @ ND with identical leading dims (batched).
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs >= 2 dims, got {a.shape} @ {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if bd.ndim > 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul leading dims disagree: {a.shape} @ {b.shape}")
    out = ad @ bd

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _record("matmul", (a, b), out, bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Normalized exponentials along ``axis``, max-subtracted for stability."""
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _record("softmax", (x,), s, bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-vector normalization of the last axis followed by gain/bias affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},), got {gain.shape}/{bias.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = (x.data - mean) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _record("layer_norm", (x, gain, bias), out, bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` by integer id; grads scatter-add back."""
    ids = np.asarray(ids)
    vocab = table.shape[0]
    bad = (ids < 0) | (ids >= vocab)
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise IndexError(f"embedding id {int(ids[pos])} out of range [0, {vocab}) at position {pos}")
    out = table.data[ids]

    def bwd(g):
        dtable = np.zeros_like(table.data)
        np.add.at(dtable, ids, g)
        return (dtable,)

    return _record("embedding_lookup", (table,), out, bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is 0."""
    if rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype)
    keep *= np.asarray(1.0 / (1.0 - rate), dtype=x.data.dtype)
    out = x.data * keep

    def bwd(g):
        return (g * keep,)

    return _record("dropout", (x,), out, bwd)


# ---------------------------------------------------------------------------
# loss ops


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy_smoothed(logits: Tensor, targets, epsilon: float, pad_id: int) -> Tensor:
    """Label-smoothed NLL, averaged over non-pad positions.

    The true class carries weight 1-epsilon; epsilon spreads uniformly over
    the remaining V-1 classes. Positions whose target equals ``pad_id`` are
    excluded from both the sum and the denominator.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon}")
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    flat = logits.data.reshape(-1, vocab)
    tflat = targets.reshape(-1)
    if tflat.shape[0] != flat.shape[0]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    valid = tflat != pad_id
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy_smoothed: every position is padding (empty loss)")

    lp = _log_softmax(flat[valid])
    rows = np.arange(n_valid)
    tv = tflat[valid]
    true_lp = lp[rows, tv]
    if epsilon == 0.0:
        losses = -true_lp
    else:
        off = epsilon / (vocab - 1)
        losses = -(1.0 - epsilon) * true_lp - off * (lp.sum(axis=-1) - true_lp)
    out = np.asarray(losses.mean(), dtype=logits.data.dtype)

    def bwd(g):
        probs = np.exp(lp)
        q = np.full_like(probs, epsilon / (vocab - 1) if epsilon > 0 else 0.0)
        q[rows, tv] = 1.0 - epsilon
        dvalid = (probs - q) * (g / n_valid)
        dflat = np.zeros_like(flat)
        dflat[valid] = dvalid
        return (dflat.reshape(logits.shape),)

    return _record("cross_entropy_smoothed", (logits,), out, bwd)


def mse(a: Tensor, b: Tensor, mask=None) -> Tensor:
    """Mean squared difference over unmasked positions and all feature dims.

    ``mask`` (1 = keep), when given, aligns with the leading axes of ``a``;
    trailing axes are treated as feature dims and always averaged.
    """
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ, {a.shape} vs {b.shape}")
    diff = a.data - b.data
    if mask is None:
        denom = diff.size
        mexp = None
    else:
        mask = np.asarray(mask, dtype=a.data.dtype)
        if mask.shape != a.shape[: mask.ndim]:
            raise ShapeError(f"mse mask {mask.shape} does not align with leading axes of {a.shape}")
        kept = float(mask.sum())
        if kept == 0:
            raise ValueError("mse: mask keeps no positions (empty loss)")
        trailing = int(np.prod(a.shape[mask.ndim:], dtype=np.int64))
        denom = kept * trailing
        mexp = mask.reshape(mask.shape + (1,) * (diff.ndim - mask.ndim))
        diff = diff * mexp
    out = np.asarray((diff * diff).sum() / denom, dtype=a.data.dtype)

    def bwd(g):
        da = diff * (2.0 * g / denom)
        # diff is already masked, so pad positions get exact zero grad
        return da, -da

    return _record("mse", (a, b), out, bwd)


# ---------------------------------------------------------------------------
# backward and verification


def backward(loss: Tensor) -> None:
    """Reverse-mode gradient of a scalar loss into all reachable leaves.

    Leaf tensors with ``requires_grad`` accumulate into their ``grad``
    buffers; leaves not reachable from ``loss`` are left at zero.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("loss is not on a tape (was it computed inside `with Tape():`?)")

    scratch: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(rec.output) for rec in tape.records}
    for rec in reversed(tape.records):
        g = scratch.pop(id(rec.output), None)
        if g is None:
            continue
        grads = rec.backward_fn(g)
        for inp, gi in zip(rec.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if id(inp) in produced:
                acc = scratch.get(id(inp))
                if acc is None:
                    # backward fns may pass g through or return a view of it;
                    # copy before the entry can be mutated by accumulation
                    if gi is g or gi.base is not None:
                        gi = gi.copy()
                    scratch[id(inp)] = gi
                else:
                    acc += gi
            else:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi


def grad_check(fn: Callable[..., Tensor], inputs: Iterable[Tensor], eps: float = 1e-3) -> float:
    """Compare tape gradients of a scalar function against central differences.

    Runs in a float64 shadow copy of ``inputs`` (32-bit differences are too
    noisy). Returns the max of |a - n| / max(|a|, |n|, 1e-6) over all
    coordinates of all inputs.
    """
    shadow = [Tensor(t.data.astype(np.float64), requires_grad=True, name=t.name) for t in inputs]
    with Tape():
        out = fn(*shadow)
    backward(out)

    def eval_fn() -> float:
        with no_grad():
            return float(fn(*shadow).data)

    worst = 0.0
    for t in shadow:
        analytic = t.grad.copy()
        numeric = np.zeros_like(analytic)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = eval_fn()
            flat[i] = orig - eps
            down = eval_fn()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst


OP_NAMES = (
    "matmul", "add", "sub", "mul", "scale", "sigmoid", "relu", "gelu",
    "softmax", "layer_norm", "embedding_lookup", "cross_entropy_smoothed",
    "mse", "reshape", "permute", "sum_all", "dropout",
)
