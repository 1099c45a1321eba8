"""Toy pretrained language model used as the frozen (or slow-updated) teacher.

A transformer encoder trained on monolingual source text with either a
masked-token objective (bidirectional) or next-token prediction (causal),
then queried for per-token feature vectors from a chosen layer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import EOS, MASK, PAD, CorpusError, Vocab, stream
from .module import Module, parameter, xavier
from .optim import Optimizer, ParamGroups
from .tensor import (
    Tape, Tensor, add, backward, cross_entropy_smoothed, dropout,
    embedding_lookup, matmul, no_grad, scale,
)
from .transformer import EncoderLayer, LayerNorm, NmtConfig, causal_mask, pad_key_mask, positional_encoding

log = logging.getLogger(__name__)

N_SPECIALS = 5  # reserved ids never drawn as random replacements


@dataclass
class TeacherConfig:
    directionality: str = "bidirectional"  # or "causal"
    num_layers: int = 4
    d_model: int = 128
    num_heads: int = 4
    d_ff: int = 0
    dropout: float = 0.1
    mask_prob: float = 0.15
    pretrain_steps: int = 1000
    pretrain_lr: float = 3e-4
    token_budget: int = 2048
    max_len: int = 64

    def __post_init__(self):
        if self.directionality not in ("bidirectional", "causal"):
            raise ValueError(f"directionality must be bidirectional or causal, got {self.directionality!r}")
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_model
        if self.d_model % self.num_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")


@dataclass
class TeacherFeatures:
    """Per-token hidden vectors from one teacher layer, detached constants."""

    vectors: Tensor        # [B, m, d_teacher]
    layer_index: int
    pad_mask: np.ndarray   # [B, m]


class TeacherLM(Module):
    def __init__(self, cfg: TeacherConfig, vocab_size: int, rng: np.random.Generator):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.mode = "frozen"
        d = cfg.d_model
        self.embed = parameter((rng.standard_normal((vocab_size, d)) / math.sqrt(d)).astype(np.float32),
                               name="embed")
        self.layers = [EncoderLayer(self._layer_cfg(), rng, f"layer.{i}") for i in range(cfg.num_layers)]
        self.out_norm = LayerNorm(d, "out_norm")
        self.w_out = parameter(xavier(rng, d, vocab_size), name="w_out")
        self.b_out = parameter(np.zeros(vocab_size, dtype=np.float32), name="b_out")
        self._pe = positional_encoding(cfg.max_len, d)

    def _layer_cfg(self) -> NmtConfig:
        c = self.cfg
        return NmtConfig(src_vocab=1, tgt_vocab=1, num_layers=1, d_model=c.d_model,
                         num_heads=c.num_heads, d_ff=c.d_ff, dropout=c.dropout,
                         max_len=c.max_len)

    def forward_states(self, token_ids: np.ndarray, pad_mask: np.ndarray,
                       rng: Optional[np.random.Generator] = None) -> list:
        """All residual-stream states [embedding, layer 1, ..., layer L]."""
        ids = np.atleast_2d(np.asarray(token_ids))
        t = ids.shape[1]
        if t > self.cfg.max_len:
            raise ValueError(f"sequence length {t} exceeds teacher max length {self.cfg.max_len}")
        mask = pad_key_mask(pad_mask)
        if self.cfg.directionality == "causal":
            mask = mask + causal_mask(t)
        x = add(scale(embedding_lookup(self.embed, ids), math.sqrt(self.cfg.d_model)),
                Tensor(self._pe[None, :t, :]))
        states = [x]
        x = dropout(x, self.cfg.dropout, rng) if rng is not None else x
        for layer in self.layers:
            x = layer(x, mask, rng)
            states.append(x)
        return states

    def logits(self, states: list) -> Tensor:
        return add(matmul(self.out_norm(states[-1]), self.w_out), self.b_out)


def teacher_mode(teacher: TeacherLM, mode: str) -> None:
    """'frozen' excludes the teacher from optimization; 'trainable' puts its
    parameters in the LM group, updated at the LM rate."""
    if mode in ("trainable-LM-group", "trainable"):
        teacher.mode = "trainable"
    elif mode == "frozen":
        teacher.mode = "frozen"
    else:
        raise ValueError(f"unknown teacher mode {mode!r}")


def extract_features(teacher: TeacherLM, token_ids: np.ndarray,
                     layer_index: Optional[int] = None,
                     pad_mask: Optional[np.ndarray] = None) -> TeacherFeatures:
    """Feature vectors from one layer, computed off-tape and detached.

    ``layer_index`` 0 is the embedding output, L the last layer; the default
    is L-1 (second to last).
    """
    num_layers = teacher.cfg.num_layers
    if layer_index is None:
        layer_index = num_layers - 1
    if not 0 <= layer_index <= num_layers:
        raise ValueError(f"layer index {layer_index} out of range [0, {num_layers}]")
    ids = np.atleast_2d(np.asarray(token_ids))
    if pad_mask is None:
        pad_mask = np.ones(ids.shape, dtype=np.float32)
    with no_grad():
        states = teacher.forward_states(ids, pad_mask)
    return TeacherFeatures(vectors=states[layer_index].detach(), layer_index=layer_index,
                           pad_mask=np.asarray(pad_mask))


# ---------------------------------------------------------------------------
# pretraining


def _mono_batches(sentences, vocab: Vocab, budget: int, seed: int, epoch: int):
    encoded = sorted((vocab.encode(s) + [EOS] for s in sentences), key=len)
    groups, current, tokens = [], [], 0
    for ids in encoded:
        if current and tokens + len(ids) > budget:
            groups.append(current)
            current, tokens = [], 0
        current.append(ids)
        tokens += len(ids)
    if current:
        groups.append(current)
    stream(seed, "teacher-batch-order", epoch).shuffle(groups)
    out = []
    for g in groups:
        width = max(len(r) for r in g)
        ids = np.full((len(g), width), PAD, dtype=np.int64)
        for i, r in enumerate(g):
            ids[i, : len(r)] = r
        out.append(ids)
    return out


def _mask_tokens(ids: np.ndarray, real: np.ndarray, mask_prob: float, vocab_size: int,
                 rng: np.random.Generator):
    """BERT-style corruption: select ~mask_prob of real tokens, replace the
    selection 80% with <mask>, 10% with a random token, 10% unchanged."""
    select = (rng.random(ids.shape) < mask_prob) & real
    if not select.any():
        rows, cols = np.nonzero(real)
        pick = int(rng.integers(0, len(rows)))
        select[rows[pick], cols[pick]] = True
    roll = rng.random(ids.shape)
    corrupted = ids.copy()
    corrupted[select & (roll < 0.8)] = MASK
    random_slot = select & (roll >= 0.8) & (roll < 0.9)
    if random_slot.any():
        corrupted[random_slot] = rng.integers(N_SPECIALS, vocab_size, size=int(random_slot.sum()))
    targets = np.where(select, ids, PAD)
    return corrupted, targets, select


def pretrain_teacher(mono_corpus, vocab: Vocab, config: TeacherConfig, seed: int):
    """Train a teacher on monolingual text; returns (model, summary dict).

    Bidirectional teachers learn to restore masked tokens; causal teachers
    predict the next token under a strictly-past attention mask.
    """
    if not mono_corpus:
        raise CorpusError("teacher pretraining needs a nonempty monolingual corpus")
    if config.directionality == "bidirectional" and config.mask_prob <= 0.0:
        raise ValueError("mask probability 0 leaves the masked-token objective with no supervised positions")

    teacher = TeacherLM(config, len(vocab), stream(seed, "teacher-init"))
    opt = Optimizer(ParamGroups(nmt=teacher.parameters()), mode="adam", clip_norm=1.0)

    batches: list[np.ndarray] = []
    epoch = -1
    pos = 0
    loss_hist: list[float] = []
    acc_hist: list[float] = []
    for step in range(1, config.pretrain_steps + 1):
        if pos >= len(batches):
            epoch += 1
            batches = _mono_batches(mono_corpus, vocab, config.token_budget, seed, epoch)
            pos = 0
        ids = batches[pos]
        pos += 1
        real = ids != PAD
        drop_rng = stream(seed, "teacher-dropout", step) if config.dropout > 0 else None

        with Tape():
            if config.directionality == "bidirectional":
                rng = stream(seed, "mlm", step)
                corrupted, targets, select = _mask_tokens(ids, real, config.mask_prob, len(vocab), rng)
                states = teacher.forward_states(corrupted, real.astype(np.float32), drop_rng)
                logits = teacher.logits(states)
                loss = cross_entropy_smoothed(logits, targets, epsilon=0.0, pad_id=PAD)
                pred = logits.data.argmax(axis=-1)
                acc = float((pred[select] == ids[select]).mean())
            else:
                inp, targets = ids[:, :-1], ids[:, 1:]
                states = teacher.forward_states(inp, (inp != PAD).astype(np.float32), drop_rng)
                logits = teacher.logits(states)
                loss = cross_entropy_smoothed(logits, targets, epsilon=0.0, pad_id=PAD)
                sel = targets != PAD
                acc = float((logits.data.argmax(axis=-1)[sel] == targets[sel]).mean())
        backward(loss)
        opt.step(lr_nmt=config.pretrain_lr, lr_lm=0.0)
        loss_hist.append(float(loss.data))
        acc_hist.append(acc)

    tail = max(1, min(50, len(loss_hist)))
    info = {
        "steps": config.pretrain_steps,
        "final_loss": float(np.mean(loss_hist[-tail:])),
        "masked_accuracy": float(np.mean(acc_hist[-tail:])),
        "loss_history": loss_hist,
    }
    log.info("teacher pretraining done: loss %.4f, accuracy %.3f", info["final_loss"], info["masked_accuracy"])
    return teacher, info
