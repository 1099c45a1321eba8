"""Transformer encoder-decoder for translation.

Pre-norm residual blocks; the encoder exposes every layer's state so a
distillation loss can tap any of them, and ``encode`` accepts an arbitrary
input representation so a fused (gated) embedding can be injected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .module import Module, parameter, xavier
from .tensor import (
    ShapeError, Tape, Tensor, add, cross_entropy_smoothed, dropout,
    embedding_lookup, layer_norm, matmul, mul, permute, relu, reshape, scale,
    softmax,
)

NEG_INF = -1e9


@dataclass
class NmtConfig:
    src_vocab: int
    tgt_vocab: int
    num_layers: int = 3
    d_model: int = 128
    num_heads: int = 4
    d_ff: int = 0  # 0 means 4 * d_model
    dropout: float = 0.1
    max_len: int = 64

    def __post_init__(self):
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_model
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.d_model % self.num_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")


@dataclass
class EncoderOutput:
    """states[0] is the (possibly fused) input representation; states[l]
    is the residual stream after encoder layer l. Exactly L+1 entries."""

    states: list
    pad_mask: np.ndarray  # [B, S], 1 = real token

    @property
    def top(self) -> Tensor:
        return self.states[-1]


@dataclass
class DecoderOutput:
    states: list
    logits: Tensor  # [B, T, tgt_vocab]


def positional_encoding(length: int, d: int) -> np.ndarray:
    """Sinusoidal position table, sin/cos interleaved, period 10000^(2i/d)."""
    if d % 2 != 0:
        raise ValueError(f"positional encoding needs even width, got {d}")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d)
    pe = np.empty((length, d), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe.astype(np.float32)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray],
                         num_heads: int) -> Tensor:
    """Scaled dot-product attention over ``num_heads`` head slices.

    q/k/v are already projected, shaped [B, T, d] (or [T, d], treated as one
    batch row). ``mask`` is additive (0 keeps, -1e9 hides), broadcastable to
    [B, heads, Tq, Tk]. Query rows with every key hidden yield zero vectors.
    """
    squeeze = q.data.ndim == 2
    if squeeze:
        q = reshape(q, (1,) + q.shape)
        k = reshape(k, (1,) + k.shape)
        v = reshape(v, (1,) + v.shape)
    b, tq, d = q.shape
    tk = k.shape[1]
    if d % num_heads != 0:
        raise ShapeError(f"width {d} not divisible by {num_heads} heads")
    if k.shape != (b, tk, d) or v.shape != (b, tk, d):
        raise ShapeError(f"attention shapes disagree: q{q.shape} k{k.shape} v{v.shape}")
    dh = d // num_heads

    qh = permute(reshape(q, (b, tq, num_heads, dh)), (0, 2, 1, 3))
    kh = permute(reshape(k, (b, tk, num_heads, dh)), (0, 2, 1, 3))
    vh = permute(reshape(v, (b, tk, num_heads, dh)), (0, 2, 1, 3))

    scores = scale(matmul(qh, permute(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = add(scores, Tensor(np.asarray(mask, dtype=scores.data.dtype)))
    attn = softmax(scores, axis=-1)
    out = matmul(attn, vh)

    if mask is not None:
        # a fully-hidden query row softmaxes to uniform garbage; zero it out
        full = np.broadcast_to(mask, (b, num_heads, tq, tk))
        alive = (full > NEG_INF / 2).any(axis=-1, keepdims=True)
        if not alive.all():
            out = mul(out, Tensor(alive.astype(out.data.dtype)))

    merged = reshape(permute(out, (0, 2, 1, 3)), (b, tq, d))
    if squeeze:
        merged = reshape(merged, (tq, d))
    return merged


class LayerNorm(Module):
    def __init__(self, d: int, name: str = "ln"):
        self.gain = parameter(np.ones(d, dtype=np.float32), name=f"{name}.gain")
        self.bias = parameter(np.zeros(d, dtype=np.float32), name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class Attention(Module):
    """Projection wrapper around multi_head_attention (q/k/v/out maps)."""

    def __init__(self, d: int, num_heads: int, rng: np.random.Generator, name: str):
        self.num_heads = num_heads
        self.wq = parameter(xavier(rng, d, d), name=f"{name}.wq")
        self.wk = parameter(xavier(rng, d, d), name=f"{name}.wk")
        self.wv = parameter(xavier(rng, d, d), name=f"{name}.wv")
        self.wo = parameter(xavier(rng, d, d), name=f"{name}.wo")

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor,
                 mask: Optional[np.ndarray]) -> Tensor:
        ctx = multi_head_attention(matmul(q_in, self.wq), matmul(k_in, self.wk),
                                   matmul(v_in, self.wv), mask, self.num_heads)
        return matmul(ctx, self.wo)


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator, name: str):
        self.w1 = parameter(xavier(rng, d, d_ff), name=f"{name}.w1")
        self.b1 = parameter(np.zeros(d_ff, dtype=np.float32), name=f"{name}.b1")
        self.w2 = parameter(xavier(rng, d_ff, d), name=f"{name}.w2")
        self.b2 = parameter(np.zeros(d, dtype=np.float32), name=f"{name}.b2")

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(relu(add(matmul(x, self.w1), self.b1)), self.w2), self.b2)


class EncoderLayer(Module):
    def __init__(self, cfg: NmtConfig, rng: np.random.Generator, name: str):
        self.norm1 = LayerNorm(cfg.d_model, f"{name}.norm1")
        self.attn = Attention(cfg.d_model, cfg.num_heads, rng, f"{name}.attn")
        self.norm2 = LayerNorm(cfg.d_model, f"{name}.norm2")
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng, f"{name}.ffn")
        self.rate = cfg.dropout

    def __call__(self, x: Tensor, mask: Optional[np.ndarray],
                 rng: Optional[np.random.Generator]) -> Tensor:
        h = self.norm1(x)
        x = add(x, self._drop(self.attn(h, h, h, mask), rng))
        x = add(x, self._drop(self.ffn(self.norm2(x)), rng))
        return x

    def _drop(self, x: Tensor, rng) -> Tensor:
        return dropout(x, self.rate, rng) if rng is not None else x


class DecoderLayer(Module):
    def __init__(self, cfg: NmtConfig, rng: np.random.Generator, name: str):
        self.norm1 = LayerNorm(cfg.d_model, f"{name}.norm1")
        self.self_attn = Attention(cfg.d_model, cfg.num_heads, rng, f"{name}.self_attn")
        self.norm2 = LayerNorm(cfg.d_model, f"{name}.norm2")
        self.cross_attn = Attention(cfg.d_model, cfg.num_heads, rng, f"{name}.cross_attn")
        self.norm3 = LayerNorm(cfg.d_model, f"{name}.norm3")
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng, f"{name}.ffn")
        self.rate = cfg.dropout

    def __call__(self, x: Tensor, memory: Tensor, causal_mask: np.ndarray,
                 memory_mask: Optional[np.ndarray],
                 rng: Optional[np.random.Generator]) -> Tensor:
        h = self.norm1(x)
        x = add(x, self._drop(self.self_attn(h, h, h, causal_mask), rng))
        h = self.norm2(x)
        x = add(x, self._drop(self.cross_attn(h, memory, memory, memory_mask), rng))
        x = add(x, self._drop(self.ffn(self.norm3(x)), rng))
        return x

    def _drop(self, x: Tensor, rng) -> Tensor:
        return dropout(x, self.rate, rng) if rng is not None else x


def pad_key_mask(pad_mask: np.ndarray) -> np.ndarray:
    """[B, S] validity -> additive key mask [B, 1, 1, S]."""
    m = np.asarray(pad_mask, dtype=np.float32)
    return ((1.0 - m) * NEG_INF)[:, None, None, :]


def causal_mask(t: int) -> np.ndarray:
    """Additive [1, 1, T, T] mask hiding strictly-future positions."""
    hide = np.triu(np.full((t, t), NEG_INF, dtype=np.float32), k=1)
    return hide[None, None, :, :]


class TransformerNMT(Module):
    """Encoder-decoder with per-layer encoder states and injectable input."""

    def __init__(self, cfg: NmtConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_model
        init = 1.0 / math.sqrt(d)
        self.src_embed = parameter((rng.standard_normal((cfg.src_vocab, d)) * init).astype(np.float32),
                                   name="src_embed")
        self.tgt_embed = parameter((rng.standard_normal((cfg.tgt_vocab, d)) * init).astype(np.float32),
                                   name="tgt_embed")
        self.enc_layers = [EncoderLayer(cfg, rng, f"enc.{i}") for i in range(cfg.num_layers)]
        self.enc_norm = LayerNorm(d, "enc_norm")
        self.dec_layers = [DecoderLayer(cfg, rng, f"dec.{i}") for i in range(cfg.num_layers)]
        self.dec_norm = LayerNorm(d, "dec_norm")
        self.w_out = parameter(xavier(rng, d, cfg.tgt_vocab), name="w_out")
        self.b_out = parameter(np.zeros(cfg.tgt_vocab, dtype=np.float32), name="b_out")
        self._pe = positional_encoding(cfg.max_len, d)

    # -- embedding ---------------------------------------------------------

    def _embed(self, table: Tensor, ids: np.ndarray) -> Tensor:
        ids = np.atleast_2d(np.asarray(ids))
        t = ids.shape[1]
        if t > self.cfg.max_len:
            raise ValueError(f"sequence length {t} exceeds max length {self.cfg.max_len}")
        emb = scale(embedding_lookup(table, ids), math.sqrt(self.cfg.d_model))
        return add(emb, Tensor(self._pe[None, :t, :]))

    def embed_src(self, src_ids: np.ndarray) -> Tensor:
        """[B, S] ids -> scaled embeddings + positions, the encoder's default input."""
        return self._embed(self.src_embed, src_ids)

    def embed_tgt(self, tgt_ids: np.ndarray) -> Tensor:
        return self._embed(self.tgt_embed, tgt_ids)

    # -- encoder / decoder -------------------------------------------------

    def encode(self, input_repr: Tensor, pad_mask: np.ndarray,
               rng: Optional[np.random.Generator] = None) -> EncoderOutput:
        """Run the encoder stack over an input representation [B, S, d].

        Returns all layer states: states[0] is ``input_repr`` itself,
        states[l] the output of layer l. Pad positions are hidden from
        attention via ``pad_mask`` (1 = real).
        """
        b, s, d = input_repr.shape
        if s > self.cfg.max_len:
            raise ValueError(f"sequence length {s} exceeds max length {self.cfg.max_len}")
        mask = pad_key_mask(pad_mask)
        states = [input_repr]
        x = dropout(input_repr, self.cfg.dropout, rng) if rng is not None else input_repr
        for layer in self.enc_layers:
            x = layer(x, mask, rng)
            states.append(x)
        return EncoderOutput(states=states, pad_mask=np.asarray(pad_mask))

    def memory(self, enc: EncoderOutput) -> Tensor:
        """Normalized top encoder state consumed by decoder cross-attention."""
        return self.enc_norm(enc.top)

    def decode(self, tgt_prefix_ids: np.ndarray, enc: EncoderOutput,
               rng: Optional[np.random.Generator] = None) -> DecoderOutput:
        """Causal decode of a target prefix against encoded source memory."""
        tgt_prefix_ids = np.atleast_2d(np.asarray(tgt_prefix_ids))
        b, t = tgt_prefix_ids.shape
        if t == 0:
            raise ValueError("decode needs a nonempty target prefix")
        memory = self.memory(enc)
        if memory.shape[0] == 1 and b > 1:
            # decoding fans one source out to a batch of hypotheses; the
            # constant copy is only legal outside gradient recording
            if Tape.active() is not None:
                raise ShapeError("cannot broadcast encoder memory across a batch while recording")
            memory = Tensor(np.broadcast_to(memory.data, (b,) + memory.shape[1:]).copy())
        elif memory.shape[0] != b:
            raise ShapeError(f"batch mismatch: encoder {memory.shape[0]} vs prefix {b}")
        cmask = causal_mask(t)
        mem_mask = pad_key_mask(enc.pad_mask)

        x = self._embed(self.tgt_embed, tgt_prefix_ids)
        x = dropout(x, self.cfg.dropout, rng) if rng is not None else x
        states = []
        for layer in self.dec_layers:
            x = layer(x, memory, cmask, mem_mask, rng)
            states.append(x)
        logits = add(matmul(self.dec_norm(x), self.w_out), self.b_out)
        return DecoderOutput(states=states, logits=logits)

    def nmt_loss(self, dec: DecoderOutput, target_ids: np.ndarray,
                 epsilon: float, pad_id: int) -> Tensor:
        """Label-smoothed negative log-likelihood of the shifted targets."""
        return cross_entropy_smoothed(dec.logits, np.atleast_2d(target_ids), epsilon, pad_id)
