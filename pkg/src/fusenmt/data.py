"""Vocabulary, corpus loading, token-budget batching, and synthetic tasks."""

from __future__ import annotations

import hashlib
import logging
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK, MASK = 0, 1, 2, 3, 4
RESERVED = ["<pad>", "<bos>", "<eos>", "<unk>", "<mask>"]


class CorpusError(ValueError):
    """Malformed or empty corpus input."""


def stream(seed: int, label: str, *extra: int) -> np.random.Generator:
    """Independent named RNG stream, reproducible across processes."""
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(label.encode()), *extra])


class Vocab:
    """Token <-> id bijection with fixed reserved ids 0..4."""

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[:5]) != RESERVED:
            raise CorpusError(f"vocab must start with the reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise CorpusError("vocab tokens must be unique")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.index.get(w, UNK) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


def build_vocab(corpus: Iterable[Sequence[str]], max_size: Optional[int] = None,
                min_count: int = 1) -> Vocab:
    """Frequency-ranked vocabulary, ties broken lexicographically."""
    counts: dict[str, int] = {}
    n_sentences = 0
    for sent in corpus:
        n_sentences += 1
        for w in sent:
            counts[w] = counts.get(w, 0) + 1
    if n_sentences == 0:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    ranked = sorted((w for w, c in counts.items() if c >= min_count and w not in RESERVED),
                    key=lambda w: (-counts[w], w))
    if max_size is not None:
        ranked = ranked[: max(0, max_size - len(RESERVED))]
    return Vocab(RESERVED + ranked)


def load_parallel(path, max_len: int = 150) -> tuple[list[tuple[list[str], list[str]]], int]:
    """Read TAB-separated sentence pairs; drop overlong ones with a count.

    Returns (pairs, number_dropped). Raises ``CorpusError`` naming the line
    for any row without exactly one TAB or with an empty side.
    """
    pairs = []
    dropped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            n_tabs = line.count("\t")
            if n_tabs != 1:
                raise CorpusError(f"{path}: line {lineno}: expected exactly one TAB, found {n_tabs}")
            src_text, tgt_text = line.split("\t")
            src, tgt = src_text.split(), tgt_text.split()
            if not src or not tgt:
                raise CorpusError(f"{path}: line {lineno}: empty side of the pair")
            if len(src) > max_len or len(tgt) > max_len:
                dropped += 1
                continue
            pairs.append((src, tgt))
    if dropped:
        log.warning("%s: dropped %d pair(s) longer than %d tokens", path, dropped, max_len)
    return pairs, dropped


def load_mono(path, max_len: int = 150) -> list[list[str]]:
    sentences = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            words = line.split()
            if words and len(words) <= max_len:
                sentences.append(words)
    if not sentences:
        raise CorpusError(f"{path}: no usable sentences")
    return sentences


def save_parallel(pairs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for src, tgt in pairs:
            fh.write(" ".join(src) + "\t" + " ".join(tgt) + "\n")


def save_mono(sentences, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sent in sentences:
            fh.write(" ".join(sent) + "\n")


@dataclass
class Batch:
    """Padded id matrices for one training step.

    ``src`` carries a trailing EOS; ``tgt_in``/``tgt_out`` are the
    BOS-shifted decoder input and the EOS-terminated targets.
    """

    src: np.ndarray        # [B, S] int
    tgt_in: np.ndarray     # [B, T] int
    tgt_out: np.ndarray    # [B, T] int
    src_mask: np.ndarray   # [B, S] float, 1 = real
    tgt_mask: np.ndarray   # [B, T] float, 1 = real
    n_pairs: int
    n_src_tokens: int
    n_tgt_tokens: int


def _pad(rows: list[list[int]]) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
    return out


def _assemble(group: list[tuple[list[int], list[int]]]) -> Batch:
    src_rows = [s + [EOS] for s, _ in group]
    tin_rows = [[BOS] + t for _, t in group]
    tout_rows = [t + [EOS] for _, t in group]
    src = _pad(src_rows)
    tgt_in = _pad(tin_rows)
    tgt_out = _pad(tout_rows)
    return Batch(
        src=src, tgt_in=tgt_in, tgt_out=tgt_out,
        src_mask=(src != PAD).astype(np.float32),
        tgt_mask=(tgt_out != PAD).astype(np.float32),
        n_pairs=len(group),
        n_src_tokens=sum(len(s) for s, _ in group),
        n_tgt_tokens=sum(len(t) for _, t in group),
    )


def make_batches(pairs, src_vocab: Vocab, tgt_vocab: Vocab, token_budget: int,
                 seed: int, epoch: int = 0) -> list[Batch]:
    """Length-sorted, budget-bounded batches in a seeded per-epoch order.

    Every pair appears exactly once; a batch may exceed the budget only when
    it holds a single oversized pair.
    """
    encoded = [(src_vocab.encode(s), tgt_vocab.encode(t)) for s, t in pairs]
    order = sorted(range(len(encoded)), key=lambda i: len(encoded[i][0]))
    groups: list[list] = []
    current: list = []
    current_tokens = 0
    for i in order:
        s, t = encoded[i]
        cost = len(s) + len(t)
        if current and current_tokens + cost > token_budget:
            groups.append(current)
            current, current_tokens = [], 0
        current.append((s, t))
        current_tokens += cost
    if current:
        groups.append(current)
    rng = stream(seed, "batch-order", epoch)
    rng.shuffle(groups)
    return [_assemble(g) for g in groups]


SYNTH_KINDS = ("copy", "reverse", "lexswap-reorder")


def synth_task(kind: str, n_pairs: int, vocab_size: int, len_range: tuple[int, int],
               seed: int, swap_prob: float = 0.3, identity_lexicon: bool = False,
               mono_factor: int = 10, n_successors: int = 4, chain_prob: float = 0.8):
    """Generate a synthetic parallel corpus plus a monolingual source corpus.

    Source sentences follow a seeded first-order Markov chain (each token has
    ``n_successors`` preferred followers drawn with ``chain_prob``, uniform
    otherwise), so monolingual pretraining has real structure to learn.

    copy: target = source. reverse: target = reversed source.
    lexswap-reorder: target = source through a fixed random bijective lexicon,
    then adjacent pairs swapped with probability ``swap_prob`` (non-overlapping,
    left to right). The monolingual corpus holds ``mono_factor * n_pairs``
    fresh source-side sentences from the same distribution.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic task {kind!r}; choose from {SYNTH_KINDS}")
    if vocab_size <= 10:
        raise ValueError(f"vocab_size must exceed 10, got {vocab_size}")
    lo, hi = len_range
    if not (1 <= lo <= hi):
        raise ValueError(f"bad length range {len_range}")
    words = [f"w{i}" for i in range(vocab_size)]
    rng = stream(seed, "synth", zlib.crc32(kind.encode()))
    successors = stream(seed, "grammar").integers(0, vocab_size, size=(vocab_size, n_successors))

    if identity_lexicon:
        lexicon = {w: w for w in words}
    else:
        shuffled = list(words)
        stream(seed, "lexicon").shuffle(shuffled)
        lexicon = dict(zip(words, shuffled))

    def sentence():
        length = int(rng.integers(lo, hi + 1))
        ids = [int(rng.integers(0, vocab_size))]
        while len(ids) < length:
            if rng.random() < chain_prob:
                ids.append(int(successors[ids[-1], rng.integers(0, n_successors)]))
            else:
                ids.append(int(rng.integers(0, vocab_size)))
        return [words[i] for i in ids]

    def translate(src):
        if kind == "copy":
            return list(src)
        if kind == "reverse":
            return list(reversed(src))
        tgt = [lexicon[w] for w in src]
        i = 0
        while i < len(tgt) - 1:
            if rng.random() < swap_prob:
                tgt[i], tgt[i + 1] = tgt[i + 1], tgt[i]
                i += 2
            else:
                i += 1
        return tgt

    pairs = []
    for _ in range(n_pairs):
        src = sentence()
        pairs.append((src, translate(src)))
    mono = [sentence() for _ in range(mono_factor * n_pairs)]
    return pairs, mono
