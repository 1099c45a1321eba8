"""Beam-search decoding, corpus-level BLEU, and the teacher-drift probe."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import BOS, EOS, MASK, PAD
from .tensor import no_grad
from .teacher import TeacherLM, extract_features
from .transformer import TransformerNMT


@dataclass(frozen=True)
class Hypothesis:
    """A (possibly finished) decode path; ids start at BOS, a finished path
    ends with EOS. log_prob only ever decreases as the path grows."""

    ids: tuple
    log_prob: float
    finished: bool

    @property
    def length(self) -> int:
        """Generated tokens (excluding BOS, including EOS when present)."""
        return len(self.ids) - 1


def length_penalty_factor(length: int, penalty: float) -> float:
    """((5 + len) / 6) ** penalty; 1.0 when penalty is 0."""
    return ((5.0 + length) / 6.0) ** penalty


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


class _NmtScorer:
    """Encode once, then score target prefixes in hypothesis batches."""

    def __init__(self, model: TransformerNMT, src_ids: Sequence[int]):
        src = np.asarray(src_ids).reshape(1, -1)
        with no_grad():
            self.enc = model.encode(model.embed_src(src), np.ones(src.shape, dtype=np.float32))
        self.model = model
        self.vocab_size = model.cfg.tgt_vocab

    def next_log_probs(self, prefixes: np.ndarray) -> np.ndarray:
        with no_grad():
            logits = self.model.decode(np.asarray(prefixes), self.enc).logits.data[:, -1, :]
        return _log_softmax_rows(logits)


def beam_search(model, src_ids: Sequence[int], beam_width: int = 8,
                length_penalty: float = 0.6, max_len: int = 32,
                bos_id: int = BOS, eos_id: int = EOS,
                forbidden_ids: Sequence[int] = (PAD, BOS, MASK)) -> list[int]:
    """Best decode of one source sentence; returns token ids without BOS/EOS.

    Finished hypotheses are ranked by log_prob / ((5+len)/6)^penalty and any
    hypothesis that ever enters the beam is remembered; with no finished
    candidate by ``max_len`` the best live prefix wins. Ties break toward
    the lower token id, then the shorter hypothesis. Width 1 is exactly
    greedy decoding.
    """
    if beam_width < 1:
        raise ValueError(f"beam width must be >= 1, got {beam_width}")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    if len(src_ids) == 0:
        raise ValueError("beam search needs a nonempty source")
    scorer = _NmtScorer(model, src_ids) if isinstance(model, TransformerNMT) else model

    beams = [Hypothesis((bos_id,), 0.0, False)]
    finished_pool: dict[tuple, Hypothesis] = {}
    for _ in range(max_len):
        live = [h for h in beams if not h.finished]
        if not live:
            break
        logp = scorer.next_log_probs(np.array([h.ids for h in live], dtype=np.int64))
        if forbidden_ids:
            logp[:, list(forbidden_ids)] = -np.inf

        candidates = [h for h in beams if h.finished]
        for i, h in enumerate(live):
            for tok in range(logp.shape[1]):
                lp = float(logp[i, tok])
                if lp == -np.inf:
                    continue
                candidates.append(Hypothesis(h.ids + (tok,), h.log_prob + lp, tok == eos_id))
        candidates.sort(key=lambda h: (-h.log_prob, h.ids[-1], h.length))
        beams = candidates[:beam_width]
        for h in beams:
            if h.finished:
                finished_pool.setdefault(h.ids, h)

    def scored(h: Hypothesis) -> float:
        return h.log_prob / length_penalty_factor(h.length, length_penalty)

    pool = list(finished_pool.values()) or beams
    best = min(pool, key=lambda h: (-scored(h), h.ids, h.length))
    out = list(best.ids[1:])
    if out and out[-1] == eos_id:
        out.pop()
    return out


def greedy_decode(model, src_ids: Sequence[int], max_len: int = 32) -> list[int]:
    return beam_search(model, src_ids, beam_width=1, length_penalty=0.0, max_len=max_len)


# ---------------------------------------------------------------------------
# BLEU


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _tokens(sentence) -> list[str]:
    return sentence.split() if isinstance(sentence, str) else list(sentence)


def bleu(hypotheses: Iterable, references: Iterable, max_n: int = 4) -> float:
    """Corpus-level case-sensitive BLEU on pre-tokenized text, in [0, 100].

    Geometric mean of clipped n-gram precisions (n = 1..4) times the brevity
    penalty min(1, e^(1 - ref_len/hyp_len)); 0 if any precision is 0 (no
    smoothing). Inputs are sentences as token lists or whitespace-split
    strings, one reference per hypothesis.
    """
    hyps = [_tokens(h) for h in hypotheses]
    refs = [_tokens(r) for r in references]
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not refs or any(len(r) == 0 for r in refs):
        raise ValueError("references must be nonempty")

    hyp_len = sum(len(h) for h in hyps)
    ref_len = sum(len(r) for r in refs)
    if hyp_len == 0:
        return 0.0

    log_precisions = []
    for n in range(1, max_n + 1):
        matches = 0
        total = 0
        for h, r in zip(hyps, refs):
            counts = _ngrams(h, n)
            ref_counts = _ngrams(r, n)
            matches += sum(min(c, ref_counts[g]) for g, c in counts.items())
            total += max(0, len(h) - n + 1)
        if matches == 0 or total == 0:
            return 0.0
        log_precisions.append(math.log(matches / total))

    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(sum(log_precisions) / max_n)


# ---------------------------------------------------------------------------
# teacher drift


def teacher_drift(model: Optional[TransformerNMT], teacher: TeacherLM, probe_batches,
                  *, snapshot: Optional[TeacherLM] = None,
                  projection=None, student_tap: Optional[int] = None,
                  teacher_tap: Optional[int] = None) -> float:
    """How far training has moved things, measured on a probe corpus.

    With ``snapshot`` (a copy of the teacher from before fine-tuning): mean
    squared difference between current and snapshot teacher features, i.e.
    how much pretrained knowledge the fine-tuned teacher has lost. A frozen
    teacher yields exactly 0.

    Without ``snapshot``: the mean distillation gap between the model's
    tapped encoder state and the (projected) teacher features.
    """
    probe_batches = list(probe_batches)
    if not probe_batches:
        raise ValueError("teacher drift needs a nonempty probe corpus")

    total = 0.0
    count = 0
    for batch in probe_batches:
        mask = batch.src_mask
        if snapshot is not None:
            now = extract_features(teacher, batch.src, teacher_tap, mask).vectors.data
            then = extract_features(snapshot, batch.src, teacher_tap, mask).vectors.data
            diff = now - then
        else:
            if model is None:
                raise ValueError("distillation-gap mode needs the model")
            feats = extract_features(teacher, batch.src, teacher_tap, mask)
            target = feats.vectors.data
            if projection is not None:
                target = target @ projection.w.data
            with no_grad():
                enc = model.encode(model.embed_src(batch.src), mask)
            tap = student_tap if student_tap is not None else len(enc.states) - 1
            diff = enc.states[tap].data - target
        w = mask[..., None]
        total += float(((diff * diff) * w).sum())
        count += int(mask.sum()) * diff.shape[-1]
    return total / count
