"""Training orchestration: task preparation, the concerted training loop,
periodic validation, metrics logging, and checkpoint round-trips."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .data import (
    EOS, PAD, Batch, CorpusError, Vocab, build_vocab, load_mono, load_parallel,
    make_batches, stream, synth_task,
)
from .evaluate import beam_search, bleu, teacher_drift
from .fusion import (
    SwitchGate, TeacherProjection, asymptotic_distillation_loss, average_fusion,
    combined_loss, dynamic_switch, lm_learning_rate, rho,
)
from .optim import Optimizer, ParamGroups, nmt_rate
from .teacher import TeacherConfig, TeacherLM, pretrain_teacher
from .tensor import Tape, backward, no_grad
from .transformer import TransformerNMT

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# task preparation


@dataclass
class TaskData:
    train_pairs: list
    val_pairs: list
    test_pairs: list
    mono: list
    src_vocab: Vocab
    tgt_vocab: Vocab


def prepare_task(cfg: ExperimentConfig) -> TaskData:
    """Materialize corpora and vocabularies for a config (synthetic or files)."""
    task = cfg.task
    if task.kind is not None:
        total = task.n_pairs + task.val_pairs + task.test_pairs
        pairs, mono = synth_task(task.kind, total, task.vocab_size, task.len_range,
                                 seed=cfg.seed, swap_prob=task.swap_prob,
                                 n_successors=task.n_successors, chain_prob=task.chain_prob)
        train = pairs[: task.n_pairs]
        val = pairs[task.n_pairs: task.n_pairs + task.val_pairs]
        test = pairs[task.n_pairs + task.val_pairs:]
        mono = mono[: 10 * task.n_pairs]
    else:
        train, _ = load_parallel(task.parallel, task.max_sentence_len)
        val = load_parallel(task.val, task.max_sentence_len)[0] if task.val else []
        test = load_parallel(task.test, task.max_sentence_len)[0] if task.test else []
        mono = load_mono(task.mono, task.max_sentence_len) if task.mono else [s for s, _ in train]
    if not train:
        raise CorpusError("task produced an empty training corpus")
    if task.shared_vocab:
        shared = build_vocab([s for s, _ in train + val + test]
                             + [t for _, t in train + val + test] + mono)
        src_vocab = tgt_vocab = shared
    else:
        src_vocab = build_vocab([s for s, _ in train + val + test] + mono)
        tgt_vocab = build_vocab([t for _, t in train + val + test])
    return TaskData(train, val, test, mono, src_vocab, tgt_vocab)


def pretrain_teacher_for(cfg: ExperimentConfig, data: TaskData):
    """Pretrain the teacher on the task's monolingual corpus."""
    return pretrain_teacher(data.mono, data.src_vocab, cfg.teacher_config(), cfg.seed)


# ---------------------------------------------------------------------------
# metrics


@dataclass
class TrainRecord:
    step: int
    loss: float
    loss_nmt: float
    loss_kd: Optional[float]
    lr_nmt: float
    lr_lm: float
    rho: float
    drift: Optional[float]
    wall_time: float
    val_bleu: Optional[float] = None


class MetricsWriter:
    """Append-only JSON-lines log; every record flushed as one line."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")

    def write(self, record: TrainRecord) -> None:
        self._fh.write(json.dumps(dataclasses.asdict(record)) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


# ---------------------------------------------------------------------------
# the training system


class TranslationSystem:
    """The decodable unit: the NMT model plus whatever feeds its encoder."""

    def __init__(self, model: TransformerNMT, teacher: Optional[TeacherLM] = None,
                 projection: Optional[TeacherProjection] = None,
                 gate: Optional[SwitchGate] = None, feed: str = "none",
                 teacher_tap: Optional[int] = None):
        if feed not in ("none", "switch", "average"):
            raise ValueError(f"unknown feed mode {feed!r}")
        if feed != "none" and (teacher is None or projection is None):
            raise ValueError(f"feed mode {feed!r} needs a teacher and projection")
        if feed == "switch" and gate is None:
            raise ValueError("switch feeding needs gate parameters")
        self.model = model
        self.teacher = teacher
        self.projection = projection
        self.gate = gate
        self.feed = feed
        self.teacher_tap = teacher_tap

    def encoder_input(self, src_ids: np.ndarray, src_mask: np.ndarray,
                      teacher_on_tape: bool = False, want_features: bool = False):
        """(input representation, tapped teacher features or None)."""
        src_repr = self.model.embed_src(src_ids)
        feats = None
        if self.teacher is not None and (self.feed != "none" or want_features):
            if teacher_on_tape:
                states = self.teacher.forward_states(src_ids, src_mask)
            else:
                with no_grad():
                    states = self.teacher.forward_states(src_ids, src_mask)
            tap = self.teacher_tap if self.teacher_tap is not None else self.teacher.cfg.num_layers - 1
            feats = states[tap]
            if not teacher_on_tape:
                feats = feats.detach()
        if self.feed == "none" or feats is None:
            return src_repr, feats
        fed = self.projection(feats)
        if self.feed == "switch":
            return dynamic_switch(fed, src_repr, self.gate), feats
        return average_fusion(fed, src_repr), feats

    def encode_for_decoding(self, src_ids: np.ndarray):
        src_ids = np.atleast_2d(np.asarray(src_ids))
        mask = (src_ids != PAD).astype(np.float32)
        with no_grad():
            repr_, _ = self.encoder_input(src_ids, mask)
            return self.model.encode(repr_, mask)

    def scorer(self, src_ids):
        system = self

        class _Scorer:
            def __init__(self):
                self.enc = system.encode_for_decoding(src_ids)
                self.vocab_size = system.model.cfg.tgt_vocab

            def next_log_probs(self, prefixes):
                with no_grad():
                    logits = system.model.decode(np.asarray(prefixes), self.enc).logits.data[:, -1, :]
                shifted = logits - logits.max(axis=-1, keepdims=True)
                return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

        return _Scorer()

    def translate_ids(self, src_ids, beam: int = 8, length_penalty: float = 0.6,
                      max_len: Optional[int] = None) -> list[int]:
        max_len = max_len or self.model.cfg.max_len
        return beam_search(self.scorer(src_ids), src_ids, beam_width=beam,
                           length_penalty=length_penalty, max_len=max_len)


class Trainer:
    """Owns the model, fusion parameters, optimizer, and the step loop."""

    def __init__(self, cfg: ExperimentConfig, data: TaskData,
                 teacher: Optional[TeacherLM] = None):
        if cfg.needs_teacher and teacher is None:
            raise ConfigError(
                "strategies {ad/ds/sched} need a pretrained teacher checkpoint")
        self.cfg = cfg
        self.data = data
        self.seed = cfg.seed
        self.model = TransformerNMT(cfg.nmt_config(len(data.src_vocab), len(data.tgt_vocab)),
                                    stream(cfg.seed, "model-init"))
        self.teacher = teacher

        fus = cfg.fusion
        self.use_ad = fus.use_ad
        self.alpha = fus.alpha
        self.ad_side = fus.ad_side
        if (self.use_ad and self.ad_side == "decoder"
                and data.tgt_vocab.content_hash() != data.src_vocab.content_hash()):
            raise ConfigError("decoder-side distillation feeds target sentences to the "
                              "teacher, which requires a shared vocabulary "
                              "(set task.shared_vocab)")
        self.student_tap = (fus.student_tap_layer if fus.student_tap_layer is not None
                            else cfg.model.num_layers)
        self.t_prime, self.t_end = fus.resolve_schedule(cfg.training.steps)

        self.projection = None
        self.gate = None
        feed = "none"
        teacher_tap = None
        self.teacher_trainable = False
        self.lm_regime = "frozen"
        if teacher is not None:
            teacher_tap = (fus.teacher_tap_layer if fus.teacher_tap_layer is not None
                           else teacher.cfg.num_layers - 1)
            if not 0 <= teacher_tap <= teacher.cfg.num_layers:
                raise ConfigError(f"teacher tap layer {teacher_tap} outside [0, {teacher.cfg.num_layers}]")
            self.projection = TeacherProjection(teacher.cfg.d_model, cfg.model.d_model,
                                                stream(cfg.seed, "fusion-init"))
            if fus.use_ds:
                feed = "switch"
                self.gate = SwitchGate(cfg.model.d_model)
            elif fus.use_schedule:
                feed = "average"
            if fus.use_schedule:
                self.teacher_trainable = fus.lm_regime != "frozen"
                self.lm_regime = fus.lm_regime
                teacher.mode = "trainable" if self.teacher_trainable else "frozen"

        self.system = TranslationSystem(self.model, teacher, self.projection,
                                        self.gate, feed, teacher_tap)

        self.teacher_snapshot = None
        if self.teacher_trainable:
            self.teacher_snapshot = TeacherLM(teacher.cfg, teacher.vocab_size,
                                              stream(cfg.seed, "snapshot-init"))
            self.teacher_snapshot.copy_values_from(teacher)

        nmt_params = self.model.parameters()
        if self.projection is not None:
            nmt_params += self.projection.parameters()
        if self.gate is not None:
            nmt_params += self.gate.parameters()
        lm_params = teacher.parameters() if self.teacher_trainable else []
        groups = ParamGroups(lm=lm_params, nmt=nmt_params)
        # everything this run trains must be grouped; a frozen teacher is
        # deliberately outside the optimizer
        trainables = self.model.parameters()
        for mod in (self.projection, self.gate):
            if mod is not None:
                trainables += mod.parameters()
        if self.teacher_trainable:
            trainables += teacher.parameters()
        opt_cfg = cfg.optimizer
        self.optimizer = Optimizer(groups, mode=opt_cfg.mode, beta1=opt_cfg.beta1,
                                   beta2=opt_cfg.beta2, eps=opt_cfg.eps,
                                   clip_norm=opt_cfg.clip_norm, trainables=trainables)

        self.step_count = 0
        self.best_bleu = -1.0
        self._batches: list[Batch] = []
        self._batch_pos = 0
        self._epoch = -1
        self._probe = None

    # -- data -------------------------------------------------------------

    def _next_batch(self) -> Batch:
        if self._batch_pos >= len(self._batches):
            self._epoch += 1
            self._batches = make_batches(self.data.train_pairs, self.data.src_vocab,
                                         self.data.tgt_vocab, self.cfg.training.token_budget,
                                         self.seed, self._epoch)
            self._batch_pos = 0
        batch = self._batches[self._batch_pos]
        self._batch_pos += 1
        return batch

    def _fast_forward_data(self, steps_done: int) -> None:
        for _ in range(steps_done):
            self._next_batch()

    def probe_batches(self) -> list[Batch]:
        if self._probe is None:
            pairs = (self.data.val_pairs or self.data.train_pairs)[: self.cfg.training.drift_probe_size]
            self._probe = make_batches(pairs, self.data.src_vocab, self.data.tgt_vocab,
                                       self.cfg.training.token_budget, self.seed, 0)
        return self._probe

    # -- the step ---------------------------------------------------------

    def _losses(self, batch: Batch, drop_rng):
        want_features = self.use_ad and self.ad_side == "encoder"
        repr_, feats = self.system.encoder_input(batch.src, batch.src_mask,
                                                 teacher_on_tape=self.teacher_trainable,
                                                 want_features=want_features)
        enc = self.model.encode(repr_, batch.src_mask, drop_rng)
        dec = self.model.decode(batch.tgt_in, enc, drop_rng)
        l_nmt = self.model.nmt_loss(dec, batch.tgt_out, self.cfg.training.label_smoothing, PAD)
        l_kd = None
        if self.use_ad:
            if self.ad_side == "encoder":
                target = self.projection(feats.detach())
                l_kd = asymptotic_distillation_loss(target, enc.states[self.student_tap],
                                                    batch.src_mask)
            else:
                # experimental: teacher features over the reference target
                # sentence matched to the top decoder layer, same positions
                with no_grad():
                    states = self.teacher.forward_states(batch.tgt_out, batch.tgt_mask)
                target = self.projection(states[self.system.teacher_tap].detach())
                l_kd = asymptotic_distillation_loss(target, dec.states[-1], batch.tgt_mask)
        loss = combined_loss(l_nmt, l_kd, self.alpha) if l_kd is not None else l_nmt
        return loss, l_nmt, l_kd

    def training_step(self) -> TrainRecord:
        t = self.step_count + 1
        batch = self._next_batch()
        drop_rng = stream(self.seed, "dropout", t) if self.cfg.model.dropout > 0 else None
        started = time.perf_counter()
        with Tape():
            loss, l_nmt, l_kd = self._losses(batch, drop_rng)
        backward(loss)
        opt = self.cfg.optimizer
        lr_nmt = nmt_rate(t, self.cfg.model.d_model, opt.warmup, opt.lr_scale)
        if self.teacher_trainable:
            lr_lm = lm_learning_rate(t, lr_nmt, self.lm_regime, self.t_prime, self.t_end)
        else:
            lr_lm = 0.0
        self.optimizer.step(lr_nmt, lr_lm)
        self.step_count = t
        return TrainRecord(
            step=t, loss=float(loss.data), loss_nmt=float(l_nmt.data),
            loss_kd=float(l_kd.data) if l_kd is not None else None,
            lr_nmt=lr_nmt, lr_lm=lr_lm,
            rho=rho(t, self.t_prime, self.t_end),
            drift=None, wall_time=time.perf_counter() - started,
        )

    # -- evaluation -------------------------------------------------------

    def current_drift(self) -> float:
        if self.teacher is None:
            return 0.0
        if self.teacher_trainable:
            return teacher_drift(None, self.teacher, self.probe_batches(),
                                 snapshot=self.teacher_snapshot,
                                 teacher_tap=self.system.teacher_tap)
        return teacher_drift(self.model, self.teacher, self.probe_batches(),
                             projection=self.projection,
                             student_tap=self.student_tap,
                             teacher_tap=self.system.teacher_tap)

    def corpus_bleu(self, pairs, beam: int = 1, length_penalty: float = 0.6,
                    limit: Optional[int] = None) -> float:
        pairs = pairs[:limit] if limit else pairs
        if not pairs:
            return 0.0
        max_len = self.cfg.training.max_decode_len or self.cfg.model.max_len
        hyps, refs = [], []
        for src, tgt in pairs:
            ids = self.data.src_vocab.encode(src) + [EOS]
            out = self.system.translate_ids(ids, beam=beam, length_penalty=length_penalty,
                                            max_len=max_len)
            hyps.append(self.data.tgt_vocab.decode(out))
            refs.append(list(tgt))
        return bleu(hyps, refs)

    # -- run loop ----------------------------------------------------------

    def run(self, metrics_path=None, ckpt_dir=None, quiet: bool = False) -> list[TrainRecord]:
        tr = self.cfg.training
        writer = MetricsWriter(metrics_path) if metrics_path else None
        if ckpt_dir:
            ckpt_dir = Path(ckpt_dir)
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            self.data.src_vocab.save(ckpt_dir / "vocab.src.txt")
            self.data.tgt_vocab.save(ckpt_dir / "vocab.tgt.txt")
        history = []
        try:
            while self.step_count < tr.steps:
                record = self.training_step()
                t = record.step
                if t % tr.drift_interval == 0 and self.teacher is not None:
                    record.drift = self.current_drift()
                if t % tr.val_interval == 0 and self.data.val_pairs:
                    record.val_bleu = self.corpus_bleu(self.data.val_pairs, beam=tr.val_beam,
                                                       limit=tr.val_size)
                    if record.val_bleu >= self.best_bleu:
                        self.best_bleu = record.val_bleu
                        if ckpt_dir:
                            self.save(ckpt_dir / "best.ckpt")
                    if not quiet:
                        log.info("step %d: loss %.4f, val BLEU %.2f", t, record.loss, record.val_bleu)
                if t % tr.log_interval == 0 or t == tr.steps:
                    history.append(record)
                    if writer:
                        writer.write(record)
            if ckpt_dir:
                self.save(ckpt_dir / "last.ckpt")
        finally:
            if writer:
                writer.close()
        return history

    # -- persistence --------------------------------------------------------

    def _component_tensors(self) -> dict[str, np.ndarray]:
        tensors = {f"model.{k}": v for k, v in self.model.state_arrays().items()}
        if self.projection is not None:
            tensors.update({f"fusion.projection.{k}": v for k, v in self.projection.state_arrays().items()})
        if self.gate is not None:
            tensors.update({f"fusion.gate.{k}": v for k, v in self.gate.state_arrays().items()})
        if self.teacher is not None:
            tensors.update({f"teacher.{k}": v for k, v in self.teacher.state_arrays().items()})
        if self.teacher_snapshot is not None:
            tensors.update({f"teacher_snapshot.{k}": v for k, v in self.teacher_snapshot.state_arrays().items()})
        return tensors

    def _opt_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        state = self.optimizer.state()
        if self.optimizer.mode == "adam":
            for gname in ("lm", "nmt"):
                for i, (m, v) in enumerate(zip(state[f"m_{gname}"], state[f"v_{gname}"])):
                    out[f"opt.m.{gname}.{i}"] = m
                    out[f"opt.v.{gname}.{i}"] = v
        return out

    def header(self) -> dict:
        return {
            "kind": "nmt",
            "config": self.cfg.to_dict(),
            "step": self.step_count,
            "opt_t": self.optimizer.t,
            "best_bleu": self.best_bleu,
            "vocab": {
                "src_hash": self.data.src_vocab.content_hash(),
                "tgt_hash": self.data.tgt_vocab.content_hash(),
                "src_size": len(self.data.src_vocab),
                "tgt_size": len(self.data.tgt_vocab),
            },
            "components": {
                "teacher": self.teacher is not None,
                "projection": self.projection is not None,
                "gate": self.gate is not None,
                "snapshot": self.teacher_snapshot is not None,
            },
        }

    def save(self, path) -> None:
        save_checkpoint(path, self.header(), {**self._component_tensors(), **self._opt_tensors()})

    def load(self, path) -> None:
        """Resume state from a checkpoint produced by an identical config."""
        header, tensors = load_checkpoint(path)
        vocab = header.get("vocab", {})
        if vocab.get("src_hash") != self.data.src_vocab.content_hash() or \
           vocab.get("tgt_hash") != self.data.tgt_vocab.content_hash():
            raise CheckpointError(f"{path}: vocabulary hash mismatch with the current data pipeline")

        def split(prefix):
            plen = len(prefix)
            return {k[plen:]: v for k, v in tensors.items() if k.startswith(prefix)}

        self.model.load_state_arrays(split("model."))
        if self.projection is not None:
            self.projection.load_state_arrays(split("fusion.projection."))
        if self.gate is not None:
            self.gate.load_state_arrays(split("fusion.gate."))
        if self.teacher is not None and header["components"]["teacher"]:
            self.teacher.load_state_arrays(split("teacher."))
        if self.teacher_snapshot is not None and header["components"]["snapshot"]:
            self.teacher_snapshot.load_state_arrays(split("teacher_snapshot."))
        if self.optimizer.mode == "adam":
            state = {"t": header["opt_t"], "mode": "adam"}
            for gname in ("lm", "nmt"):
                params = getattr(self.optimizer.groups, gname)
                state[f"m_{gname}"] = [tensors[f"opt.m.{gname}.{i}"] for i in range(len(params))]
                state[f"v_{gname}"] = [tensors[f"opt.v.{gname}.{i}"] for i in range(len(params))]
            self.optimizer.load_state(state)
        else:
            self.optimizer.t = int(header["opt_t"])
        self.step_count = int(header["step"])
        self.best_bleu = float(header.get("best_bleu", -1.0))
        self._fast_forward_data(self.step_count)


def load_translation_system(ckpt_path, vocab_dir=None):
    """Rebuild a decodable system from a model checkpoint.

    Vocabulary files (vocab.src.txt / vocab.tgt.txt) are read from
    ``vocab_dir`` (default: the checkpoint's directory) and verified against
    the hashes recorded in the checkpoint.
    """
    header, tensors = load_checkpoint(ckpt_path)
    if header.get("kind") != "nmt":
        raise CheckpointError(f"{ckpt_path} is not a model checkpoint")
    vocab_dir = Path(vocab_dir) if vocab_dir else Path(ckpt_path).parent
    src_vocab = Vocab.load(vocab_dir / "vocab.src.txt")
    tgt_vocab = Vocab.load(vocab_dir / "vocab.tgt.txt")
    if src_vocab.content_hash() != header["vocab"]["src_hash"] or \
       tgt_vocab.content_hash() != header["vocab"]["tgt_hash"]:
        raise CheckpointError(
            f"{ckpt_path}: vocab hash mismatch between checkpoint and input pipeline")

    cfg = ExperimentConfig.from_dict(header["config"])
    model = TransformerNMT(cfg.nmt_config(len(src_vocab), len(tgt_vocab)), stream(0, "rebuild"))

    def split(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    model.load_state_arrays(split("model."))
    comp = header["components"]
    teacher = projection = gate = None
    if comp.get("teacher"):
        teacher = TeacherLM(cfg.teacher_config(), len(src_vocab), stream(0, "rebuild"))
        teacher.load_state_arrays(split("teacher."))
    if comp.get("projection"):
        projection = TeacherProjection(cfg.teacher_config().d_model, cfg.model.d_model,
                                       stream(0, "rebuild"))
        projection.load_state_arrays(split("fusion.projection."))
    if comp.get("gate"):
        gate = SwitchGate(cfg.model.d_model)
        gate.load_state_arrays(split("fusion.gate."))
    if cfg.fusion.use_ds:
        feed = "switch"
    elif cfg.fusion.use_schedule:
        feed = "average"
    else:
        feed = "none"
    tap = (cfg.fusion.teacher_tap_layer if cfg.fusion.teacher_tap_layer is not None
           else (teacher.cfg.num_layers - 1 if teacher else None))
    system = TranslationSystem(model, teacher, projection, gate, feed, tap)
    return system, header, src_vocab, tgt_vocab


def load_teacher_checkpoint(path, expected_vocab: Vocab) -> tuple[TeacherLM, dict]:
    """Rebuild a pretrained teacher; the vocab hash must match the pipeline."""
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "teacher":
        raise CheckpointError(f"{path} is not a teacher checkpoint")
    if header["vocab"]["src_hash"] != expected_vocab.content_hash():
        raise CheckpointError(f"{path}: vocabulary hash mismatch between checkpoint and data pipeline")
    tcfg = TeacherConfig(**header["teacher_config"])
    teacher = TeacherLM(tcfg, header["vocab"]["src_size"], stream(0, "rebuild"))
    teacher.load_state_arrays({k[len("teacher."):]: v for k, v in tensors.items()
                               if k.startswith("teacher.")})
    return teacher, header


def save_teacher_checkpoint(path, teacher: TeacherLM, vocab: Vocab, info: dict,
                            cfg: ExperimentConfig) -> None:
    header = {
        "kind": "teacher",
        "teacher_config": dataclasses.asdict(teacher.cfg),
        "config": cfg.to_dict(),
        "pretrain": {k: v for k, v in info.items() if k != "loss_history"},
        "vocab": {"src_hash": vocab.content_hash(), "src_size": len(vocab)},
    }
    save_checkpoint(path, header, {f"teacher.{k}": v for k, v in teacher.state_arrays().items()})
