"""Experiment configuration: JSON in, validated dataclasses out.

Unknown keys are rejected at every level, and invariants are checked before
any data is touched.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .data import SYNTH_KINDS
from .fusion import FusionConfig


class ConfigError(ValueError):
    """Invalid configuration file or option combination."""


@dataclass
class TaskConfig:
    # synthetic route
    kind: Optional[str] = None
    n_pairs: int = 5000
    vocab_size: int = 200
    len_range: tuple = (3, 10)
    swap_prob: float = 0.3
    n_successors: int = 4
    chain_prob: float = 0.8
    val_pairs: int = 200
    test_pairs: int = 200
    shared_vocab: bool = False  # one vocabulary for both sides
    # file route
    parallel: Optional[str] = None
    mono: Optional[str] = None
    val: Optional[str] = None
    test: Optional[str] = None
    max_sentence_len: int = 150

    def __post_init__(self):
        if isinstance(self.len_range, list):
            self.len_range = tuple(self.len_range)
        if (self.kind is None) == (self.parallel is None):
            raise ConfigError("task needs exactly one of 'kind' (synthetic) or 'parallel' (corpus path)")
        if self.kind is not None and self.kind not in SYNTH_KINDS:
            raise ConfigError(f"unknown synthetic task {self.kind!r}; choose from {SYNTH_KINDS}")
        if self.kind is not None and self.n_pairs < 1:
            raise ConfigError("n_pairs must be positive")


@dataclass
class ModelConfig:
    num_layers: int = 3
    d_model: int = 128
    num_heads: int = 4
    d_ff: int = 0
    dropout: float = 0.1
    max_len: int = 64

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError("model.num_layers must be >= 1")
        if self.d_model % self.num_heads != 0:
            raise ConfigError(f"model.d_model {self.d_model} not divisible by num_heads {self.num_heads}")


@dataclass
class TeacherSection:
    directionality: str = "bidirectional"
    num_layers: int = 4
    d_model: int = 0          # 0: same as model.d_model
    num_heads: int = 4
    d_ff: int = 0
    dropout: float = 0.1
    mask_prob: float = 0.15
    pretrain_steps: int = 1000
    pretrain_lr: float = 3e-4
    token_budget: int = 2048

    def __post_init__(self):
        if self.directionality not in ("bidirectional", "causal"):
            raise ConfigError(f"teacher.directionality must be bidirectional or causal, got {self.directionality!r}")


@dataclass
class OptimizerSection:
    mode: str = "adam"
    warmup: int = 400
    lr_scale: float = 1.0
    clip_norm: Optional[float] = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9

    def __post_init__(self):
        if self.mode not in ("adam", "sgd"):
            raise ConfigError(f"optimizer.mode must be adam or sgd, got {self.mode!r}")
        if self.warmup < 1:
            raise ConfigError("optimizer.warmup must be >= 1")


@dataclass
class TrainingSection:
    steps: int = 5000
    token_budget: int = 2048
    label_smoothing: float = 0.1
    val_interval: int = 500
    val_beam: int = 1
    val_size: int = 200
    log_interval: int = 50
    drift_interval: int = 200
    drift_probe_size: int = 32
    max_decode_len: int = 0   # 0: model.max_len

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("training.steps must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("training.label_smoothing must be in [0, 1)")


_SECTIONS = {
    "task": TaskConfig,
    "model": ModelConfig,
    "teacher": TeacherSection,
    "fusion": FusionConfig,
    "optimizer": OptimizerSection,
    "training": TrainingSection,
}


def _build_section(cls, payload: dict, where: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"section {where!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in section {where!r}")
    try:
        return cls(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {where!r}: {exc}") from exc


@dataclass
class ExperimentConfig:
    task: TaskConfig = field(default_factory=lambda: TaskConfig(kind="lexswap-reorder"))
    model: ModelConfig = field(default_factory=ModelConfig)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    seed: int = 1
    out_dir: Optional[str] = None

    def __post_init__(self):
        self.fusion.validate(num_encoder_layers=self.model.num_layers)
        self.fusion.resolve_schedule(self.training.steps)

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        if not isinstance(payload, dict):
            raise ConfigError("config root must be a JSON object")
        top_known = set(_SECTIONS) | {"seed", "out_dir"}
        unknown = sorted(set(payload) - top_known)
        if unknown:
            raise ConfigError(f"unknown top-level key(s) {unknown}")
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            if name in payload:
                kwargs[name] = _build_section(section_cls, payload[name], name)
        if "seed" in payload:
            if not isinstance(payload["seed"], int):
                raise ConfigError("seed must be an integer")
            kwargs["seed"] = payload["seed"]
        if "out_dir" in payload:
            kwargs["out_dir"] = payload["out_dir"]
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        return cls.from_dict(payload)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["task"]["len_range"] = list(self.task.len_range)
        return out

    def with_strategy(self, strategies: set[str]) -> "ExperimentConfig":
        """Copy with the AD/DS/SCHED switches set from a strategy set."""
        unknown = strategies - {"ad", "ds", "sched"}
        if unknown:
            raise ConfigError(f"unknown strategy name(s) {sorted(unknown)}; choose from ad, ds, sched")
        clone = ExperimentConfig.from_dict(self.to_dict())
        clone.fusion.use_ad = "ad" in strategies
        clone.fusion.use_ds = "ds" in strategies
        clone.fusion.use_schedule = "sched" in strategies
        return clone

    @property
    def needs_teacher(self) -> bool:
        return self.fusion.use_ad or self.fusion.use_ds or self.fusion.use_schedule

    def teacher_config(self):
        from .teacher import TeacherConfig

        t = self.teacher
        return TeacherConfig(
            directionality=t.directionality, num_layers=t.num_layers,
            d_model=t.d_model or self.model.d_model, num_heads=t.num_heads,
            d_ff=t.d_ff, dropout=t.dropout, mask_prob=t.mask_prob,
            pretrain_steps=t.pretrain_steps, pretrain_lr=t.pretrain_lr,
            token_budget=t.token_budget, max_len=self.model.max_len,
        )

    def nmt_config(self, src_vocab: int, tgt_vocab: int):
        from .transformer import NmtConfig

        m = self.model
        return NmtConfig(src_vocab=src_vocab, tgt_vocab=tgt_vocab,
                         num_layers=m.num_layers, d_model=m.d_model,
                         num_heads=m.num_heads, d_ff=m.d_ff,
                         dropout=m.dropout, max_len=m.max_len)
