"""Run configuration: one JSON document with nested sections.

Sections: ``vocab``, ``scene`` (with nested ``noise``), ``data``, ``trainer``,
``transfer``, ``eval``. Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .scenegen import NoiseModel, SceneSpec
from .serialization import canonical_hash
from .vocab import ClassVocabulary

SEED_ENV = "CROSSMODAL_SEED"
LR_SCHEDULES = ("constant", "cosine")


@dataclass
class VocabConfig:
    names: list[str] = field(default_factory=lambda: ["ground", "box-A", "cylinder-A", "box-B", "cylinder-B"])
    novel: list[str] = field(default_factory=lambda: ["box-B", "cylinder-B"])

    def build(self) -> ClassVocabulary:
        return ClassVocabulary.from_split(self.names, self.novel)


@dataclass
class DataConfig:
    mode: str = "base-annotated"
    n_train: int = 200
    n_eval: int = 50
    train_seed: int = 0
    eval_seed: int = 100_000

    def __post_init__(self):
        if self.mode not in ("base-annotated", "annotation-free"):
            raise ConfigError(f"data.mode must be base-annotated or annotation-free, got {self.mode!r}")

    def train_seeds(self) -> list[int]:
        return list(range(self.train_seed, self.train_seed + self.n_train))

    def eval_seeds(self) -> list[int]:
        return list(range(self.eval_seed, self.eval_seed + self.n_eval))


@dataclass
class LossWeights:
    beta: float = 1.0
    delta: float = 1.0
    gamma: float = 0.5

    def __post_init__(self):
        if min(self.beta, self.delta, self.gamma) < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass
class StageConfig:
    stage1_steps: int = 550
    stage2_steps: int = 550
    clip_norm: float = 1.0
    image_lr: float = 1e-3
    image_weight_decay: float = 1e-2
    point_lr: float = 1e-2
    point_weight_decay: float = 1e-2
    point_lr_schedule: str = "cosine"
    pixels_per_step: int = 4096
    logit_scale: float = 20.0
    freeze_teacher: bool = False
    divergence_limit: float = 1e6
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.stage1_steps < 0 or self.stage2_steps < 0:
            raise ConfigError("step counts must be non-negative")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.point_lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"point_lr_schedule must be one of {LR_SCHEDULES}, got {self.point_lr_schedule!r}")


@dataclass
class TransferOptions:
    text_dim: int = 32
    feature_dim: int = 32
    novel_only: bool = True
    use_logit_distill: bool = True
    use_feature_distill: bool = True
    use_vpm: bool = True
    use_vpm_filter: bool = False
    vpm_heads: int = 2
    r_max: int = 512


def transfer_for_mode(options: TransferOptions, mode: str) -> TransferOptions:
    """Without base annotations every class is distilled, not just the novel ones."""
    if mode == "annotation-free" and options.novel_only:
        return dataclasses.replace(options, novel_only=False)
    return options


@dataclass
class EvalConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    variants: list[str] = field(
        default_factory=lambda: [
            "one-stage/logit",
            "one-stage/full",
            "two-stage/logit",
            "two-stage/logit+novel",
            "two-stage/logit+novel+feature",
            "two-stage/full",
        ]
    )


@dataclass
class RunConfig:
    vocab: VocabConfig = field(default_factory=VocabConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    data: DataConfig = field(default_factory=DataConfig)
    trainer: StageConfig = field(default_factory=StageConfig)
    transfer: TransferOptions = field(default_factory=TransferOptions)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def effective_transfer(self, options: "TransferOptions | None" = None) -> "TransferOptions":
        return transfer_for_mode(options or self.transfer, self.data.mode)

    def config_hash(self) -> str:
        return canonical_hash(self.to_dict())[:16]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


_NESTED = {
    RunConfig: {
        "vocab": VocabConfig,
        "scene": SceneSpec,
        "data": DataConfig,
        "trainer": StageConfig,
        "transfer": TransferOptions,
        "eval": EvalConfig,
    },
    SceneSpec: {"noise": NoiseModel},
    StageConfig: {"weights": LossWeights},
}


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be an object, got {type(raw).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for key, val in raw.items():
        sub = _NESTED.get(cls, {}).get(key)
        kwargs[key] = _build(sub, val, f"{where}.{key}" if where else key) if sub else val
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    cfg = _build(RunConfig, raw, "")
    cfg.vocab.build()
    return cfg


def load_config(path, seed: int | None = None) -> RunConfig:
    """Read a config file; seed precedence is explicit argument > $CROSSMODAL_SEED > file."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: not valid JSON ({exc})") from exc
    cfg = config_from_dict(raw)
    env = os.environ.get(SEED_ENV)
    if seed is not None:
        cfg.trainer.seed = int(seed)
    elif env:
        try:
            cfg.trainer.seed = int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return cfg
