"""Run configuration: one YAML (or JSON) file, hashed into every result.

Schema (all keys optional; defaults shown by ``RunConfig().to_dict()``)::

    model:    d_model, encoder_depth, encoder_heads, fusion_depth, fusion_heads,
              mlp_ratio, pooling (mean|cls), fusion_kind (attention|mlp),
              modality_embeddings
    train:    batch_size, lr, unimodal_epochs, multimodal_epochs,
              unsupervised_epochs, meta_episodes, align_weight,
              align_in_supervised, unsupervised_pretrain, temperature,
              symmetric_align, modality_drop, proto_metric, freeze_encoders,
              meta_n_way, meta_k_shot, meta_q_query
    eval:     episodes, n_way, k_shot, q_query, finetune_steps, finetune_lr,
              finetune_scope (head|head+fusion), workers
    masks:    zeroshot_train (supervised zero-shot labelled modalities),
              zeroshot_test (list), fewshot_zeroshot_pairs (list of [support, query])
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ..errors import ConfigError
from ..losses import METRICS
from ..modality import ModalityMask
from ..model import ModelConfig

DEFAULT_FEWSHOT_ZEROSHOT_PAIRS = [
    ["audio", "video"],
    ["imu", "video"],
    ["audio,imu", "video"],
    ["video", "audio"],
    ["video", "imu"],
    ["video", "audio,imu"],
]


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    unimodal_epochs: int = 10
    multimodal_epochs: int = 15
    unsupervised_epochs: int = 10
    meta_episodes: int = 2000
    align_weight: float = 0.5
    align_in_supervised: bool = True
    unsupervised_pretrain: bool = True
    temperature: float = 0.07
    symmetric_align: bool = False
    modality_drop: float = 0.6
    proto_metric: str = "sq_l2"
    freeze_encoders: bool = False
    meta_n_way: int = 5
    meta_k_shot: int = 5
    meta_q_query: int = 5

    def validate(self) -> None:
        if self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("batch_size must be >= 1 and lr > 0")
        if min(self.unimodal_epochs, self.multimodal_epochs, self.unsupervised_epochs, self.meta_episodes) < 0:
            raise ConfigError("epoch and episode counts must be >= 0")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0 <= self.modality_drop <= 1:
            raise ConfigError("modality_drop must lie in [0, 1]")
        if self.proto_metric not in METRICS:
            raise ConfigError(f"proto_metric must be one of {METRICS}")


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 500
    n_way: int = 5
    k_shot: int = 5
    q_query: int = 5
    finetune_steps: int = 20
    finetune_lr: float = 1e-2
    finetune_scope: str = "head"
    workers: int = 1

    def validate(self) -> None:
        if self.episodes < 1 or self.finetune_steps < 1 or self.workers < 1:
            raise ConfigError("episodes, finetune_steps and workers must be >= 1")


@dataclass(frozen=True)
class MaskConfig:
    zeroshot_train: str = "audio,imu"
    zeroshot_test: tuple[str, ...] = ("video",)
    fewshot_zeroshot_pairs: tuple[tuple[str, str], ...] = tuple(tuple(p) for p in DEFAULT_FEWSHOT_ZEROSHOT_PAIRS)

    def validate(self) -> None:
        train = ModalityMask.parse(self.zeroshot_train).require_nonempty()
        for t in self.zeroshot_test:
            test = ModalityMask.parse(t).require_nonempty()
            if not test.isdisjoint(train):
                raise ConfigError(f"zero-shot test mask {test} overlaps train mask {train}")
        for s, q in self.fewshot_zeroshot_pairs:
            if not ModalityMask.parse(s).require_nonempty().isdisjoint(ModalityMask.parse(q).require_nonempty()):
                raise ConfigError(f"zero-shot pair {s} -> {q} is not disjoint")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    masks: MaskConfig = field(default_factory=MaskConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.eval.validate()
        self.masks.validate()
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["masks"]["zeroshot_test"] = list(d["masks"]["zeroshot_test"])
        d["masks"]["fewshot_zeroshot_pairs"] = [list(p) for p in d["masks"]["fewshot_zeroshot_pairs"]]
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **sections) -> "RunConfig":
        """Copy with some fields of some sections overridden, e.g.
        ``cfg.replace(train={"modality_drop": 0.0})``."""
        merged = self.to_dict()
        for name, values in sections.items():
            if name not in merged:
                raise ConfigError(f"unknown config section {name!r}")
            merged[name].update(values)
        return RunConfig.from_dict(merged)

    @classmethod
    def from_dict(cls, raw: dict | None) -> "RunConfig":
        raw = dict(raw or {})
        sections = {"model": ModelConfig, "train": TrainConfig, "eval": EvalConfig, "masks": MaskConfig}
        unknown = set(raw) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        built = {}
        for name, klass in sections.items():
            values = dict(raw.get(name) or {})
            allowed = {f.name for f in fields(klass)}
            bad = set(values) - allowed
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            if name == "masks":
                if "zeroshot_test" in values:
                    values["zeroshot_test"] = tuple(values["zeroshot_test"])
                if "fewshot_zeroshot_pairs" in values:
                    values["fewshot_zeroshot_pairs"] = tuple(tuple(p) for p in values["fewshot_zeroshot_pairs"])
            try:
                built[name] = klass(**values)
            except TypeError as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        return cls(**built).validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: cannot parse config ({exc})") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{p}: config must be a mapping")
    return RunConfig.from_dict(raw)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")
