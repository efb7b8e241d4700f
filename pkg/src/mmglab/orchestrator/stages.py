"""The four training stages and the pipelines that chain them."""
from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field
from itertools import groupby

import numpy as np

from ..dataeng.dataset import Dataset
from ..episodic import EpisodeSpec, sample_episode, stack_tokens
from ..errors import ConfigError
from ..fusion import DropConfig, sample_modality_drop
from ..losses import AlignBatch, AlignConfig, alignment_loss, cross_entropy, proto_episode_loss
from ..modality import MODALITIES, ModalityMask, nonempty_masks
from ..model import MultimodalModel
from ..numcore import autograd as ag
from ..numcore.adam import Adam
from ..numcore.autograd import backprop
from .config import RunConfig

log = logging.getLogger(__name__)

SETTINGS = ("supervised", "fewshot")
TASKS = ("regular", "missing", "zeroshot")


class StageKind(str, enum.Enum):
    UNIMODAL = "unimodal-supervised-pretrain"
    UNSUPERVISED = "multimodal-unsupervised-pretrain"
    SUPERVISED = "multimodal-supervised-train"
    META = "multimodal-meta-train"


@dataclass
class StageSpec:
    kind: StageKind
    train_mask: ModalityMask = field(default_factory=ModalityMask.full)
    align: bool = False
    mask_pairs: tuple[tuple[ModalityMask, ModalityMask], ...] = ()


@dataclass
class StageLog:
    kind: str
    loss_terms: list[str]
    train_mask: str
    split: str
    steps: int
    initial_loss: float
    epoch_losses: list[float]

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else self.initial_loss

    def to_dict(self) -> dict:
        return {**asdict(self), "final_loss": self.final_loss}

    @classmethod
    def from_dict(cls, d: dict) -> "StageLog":
        d = {k: v for k, v in d.items() if k != "final_loss"}
        return cls(**d)


# -- mask pairs of each task ---------------------------------------------------

def task_mask_pairs(task: str, cfg: RunConfig) -> list[tuple[ModalityMask, ModalityMask]]:
    """The (support/train, query/test) mask pairs a task is evaluated on."""
    full = ModalityMask.full()
    if task == "regular":
        return [(full, full)]
    if task == "missing":
        return [(full, q) for q in nonempty_masks() if q != full]
    if task == "zeroshot":
        return [(ModalityMask.parse(s), ModalityMask.parse(q)) for s, q in cfg.masks.fewshot_zeroshot_pairs]
    raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")


def meta_mask_pairs(task: str, cfg: RunConfig) -> list[tuple[ModalityMask, ModalityMask]]:
    """Mask pairs sampled during meta-training.

    Regular and missing-modality share one pool (full support, any non-empty
    query) so a single checkpoint serves both evaluations.
    """
    if task in ("regular", "missing"):
        full = ModalityMask.full()
        return [(full, q) for q in nonempty_masks()]
    return task_mask_pairs(task, cfg)


def pipeline_stages(setting: str, task: str, cfg: RunConfig) -> list[StageSpec]:
    if setting not in SETTINGS:
        raise ConfigError(f"unknown setting {setting!r}; expected one of {SETTINGS}")
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    full = ModalityMask.full()
    if setting == "supervised" and task == "zeroshot":
        train = ModalityMask.parse(cfg.masks.zeroshot_train)
        stages = [StageSpec(StageKind.UNSUPERVISED)] if cfg.train.unsupervised_pretrain else []
        return stages + [StageSpec(StageKind.SUPERVISED, train_mask=train, align=False)]
    stages = [StageSpec(StageKind.UNIMODAL),
              StageSpec(StageKind.SUPERVISED, train_mask=full, align=cfg.train.align_in_supervised)]
    if setting == "fewshot":
        stages.append(StageSpec(StageKind.META, mask_pairs=tuple(meta_mask_pairs(task, cfg))))
    return stages


# -- helpers -------------------------------------------------------------------

def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, size):
        yield order[s:s + size]


def _step(opt: Adam, loss: ag.Tensor) -> float:
    opt.step(backprop(loss, opt.params))
    return float(loss.data)


def _encoder_params(model: MultimodalModel, cfg: RunConfig, mask: ModalityMask):
    if cfg.train.freeze_encoders:
        return {}
    return model.subset(*(f"enc.{m}." for m in mask))


# -- stages --------------------------------------------------------------------

def _unimodal(model: MultimodalModel, data: Dataset, cfg: RunConfig, rng) -> StageLog:
    recs = data.split("base-train")
    y = data.labels(recs)
    model.reset_unimodal_heads(len(data.base_classes), int(rng.integers(2 ** 31)))
    tc = cfg.train
    per_epoch = np.zeros(tc.unimodal_epochs)
    initial, steps = None, 0
    for m in MODALITIES:
        x = data.stack(recs, m)
        opt = Adam(model.subset(f"enc.{m}.", f"unihead.{m}."), lr=tc.lr)
        for e in range(tc.unimodal_epochs):
            tot = 0.0
            for idx in _batches(len(recs), tc.batch_size, rng):
                _, pooled = model.encode(m, x[idx])
                v = _step(opt, cross_entropy(model.unimodal_logits(m, pooled), y[idx]))
                initial = v if initial is None else initial
                tot += v * len(idx)
                steps += 1
            per_epoch[e] += tot / len(recs) / len(MODALITIES)
    return StageLog(StageKind.UNIMODAL.value, ["cross_entropy"], str(ModalityMask.full()), "base-train",
                    steps, float(initial if initial is not None else np.nan), per_epoch.tolist())


def _align_term(model, encoded, mask: ModalityMask, cfg: RunConfig) -> ag.Tensor:
    """NCE over singleton-projected features of every modality in ``mask``."""
    feats = {m: model.fuse({m: encoded[m]}, ModalityMask((m,))) for m in mask}
    pairs = tuple(m for m in MODALITIES if m != "video")
    acfg = AlignConfig(temperature=cfg.train.temperature, anchor_modality="video",
                       pair_modalities=pairs, symmetric=cfg.train.symmetric_align)
    return alignment_loss(AlignBatch(feats), acfg)


def _unsupervised(model: MultimodalModel, data: Dataset, cfg: RunConfig, rng) -> StageLog:
    recs = data.split("unlabeled")
    full = ModalityMask.full()
    xs = {m: data.stack(recs, m) for m in full}
    tc = cfg.train
    opt = Adam({**_encoder_params(model, cfg, full), **model.subset(model.fusion_prefix)}, lr=tc.lr)
    epochs, initial, steps = [], None, 0
    for _ in range(tc.unsupervised_epochs):
        tot, n = 0.0, 0
        for idx in _batches(len(recs), tc.batch_size, rng):
            if len(idx) < 2:
                continue  # NCE needs a negative
            encoded = {m: model.encode(m, xs[m][idx]) for m in full}
            v = _step(opt, _align_term(model, encoded, full, cfg))
            initial = v if initial is None else initial
            tot += v * len(idx)
            n += len(idx)
            steps += 1
        epochs.append(tot / max(n, 1))
    return StageLog(StageKind.UNSUPERVISED.value, ["nce_align"], str(full), "unlabeled", steps,
                    float(initial if initial is not None else np.nan), epochs)


def _supervised(model: MultimodalModel, data: Dataset, cfg: RunConfig, rng, spec: StageSpec) -> StageLog:
    recs = data.split("base-train")
    y = data.labels(recs)
    mask = spec.train_mask.require_nonempty()
    xs = {m: data.stack(recs, m) for m in mask}
    tc = cfg.train
    if model.num_classes != len(data.base_classes) or "head.w" not in model.params:
        model.reset_head(len(data.base_classes), int(rng.integers(2 ** 31)))
    trainable = {**_encoder_params(model, cfg, mask), **model.subset(model.fusion_prefix, "head.")}
    opt = Adam(trainable, lr=tc.lr)
    drop = DropConfig(p=tc.modality_drop)
    candidates = nonempty_masks(within=mask)
    rank = {str(m): i for i, m in enumerate(candidates)}
    terms = ["cross_entropy"] + (["nce_align"] if spec.align else [])
    epochs, initial, steps = [], None, 0
    for _ in range(tc.multimodal_epochs):
        tot = 0.0
        for idx in _batches(len(recs), tc.batch_size, rng):
            b = len(idx)
            masks = [sample_modality_drop(mask, drop, rng) for _ in range(b)]
            encoded = {m: model.encode(m, xs[m][idx]) for m in mask}
            loss = None
            # one fused forward pass per distinct mask in the batch
            rows = sorted(range(b), key=lambda i: rank[str(masks[i])])
            for key, grp in groupby(rows, key=lambda i: rank[str(masks[i])]):
                sel = np.array(list(grp))
                gmask = candidates[key]
                sub = {m: (encoded[m][0][sel], encoded[m][1][sel]) for m in gmask}
                logits = model.logits(model.fuse(sub, gmask))
                part = cross_entropy(logits, y[idx][sel]) * (len(sel) / b)
                loss = part if loss is None else loss + part
            if spec.align:
                if len(mask) < 2:
                    raise ConfigError("the alignment term needs at least two modalities")
                loss = loss + _align_term(model, encoded, mask, cfg) * tc.align_weight
            v = _step(opt, loss)
            initial = v if initial is None else initial
            tot += v * b
            steps += 1
        epochs.append(tot / len(recs))
    return StageLog(StageKind.SUPERVISED.value, terms, str(mask), "base-train", steps,
                    float(initial if initial is not None else np.nan), epochs)


META_LOG_EVERY = 100


def _meta(model: MultimodalModel, data: Dataset, cfg: RunConfig, rng, spec: StageSpec) -> StageLog:
    if not spec.mask_pairs:
        raise ConfigError("meta-training needs at least one (support, query) mask pair")
    tc = cfg.train
    used = ModalityMask(tuple(m for m in MODALITIES if any(m in s or m in q for s, q in spec.mask_pairs)))
    opt = Adam({**_encoder_params(model, cfg, used), **model.subset(model.fusion_prefix)}, lr=tc.lr)
    chunks, buf, initial = [], [], None
    for _ in range(tc.meta_episodes):
        s_mask, q_mask = spec.mask_pairs[int(rng.integers(len(spec.mask_pairs)))]
        ep = sample_episode(data, EpisodeSpec(tc.meta_n_way, tc.meta_k_shot, tc.meta_q_query,
                                              s_mask, q_mask, split="base-train"), rng)
        zs = model.embed(stack_tokens(ep.support, s_mask), s_mask)
        zq = model.embed(stack_tokens(ep.query, q_mask), q_mask)
        loss = proto_episode_loss(zs, ep.support_labels(), zq, ep.query_labels(), tc.meta_n_way,
                                  metric=tc.proto_metric)
        v = _step(opt, loss)
        initial = v if initial is None else initial
        buf.append(v)
        if len(buf) == META_LOG_EVERY:
            chunks.append(float(np.mean(buf)))
            buf = []
    if buf:
        chunks.append(float(np.mean(buf)))
    pairs = ";".join(f"{s}>{q}" for s, q in spec.mask_pairs)
    return StageLog(StageKind.META.value, ["proto"], pairs, "base-train", tc.meta_episodes,
                    float(initial if initial is not None else np.nan), chunks)


STAGE_SPLITS = {
    StageKind.UNIMODAL: "base-train",
    StageKind.UNSUPERVISED: "unlabeled",
    StageKind.SUPERVISED: "base-train",
    StageKind.META: "base-train",
}


def run_stage(model: MultimodalModel, data: Dataset, cfg: RunConfig, spec: StageSpec,
              rng: np.random.Generator, split: str | None = None) -> StageLog:
    """Train ``model`` in place for one stage and return its loss log.

    ``split`` is optional; when given it must be the split the stage kind
    trains on.
    """
    if split is not None and split != STAGE_SPLITS[spec.kind]:
        raise ConfigError(f"{spec.kind.value} trains on {STAGE_SPLITS[spec.kind]!r}, not {split!r}")
    if spec.kind is StageKind.UNIMODAL:
        out = _unimodal(model, data, cfg, rng)
    elif spec.kind is StageKind.UNSUPERVISED:
        out = _unsupervised(model, data, cfg, rng)
    elif spec.kind is StageKind.SUPERVISED:
        out = _supervised(model, data, cfg, rng, spec)
    elif spec.kind is StageKind.META:
        out = _meta(model, data, cfg, rng, spec)
    else:  # pragma: no cover
        raise ConfigError(f"unknown stage {spec.kind}")
    log.info("%s: %d steps, loss %.4f -> %.4f", out.kind, out.steps, out.initial_loss, out.final_loss)
    return out


def stage_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), 1000 + index])


def train_pipeline(data: Dataset, cfg: RunConfig, setting: str, task: str, seed: int,
                   stages: list[StageSpec] | None = None) -> tuple[MultimodalModel, list[StageLog]]:
    stages = pipeline_stages(setting, task, cfg) if stages is None else stages
    model = MultimodalModel.create(cfg.model, data.token_shapes(), len(data.base_classes), seed)
    logs = [run_stage(model, data, cfg, s, stage_rng(seed, i)) for i, s in enumerate(stages)]
    return model, logs
