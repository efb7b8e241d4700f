"""Train-then-evaluate driver used by the CLI and the tests."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from pathlib import Path

import numpy as np

from ..dataeng.dataset import Dataset
from ..episodic import EpisodeSpec, FeatureCache, FeatureModel, FinetuneConfig, SuiteResult, run_fewshot_suite
from ..errors import ConfigError
from ..modality import ModalityMask
from ..model import MultimodalModel
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .report import ResultRow, RunRecord
from .stages import StageLog, StageSpec, pipeline_stages, task_mask_pairs, train_pipeline

log = logging.getLogger(__name__)

EVAL_BATCH = 64


def supervised_eval(model: MultimodalModel, data: Dataset, mask: ModalityMask, split: str = "base-test") -> float:
    """Top-1 accuracy of the trained head over ``split`` with only ``mask`` visible."""
    mask.require_nonempty()
    recs = data.split(split)
    if not recs:
        raise ConfigError(f"split {split!r} is empty")
    y = data.labels(recs)
    if model.num_classes != len(data.class_table(split)):
        raise ConfigError(f"head has {model.num_classes} classes, split {split!r} has "
                          f"{len(data.class_table(split))}")
    correct = 0
    for s in range(0, len(recs), EVAL_BATCH):
        chunk = recs[s:s + EVAL_BATCH]
        z = model.embed({m: data.stack(chunk, m) for m in mask}, mask)
        pred = np.argmax(model.logits(z).data, axis=1)
        correct += int((pred == y[s:s + EVAL_BATCH]).sum())
    return correct / len(recs)


def supervised_pairs(task: str, cfg: RunConfig) -> list[tuple[ModalityMask, ModalityMask]]:
    if task == "zeroshot":
        train = ModalityMask.parse(cfg.masks.zeroshot_train)
        return [(train, ModalityMask.parse(t)) for t in cfg.masks.zeroshot_test]
    return task_mask_pairs(task, cfg)


def fewshot_metric(cfg: RunConfig) -> str:
    return f"{cfg.eval.n_way}way{cfg.eval.k_shot}shot_acc"


def fewshot_eval(model: FeatureModel, data: Dataset, cfg: RunConfig, support: ModalityMask, query: ModalityMask,
                 seed: int, cache: FeatureCache | None = None, episodes: int | None = None) -> SuiteResult:
    ev = cfg.eval
    spec = EpisodeSpec(ev.n_way, ev.k_shot, ev.q_query, support, query, split="novel")
    ft = FinetuneConfig(ev.finetune_steps, ev.finetune_lr, ev.finetune_scope)
    return run_fewshot_suite(model, data, spec, episodes or ev.episodes, base_seed=seed, cfg=ft,
                             workers=ev.workers, cache=cache)


def evaluate(model: MultimodalModel, data: Dataset, cfg: RunConfig, setting: str, task: str,
             seed: int) -> list[ResultRow]:
    rows = []
    if setting == "supervised":
        for train, test in supervised_pairs(task, cfg):
            rows.append(ResultRow(str(train), str(test), "top1", supervised_eval(model, data, test)))
    else:
        cache = FeatureCache(model) if cfg.eval.finetune_scope == "head" else None
        for sup, qry in task_mask_pairs(task, cfg):
            r = fewshot_eval(model, data, cfg, sup, qry, seed, cache)
            rows.append(ResultRow(str(sup), str(qry), fewshot_metric(cfg), r.mean, r.ci95))
    return rows


def data_fingerprint(data: Dataset) -> str:
    return hashlib.sha256((data.root / "manifest.json").read_bytes()).hexdigest()[:16]


def training_signature(cfg: RunConfig, stages: list[StageSpec], seed: int, data: Dataset) -> str:
    """Identifies a trained model: equal signatures mean equal weights."""
    blob = {
        "model": cfg.model.to_dict(),
        "train": cfg.to_dict()["train"],
        "stages": [[s.kind.value, str(s.train_mask), s.align, [[str(a), str(b)] for a, b in s.mask_pairs]]
                   for s in stages],
        "seed": int(seed),
        "data": data_fingerprint(data),
    }
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]


def run_pipeline(data: Dataset, cfg: RunConfig, setting: str, task: str, seed: int,
                 out_dir: str | os.PathLike | None = None) -> tuple[RunRecord, MultimodalModel]:
    """Train (or reuse a cached checkpoint under ``out_dir``) and evaluate one pipeline."""
    t0 = time.perf_counter()
    stages = pipeline_stages(setting, task, cfg)
    sig = training_signature(cfg, stages, seed, data)
    ckpt = Path(out_dir) / "checkpoints" / f"{sig}.ckpt" if out_dir is not None else None
    if ckpt is not None and ckpt.exists():
        log.info("reusing checkpoint %s", ckpt)
        model, head = load_checkpoint(ckpt)
        logs = [StageLog.from_dict(d) for d in head["stages"]]
    else:
        model, logs = train_pipeline(data, cfg, setting, task, seed, stages)
        if ckpt is not None:
            save_checkpoint(ckpt, model, {"config_hash": cfg.config_hash(), "config": cfg.to_dict(),
                                          "seed": int(seed), "setting": setting, "task": task,
                                          "signature": sig, "data": str(data.root),
                                          "stages": [l.to_dict() for l in logs]})
    rows = evaluate(model, data, cfg, setting, task, seed)
    rec = RunRecord(setting, task, int(seed), cfg.config_hash(), [l.to_dict() for l in logs], rows,
                    checkpoint=ckpt.name if ckpt is not None else "",
                    wall_time=round(time.perf_counter() - t0, 3),
                    extra={"proto_metric": cfg.train.proto_metric, "config": cfg.to_dict()})
    return rec, model
