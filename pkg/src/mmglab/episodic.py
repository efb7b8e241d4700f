"""N-way K-shot episodes and finetune-based few-shot evaluation."""
from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Protocol

import numpy as np

from .dataeng.dataset import Dataset
from .errors import ConfigError, DataError
from .losses import cross_entropy
from .model import MultimodalModel
from .modality import ModalityMask
from .numcore import autograd as ag
from .numcore.adam import Adam
from .numcore.autograd import backprop, parameter
from .numcore.layers import linear

FINETUNE_SCOPES = ("head", "head+fusion")


class FeatureModel(Protocol):
    width: int

    def features(self, tokens: Mapping[str, np.ndarray], mask: ModalityMask) -> np.ndarray: ...


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 5
    q_query: int = 5
    support_mask: ModalityMask = field(default_factory=ModalityMask.full)
    query_mask: ModalityMask = field(default_factory=ModalityMask.full)
    split: str = "novel"

    def __post_init__(self):
        if self.n_way < 2:
            raise ConfigError("episodes need at least 2 ways")
        if self.k_shot < 1 or self.q_query < 1:
            raise ConfigError("k_shot and q_query must be >= 1")
        self.support_mask.require_nonempty()
        self.query_mask.require_nonempty()


@dataclass
class EpisodeItem:
    example_id: str
    label: int
    tokens: dict[str, np.ndarray]


@dataclass
class Episode:
    spec: EpisodeSpec
    support: list[EpisodeItem]
    query: list[EpisodeItem]
    relabel: dict[str, int]

    def support_labels(self) -> np.ndarray:
        return np.array([it.label for it in self.support], dtype=np.int64)

    def query_labels(self) -> np.ndarray:
        return np.array([it.label for it in self.query], dtype=np.int64)


def _materialise(dataset: Dataset, rec, label: int, mask: ModalityMask) -> EpisodeItem:
    # only masked-in modalities are ever read, so no model path can see the rest
    return EpisodeItem(rec.id, label, {m: dataset.tensor(rec.id, m) for m in mask})


def sample_episode(dataset: Dataset, spec: EpisodeSpec, rng: np.random.Generator) -> Episode:
    records = dataset.split(spec.split)
    by_class: dict[str, list] = {}
    for r in records:
        by_class.setdefault(r.label, []).append(r)
    need = spec.k_shot + spec.q_query
    table = [c for c in dataset.class_table(spec.split) if c in by_class]
    eligible = [c for c in table if len(by_class[c]) >= need]
    if len(eligible) < spec.n_way:
        raise DataError(f"{spec.split}: {len(eligible)} classes have >= {need} examples, "
                        f"{spec.n_way} needed (class sizes: {sorted(len(v) for v in by_class.values())})")
    chosen = [eligible[i] for i in rng.choice(len(eligible), size=spec.n_way, replace=False)]
    relabel = {c: i for i, c in enumerate(chosen)}
    support, query = [], []
    for c in chosen:
        pool = by_class[c]
        picks = rng.choice(len(pool), size=need, replace=False)
        for j, idx in enumerate(picks):
            if j < spec.k_shot:
                support.append(_materialise(dataset, pool[idx], relabel[c], spec.support_mask))
            else:
                query.append(_materialise(dataset, pool[idx], relabel[c], spec.query_mask))
    return Episode(spec, support, query, relabel)


def stack_tokens(items: list[EpisodeItem], mask: ModalityMask) -> dict[str, np.ndarray]:
    return {m: np.stack([it.tokens[m] for it in items]) for m in mask}


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class FinetuneConfig:
    steps: int = 20
    lr: float = 1e-2
    scope: str = "head"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("finetune needs at least one step")
        if self.scope not in FINETUNE_SCOPES:
            raise ConfigError(f"scope must be one of {FINETUNE_SCOPES}")


@dataclass
class EpisodeResult:
    accuracy: float
    correct: int
    total: int
    steps: int


class FeatureCache:
    """Per-example features of a frozen model, computed one example at a time
    so a feature never depends on which episode first asked for it."""

    def __init__(self, model: FeatureModel):
        self.model = model
        self._store: dict[tuple[str, str], np.ndarray] = {}
        self._lock = threading.Lock()

    def get(self, items: list[EpisodeItem], mask: ModalityMask) -> np.ndarray:
        rows = []
        for it in items:
            key = (it.example_id, str(mask))
            with self._lock:
                z = self._store.get(key)
            if z is None:
                z = self.model.features({m: it.tokens[m][None] for m in mask}, mask)[0]
                with self._lock:
                    self._store[key] = z
            rows.append(z)
        return np.stack(rows)


def _train_head(zs: np.ndarray, ys: np.ndarray, n_way: int, cfg: FinetuneConfig):
    w = parameter(np.zeros((zs.shape[1], n_way)), "w")
    b = parameter(np.zeros(n_way), "b")
    opt = Adam({"w": w, "b": b}, lr=cfg.lr)
    for _ in range(cfg.steps):
        loss = cross_entropy(linear(zs, w, b), ys)
        opt.step(backprop(loss, opt.params))
    return w, b, opt.steps


def fewshot_finetune_eval(model: FeatureModel, episode: Episode, cfg: FinetuneConfig = FinetuneConfig(),
                          cache: FeatureCache | None = None) -> EpisodeResult:
    """Train a fresh N-way head on the support set, score the query set.

    The model itself is never modified: ``head`` scope works on frozen
    features, ``head+fusion`` finetunes a private copy of the fusion weights.
    """
    spec = episode.spec
    ys, yq = episode.support_labels(), episode.query_labels()
    if cfg.scope == "head":
        cache = cache or FeatureCache(model)
        zs = cache.get(episode.support, spec.support_mask)
        zq = cache.get(episode.query, spec.query_mask)
        if zs.shape[1] != model.width:
            raise ConfigError(f"feature width {zs.shape[1]} != model width {model.width}")
        w, b, steps = _train_head(zs, ys, spec.n_way, cfg)
        scores = zq @ w.data + b.data
    else:
        scores, steps = _finetune_fusion(model, episode, cfg)
    pred = np.argmax(scores, axis=1)
    correct = int((pred == yq).sum())
    return EpisodeResult(correct / len(yq), correct, len(yq), steps)


def _finetune_fusion(model, episode: Episode, cfg: FinetuneConfig):
    if not isinstance(model, MultimodalModel):
        raise ConfigError("head+fusion finetuning needs a MultimodalModel")
    spec = episode.spec
    twin = model.clone()
    prefix = twin.fusion_prefix
    sup = stack_tokens(episode.support, spec.support_mask)
    qry = stack_tokens(episode.query, spec.query_mask)
    # encoders stay frozen: encode once, outside the trained graph
    enc_s = {m: tuple(ag.Tensor(t.data) for t in twin.encode(m, sup[m])) for m in spec.support_mask}
    enc_q = {m: tuple(ag.Tensor(t.data) for t in twin.encode(m, qry[m])) for m in spec.query_mask}
    w = parameter(np.zeros((twin.width, spec.n_way)), "head.w")
    b = parameter(np.zeros(spec.n_way), "head.b")
    trainable = {**twin.subset(prefix), "head.w": w, "head.b": b}
    opt = Adam(trainable, lr=cfg.lr)
    ys = episode.support_labels()
    for _ in range(cfg.steps):
        z = twin.fuse(enc_s, spec.support_mask)
        loss = cross_entropy(linear(z, w, b), ys)
        opt.step(backprop(loss, trainable))
    zq = twin.fuse(enc_q, spec.query_mask).data
    return zq @ w.data + b.data, opt.steps


@dataclass
class SuiteResult:
    mean: float
    ci95: float
    num_episodes: int
    accuracies: list[float] = field(repr=False)

    @property
    def degenerate(self) -> bool:
        return self.num_episodes < 2

    @property
    def stderr(self) -> float:
        if self.num_episodes < 2:
            return 0.0
        return float(np.std(self.accuracies, ddof=1) / math.sqrt(self.num_episodes))


def episode_rng(base_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(base_seed), int(index)])


def run_fewshot_suite(model: FeatureModel, dataset: Dataset, spec: EpisodeSpec, num_episodes: int = 500,
                      base_seed: int = 0, cfg: FinetuneConfig = FinetuneConfig(), workers: int = 1,
                      cache: FeatureCache | None = None) -> SuiteResult:
    """Mean accuracy and 95% normal-approximation CI over independent episodes.

    Episode ``i`` draws from its own RNG stream seeded by ``(base_seed, i)``,
    so the result does not depend on ``workers``.
    """
    if num_episodes < 1:
        raise ConfigError("num_episodes must be >= 1")
    cache = cache or (FeatureCache(model) if cfg.scope == "head" else None)

    def one(i: int) -> float:
        ep = sample_episode(dataset, spec, episode_rng(base_seed, i))
        return fewshot_finetune_eval(model, ep, cfg, cache).accuracy

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(one, range(num_episodes)))
    else:
        accs = [one(i) for i in range(num_episodes)]
    arr = np.array(accs, dtype=np.float64)
    mean = float(arr.sum() / arr.size)
    ci = 0.0 if arr.size < 2 else float(1.96 * arr.std(ddof=1) / math.sqrt(arr.size))
    return SuiteResult(mean, ci, int(arr.size), accs)
