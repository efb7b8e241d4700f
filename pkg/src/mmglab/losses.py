"""Training objectives: cross-entropy, cross-modal alignment, cross-modal
prototypical loss."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, NumericError
from .numcore import autograd as ag
from .numcore.autograd import Tensor, as_tensor
from .numcore.layers import l2_normalize, pairwise_sq_l2

PROB_FLOOR = 1e-30
METRICS = ("sq_l2", "l2")


def cross_entropy(logits, label) -> Tensor:
    """``logsumexp(logits) - logits[label]``; a batch of rows is averaged."""
    logits = as_tensor(logits)
    c = logits.shape[-1]
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if np.any(labels < 0) or np.any(labels >= c):
        raise ConfigError(f"label out of range for {c} classes")
    if logits.ndim == 1:
        return ag.logsumexp(logits, axis=-1) - logits[int(labels[0])]
    if labels.shape[0] != logits.shape[0]:
        raise ConfigError("one label per logits row required")
    rows = np.arange(labels.shape[0])
    per = ag.logsumexp(logits, axis=-1) - logits[rows, labels]
    return per.mean()


# ---------------------------------------------------------------------------
# alignment


@dataclass(frozen=True)
class AlignConfig:
    temperature: float = 0.07
    anchor_modality: str = "video"
    pair_modalities: tuple[str, ...] = ("audio", "imu")
    symmetric: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")


@dataclass
class AlignBatch:
    """Features per modality, one row per temporal location.

    ``present[m][i]`` is False where location ``i`` has no ``m`` feature; the
    corresponding row of ``features[m]`` is ignored.
    """

    features: dict[str, Tensor]
    present: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        sizes = {as_tensor(t).shape[0] for t in self.features.values()}
        if len(sizes) > 1:
            raise ConfigError("all modalities in an AlignBatch need the same number of rows")
        n = sizes.pop() if sizes else 0
        for m in self.features:
            self.present.setdefault(m, np.ones(n, dtype=bool))

    @property
    def size(self) -> int:
        return next(iter(self.features.values())).shape[0] if self.features else 0

    @classmethod
    def from_triples(cls, triples: Sequence[Mapping[str, np.ndarray | Tensor | None]]) -> "AlignBatch":
        mods = sorted({m for t in triples for m in t})
        feats, present = {}, {}
        for m in mods:
            rows = [t.get(m) for t in triples]
            width = next(as_tensor(r).shape[-1] for r in rows if r is not None)
            present[m] = np.array([r is not None for r in rows])
            stacked = [as_tensor(r) if r is not None else Tensor(np.ones(width)) for r in rows]
            feats[m] = ag.stack(stacked, axis=0)
        return cls(feats, present)


def _nce_direction(anchor: Tensor, anchor_ok: np.ndarray, other: Tensor, other_ok: np.ndarray,
                   temperature: float) -> Tensor | None:
    rows = np.flatnonzero(anchor_ok & other_ok)
    cols = np.flatnonzero(other_ok)
    if rows.size == 0:
        return None
    a = l2_normalize(anchor[rows])
    b = l2_normalize(other[cols])
    logits = ag.matmul(a, ag.transpose(b)) * (1.0 / temperature)
    pos = np.searchsorted(cols, rows)
    per_anchor = ag.logsumexp(logits, axis=-1) - logits[np.arange(rows.size), pos]
    return per_anchor.mean()


def alignment_loss(batch: AlignBatch, cfg: AlignConfig = AlignConfig()) -> Tensor:
    """Video-anchored contrastive loss with in-batch negatives.

    For each pair modality ``m``, each anchor row with both a video and an
    ``m`` feature is scored against every ``m`` feature in the batch; its own
    row is the positive. Terms are averaged over anchors and summed over
    pair modalities.
    """
    if cfg.temperature <= 0:
        raise ConfigError("temperature must be positive")
    if batch.size < 1:
        raise ConfigError("alignment loss needs at least one temporal location")
    anchor = cfg.anchor_modality
    if anchor not in batch.features:
        return Tensor(0.0)
    za, pa = as_tensor(batch.features[anchor]), batch.present[anchor]
    terms = []
    for m in cfg.pair_modalities:
        if m not in batch.features:
            continue
        zm, pm = as_tensor(batch.features[m]), batch.present[m]
        fwd = _nce_direction(za, pa, zm, pm, cfg.temperature)
        if fwd is None:
            continue
        if cfg.symmetric:
            rev = _nce_direction(zm, pm, za, pa, cfg.temperature)
            fwd = (fwd + rev) * 0.5
        terms.append(fwd)
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


# ---------------------------------------------------------------------------
# prototypes


@dataclass
class SupportGroup:
    label: int
    modality: str
    features: Tensor


@dataclass
class Prototype:
    label: int
    modality: str
    centroid: Tensor


def prototypes(groups: Sequence[SupportGroup]) -> list[Prototype]:
    """One centroid per (label, modality): the arithmetic mean of its features."""
    if not groups:
        raise ConfigError("no support groups given")
    merged: dict[tuple[int, str], list[Tensor]] = {}
    for g in groups:
        feats = as_tensor(g.features)
        if feats.ndim == 1:
            feats = feats.reshape(1, -1)
        if feats.shape[0] == 0:
            raise ConfigError(f"empty support group for class {g.label} / {g.modality}")
        merged.setdefault((g.label, g.modality), []).append(feats)
    out = []
    for (label, modality), parts in merged.items():
        feats = parts[0] if len(parts) == 1 else ag.concat(parts, axis=0)
        out.append(Prototype(label, modality, feats.mean(axis=0)))
    return out


def class_centroids(support: Tensor, labels: np.ndarray, n_way: int) -> Tensor:
    """(S, D) support features -> (N, D) per-class means over all modalities."""
    labels = np.asarray(labels)
    rows = []
    for k in range(n_way):
        idx = np.flatnonzero(labels == k)
        if idx.size == 0:
            raise ConfigError(f"class {k} has no support features")
        rows.append(as_tensor(support)[idx].mean(axis=0))
    return ag.stack(rows, axis=0)


def _distances(query: Tensor, centroids: Tensor, metric: str) -> Tensor:
    if metric not in METRICS:
        raise ConfigError(f"metric must be one of {METRICS}")
    d = pairwise_sq_l2(query, centroids)
    if metric == "l2":
        d = ag.sqrt(d + 1e-12)
    return d


def proto_probabilities(query, protos: Sequence[Prototype] | Tensor, metric: str = "sq_l2",
                        labels: Sequence[int] | None = None) -> Tensor:
    """Softmax over negative distances from ``query`` to each class centroid.

    ``protos`` is either a list with exactly one prototype per class
    ``0..N-1`` (or per entry of ``labels``) or an (N, D) centroid matrix.
    """
    if isinstance(protos, Tensor) or isinstance(protos, np.ndarray):
        centroids = as_tensor(protos)
    else:
        wanted = list(labels) if labels is not None else list(range(len(protos)))
        by_label = {}
        for p in protos:
            if p.label in by_label:
                raise ConfigError(f"more than one prototype for class {p.label}")
            by_label[p.label] = p
        missing = [k for k in wanted if k not in by_label]
        if missing:
            raise ConfigError(f"missing prototype for classes {missing}")
        centroids = ag.stack([by_label[k].centroid for k in wanted], axis=0)
    q = as_tensor(query)
    single = q.ndim == 1
    if single:
        q = q.reshape(1, -1)
    probs = ag.softmax(-_distances(q, centroids, metric), axis=-1)
    return probs.reshape(-1) if single else probs


def proto_loss(probs, true_class: int) -> Tensor:
    """Negative log-likelihood of ``true_class`` under ``probs``."""
    probs = as_tensor(probs)
    n = probs.shape[-1]
    if not 0 <= true_class < n:
        raise ConfigError(f"true class {true_class} out of range for {n} classes")
    p = probs[true_class]
    if p.item() < PROB_FLOOR:
        warnings.warn(f"probability {p.item():.3g} clamped to {PROB_FLOOR}", RuntimeWarning, stacklevel=2)
        return Tensor(-np.log(PROB_FLOOR))
    return -ag.log(p)


def proto_episode_loss(support, support_labels, query, query_labels, n_way: int,
                       metric: str = "sq_l2") -> Tensor:
    """Mean prototypical loss over all queries of an episode."""
    centroids = class_centroids(as_tensor(support), support_labels, n_way)
    q_labels = np.asarray(query_labels, dtype=np.int64)
    if np.any(q_labels < 0) or np.any(q_labels >= n_way):
        raise ConfigError("query label out of range")
    logp = ag.log_softmax(-_distances(as_tensor(query), centroids, metric), axis=-1)
    picked = logp[np.arange(q_labels.size), q_labels]
    if not np.all(np.isfinite(picked.data)):
        raise NumericError("non-finite prototypical log-probability")
    return -picked.mean()
