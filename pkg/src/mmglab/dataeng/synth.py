"""Synthetic multimodal data with a shared linear latent.

Each class k has a latent mean. An example draws a latent u around its
class mean (with part of the deviation shared across the example's clip),
and every modality observes u through its own fixed random linear map plus
isotropic noise. Because all three modalities encode the same u, knowledge
transfers across modalities by construction.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..modality import MODALITIES
from .tensorio import write_tensor

SCHEMA_VERSION = 1


def _default_token_shapes() -> dict[str, list[int]]:
    return {"video": [8, 12], "audio": [6, 10], "imu": [4, 8]}


def _default_noise() -> dict[str, float]:
    return {"video": 0.1, "audio": 0.5, "imu": 1.0}


@dataclass
class DatasetSpec:
    num_base_classes: int = 20
    num_novel_classes: int = 8
    base_examples_per_class: int = 60
    novel_examples_per_class: int = 40
    latent_dim: int = 16
    token_shapes: dict[str, list[int]] = field(default_factory=_default_token_shapes)
    modality_noise: dict[str, float] = field(default_factory=_default_noise)
    class_separation: float = 0.5
    class_spread: float = 0.2
    clip_correlation: float = 0.5
    unlabeled_pool_size: int = 2000
    clip_size: int = 4
    base_test_fraction: float = 0.25
    complementary: bool = False
    blind_gain: float = 0.1
    seed: int = 0

    def validate(self) -> "DatasetSpec":
        if self.num_base_classes < 2 or self.num_novel_classes < 2:
            raise ConfigError("need at least 2 base and 2 novel classes")
        if any(v < 0 for v in self.modality_noise.values()) or self.class_spread < 0:
            raise ConfigError("noise scales must be non-negative")
        if set(self.token_shapes) != set(MODALITIES) or set(self.modality_noise) != set(MODALITIES):
            raise ConfigError(f"token_shapes and modality_noise need entries for {MODALITIES}")
        if self.clip_size < 1 or self.latent_dim < 1:
            raise ConfigError("clip_size and latent_dim must be >= 1")
        if not 0 <= self.clip_correlation <= 1:
            raise ConfigError("clip_correlation must lie in [0, 1]")
        if not 0 < self.base_test_fraction < 1:
            raise ConfigError("base_test_fraction must lie in (0, 1)")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def preset(cls, name: str, **overrides) -> "DatasetSpec":
        """Named variants: ``default``; ``complementary`` (equal noise, each
        modality blind to a third of the latent); ``null`` (no class signal, and no
        clip-shared noise that would let same-clip examples find each other)."""
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
        return cls.from_dict({**PRESETS[name], **overrides})


PRESETS: dict[str, dict] = {
    "default": {},
    "complementary": {"complementary": True, "blind_gain": 0.0, "class_separation": 0.3,
                      "modality_noise": {m: 0.5 for m in MODALITIES}},
    "null": {"class_separation": 0.0, "clip_correlation": 0.0},
}


def generator_maps(spec: DatasetSpec) -> dict[str, np.ndarray]:
    """The fixed linear map (T*D_in, latent_dim) of every modality."""
    rng = np.random.default_rng([spec.seed, 7])
    maps = {}
    l = spec.latent_dim
    thirds = np.array_split(np.arange(l), len(MODALITIES))
    for i, m in enumerate(MODALITIES):
        t, d = spec.token_shapes[m]
        a = rng.standard_normal((t * d, l)) / np.sqrt(l)
        if spec.complementary:
            a[:, thirds[i]] *= spec.blind_gain
        maps[m] = a
    return maps


def _render(spec: DatasetSpec, maps, latent: np.ndarray, rng: np.random.Generator) -> dict[str, np.ndarray]:
    out = {}
    for m in MODALITIES:
        t, d = spec.token_shapes[m]
        clean = maps[m] @ latent
        noise = rng.standard_normal(t * d) * spec.modality_noise[m]
        out[m] = (clean + noise).reshape(t, d).astype(np.float32)
    return out


def generate_examples(spec: DatasetSpec):
    """Yield (record, tensors, latent) for every example, in manifest order."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 1])
    maps = generator_maps(spec)
    n_classes = spec.num_base_classes + spec.num_novel_classes
    means = rng.standard_normal((n_classes, spec.latent_dim)) * spec.class_separation
    base = [f"base_{i:03d}" for i in range(spec.num_base_classes)]
    novel = [f"novel_{i:03d}" for i in range(spec.num_novel_classes)]
    rho = spec.clip_correlation
    clip_counter = 0

    def clip_latents(mean, count):
        nonlocal clip_counter
        cid = f"clip_{clip_counter:05d}"
        clip_counter += 1
        shared = rng.standard_normal(spec.latent_dim)
        lat = []
        for _ in range(count):
            own = rng.standard_normal(spec.latent_dim)
            lat.append(mean + spec.class_spread * (np.sqrt(rho) * shared + np.sqrt(1 - rho) * own))
        return cid, lat

    counter = 0

    def emit(label, split, cid, latent):
        nonlocal counter
        eid = f"ex_{counter:06d}"
        counter += 1
        rec = {"id": eid, "clip_id": cid, "label": label, "split": split,
               "files": {m: f"{eid}/{m}.mmgt" for m in MODALITIES}}
        return rec, _render(spec, maps, latent, rng), latent

    for ci, name in enumerate(base):
        n = spec.base_examples_per_class
        clips = [min(spec.clip_size, n - s) for s in range(0, n, spec.clip_size)]
        n_test_clips = max(1, round(len(clips) * spec.base_test_fraction))
        for j, size in enumerate(clips):
            split = "base-test" if j >= len(clips) - n_test_clips else "base-train"
            cid, lats = clip_latents(means[ci], size)
            for lat in lats:
                yield emit(name, split, cid, lat)
    for ci, name in enumerate(novel):
        n = spec.novel_examples_per_class
        mean = means[spec.num_base_classes + ci]
        for s in range(0, n, spec.clip_size):
            cid, lats = clip_latents(mean, min(spec.clip_size, n - s))
            for lat in lats:
                yield emit(name, "novel", cid, lat)
    # unlabeled pool: latents from the base-class mixture, labels withheld
    remaining = spec.unlabeled_pool_size
    while remaining > 0:
        k = int(rng.integers(spec.num_base_classes))
        cid, lats = clip_latents(means[k], min(spec.clip_size, remaining))
        for lat in lats:
            yield emit(None, "unlabeled", cid, lat)
        remaining -= len(lats)


def generate_synthetic(spec: DatasetSpec, out_dir: str | os.PathLike) -> Path:
    """Write a dataset directory (tensors + manifest.json) for ``spec``."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for rec, tensors, _ in generate_examples(spec):
        ex_dir = out / rec["id"]
        ex_dir.mkdir(exist_ok=True)
        for m, arr in tensors.items():
            write_tensor(out / rec["files"][m], arr)
        records.append(rec)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "base_classes": [f"base_{i:03d}" for i in range(spec.num_base_classes)],
        "novel_classes": [f"novel_{i:03d}" for i in range(spec.num_novel_classes)],
        "examples": records,
    }
    _atomic_write(out / "synth_spec.json", json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n")
    write_manifest(out, manifest)
    return out


def write_manifest(root: str | os.PathLike, manifest: dict) -> None:
    _atomic_write(Path(root) / "manifest.json", json.dumps(manifest, indent=1) + "\n")


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
