"""Transformer fusion over modality tokens, modality dropout and the MLP baseline."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .encoders import LN_EPS, EncodedModality, block_param_count, gaussian, init_block
from .errors import ConfigError
from .modality import MODALITIES, ModalityMask
from .numcore import autograd as ag
from .numcore.autograd import Tensor, as_tensor
from .numcore.layers import layer_norm, linear, transformer_block

POOLINGS = ("mean", "cls")

REFERENCE_SCALE = dict(depth=2, heads=12, d_model=768)


@dataclass(frozen=True)
class FusionConfig:
    d_model: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 4
    pooling: str = "mean"
    modality_embeddings: bool = True

    def validate(self) -> "FusionConfig":
        if self.depth < 1:
            raise ConfigError("fusion depth must be >= 1")
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"fusion width {self.d_model} not divisible by {self.heads} heads")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}")
        return self


@dataclass
class UnifiedFeature:
    z: Tensor
    mask: ModalityMask


@dataclass(frozen=True)
class DropConfig:
    p: float = 0.6
    keep_at_least_one: bool = True

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"drop probability {self.p} outside [0, 1]")


def build_fusion(config: FusionConfig, seed: int) -> dict[str, Tensor]:
    config.validate()
    rng = np.random.default_rng([int(seed), 100])
    d = config.d_model
    p: dict[str, Tensor] = {}
    for m in MODALITIES:
        p[f"emb.{m}"] = ag.parameter(gaussian(rng, d), f"emb.{m}")
    for i in range(config.depth):
        p.update(init_block(rng, d, config.mlp_ratio, f"block{i}."))
    p["ln.g"] = ag.parameter(np.ones(d), "ln.g")
    p["ln.b"] = ag.parameter(np.zeros(d), "ln.b")
    p["cls"] = ag.parameter(gaussian(rng, d), "cls")
    return p


def fusion_param_count(config: FusionConfig, include_cls: bool = False) -> int:
    d = config.d_model
    n = config.depth * block_param_count(d, config.mlp_ratio) + 2 * d
    if config.modality_embeddings:
        n += len(MODALITIES) * d
    return n + (d if include_cls else 0)


def fuse_tokens(tokens: Mapping[str, Tensor], mask: ModalityMask, params: Mapping[str, Tensor],
                config: FusionConfig, pooling: str | None = None) -> Tensor:
    """Batched fusion: per-modality (..., T_m, D) tokens -> (..., D).

    Tokens of the masked-in modalities are concatenated in canonical order,
    each shifted by its modality embedding; masked-out modalities are not
    part of the sequence at all.
    """
    pooling = pooling or config.pooling
    if pooling not in POOLINGS:
        raise ConfigError(f"pooling must be one of {POOLINGS}")
    if not mask:
        raise ConfigError("fusion needs a non-empty modality mask")
    parts = []
    for m in mask:
        if m not in tokens:
            raise ConfigError(f"modality {m!r} is in the mask but missing from the input")
        t = as_tensor(tokens[m])
        if t.shape[-1] != config.d_model:
            raise ConfigError(f"{m} tokens have width {t.shape[-1]}, fusion expects {config.d_model}")
        parts.append(t + params[f"emb.{m}"] if config.modality_embeddings else t)
    x = parts[0] if len(parts) == 1 else ag.concat(parts, axis=-2)
    if pooling == "cls":
        lead = x.shape[:-2]
        cls = params["cls"].reshape((1,) * len(lead) + (1, config.d_model))
        if lead:
            cls = cls + np.zeros(lead + (1, config.d_model))
        x = ag.concat([cls, x], axis=-2)
    for i in range(config.depth):
        pre = f"block{i}."
        blk = {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}
        x = transformer_block(x, blk, config.heads, LN_EPS)
    x = layer_norm(x, params["ln.g"], params["ln.b"], LN_EPS)
    if pooling == "cls":
        return x[..., 0, :]
    return ag.ordered_mean(x, axis=-2)


def fuse(encoded: Mapping[str, EncodedModality] | list[EncodedModality], mask: ModalityMask,
         params: Mapping[str, Tensor], config: FusionConfig, pooling: str | None = None) -> UnifiedFeature:
    if not isinstance(encoded, Mapping):
        encoded = {e.modality: e for e in encoded}
    tokens = {m: e.tokens_out for m, e in encoded.items()}
    return UnifiedFeature(fuse_tokens(tokens, mask, params, config, pooling), mask)


def unimodal_project(encoded: EncodedModality, params: Mapping[str, Tensor], config: FusionConfig,
                     pooling: str | None = None) -> UnifiedFeature:
    if encoded.modality not in MODALITIES or f"emb.{encoded.modality}" not in params:
        raise ConfigError(f"no modality embedding for {encoded.modality!r}")
    return fuse({encoded.modality: encoded}, ModalityMask([encoded.modality]), params, config, pooling)


def sample_modality_drop(mask: ModalityMask, cfg: DropConfig, rng: np.random.Generator) -> ModalityMask:
    """Drop each present modality independently with probability ``cfg.p``.

    If every modality would be dropped, one of the input modalities is kept,
    chosen uniformly.
    """
    mask.require_nonempty()
    draws = rng.random(len(mask))
    kept = [m for m, u in zip(mask, draws) if u >= cfg.p]
    if not kept:
        kept = [mask.modalities[int(rng.integers(len(mask)))]]
    return ModalityMask(kept)


# ---------------------------------------------------------------------------
# MLP baseline


def mlp_hidden_width(config: FusionConfig) -> int:
    """Hidden width giving the MLP roughly the transformer's parameter count."""
    d = config.d_model
    target = fusion_param_count(config)
    # params = 3d*h + h + h*d + d
    return max(1, round((target - d) / (4 * d + 1)))


def mlp_param_count(d: int, hidden: int) -> int:
    return 3 * d * hidden + hidden + hidden * d + d


def build_mlp_fusion(config: FusionConfig, seed: int, hidden: int | None = None) -> dict[str, Tensor]:
    rng = np.random.default_rng([int(seed), 200])
    d = config.d_model
    h = hidden or mlp_hidden_width(config)
    return {
        "w1": ag.parameter(gaussian(rng, (3 * d, h)), "w1"),
        "b1": ag.parameter(np.zeros(h), "b1"),
        "w2": ag.parameter(gaussian(rng, (h, d)), "w2"),
        "b2": ag.parameter(np.zeros(d), "b2"),
    }


def mlp_fuse(pooled: Mapping[str, Tensor], mask: ModalityMask, mlp_params: Mapping[str, Tensor]) -> UnifiedFeature:
    """Concatenate (video, audio, imu) pooled features, zeros for masked-out
    slots, then a two-layer perceptron."""
    if not mask:
        raise ConfigError("fusion needs a non-empty modality mask")
    d = mlp_params["w2"].shape[1]
    if mlp_params["w1"].shape[0] != 3 * d:
        raise ConfigError("MLP fusion input width must be 3 * D")
    lead = None
    for m in mask:
        if m not in pooled:
            raise ConfigError(f"modality {m!r} is in the mask but missing from the input")
        lead = as_tensor(pooled[m]).shape[:-1]
    slots = [as_tensor(pooled[m]) if m in mask else Tensor(np.zeros(lead + (d,))) for m in MODALITIES]
    x = ag.concat(slots, axis=-1)
    h = ag.gelu(linear(x, mlp_params["w1"], mlp_params["b1"]))
    return UnifiedFeature(linear(h, mlp_params["w2"], mlp_params["b2"]), mask)
