"""Small per-modality transformer encoders and the unimodal classifier head.

These stand in for full video/audio/IMU backbones: each maps a
(T_m, D_in_m) token array to (T_m, D) with a shared width D.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError
from .modality import MODALITIES
from .numcore import autograd as ag
from .numcore.autograd import Tensor, as_tensor
from .numcore.layers import layer_norm, linear, transformer_block

INIT_SCALE = 0.02
LN_EPS = 1e-5


@dataclass(frozen=True)
class ModalityShape:
    input_width: int
    tokens: int
    depth: int = 2
    heads: int = 4


def _default_shapes() -> dict[str, ModalityShape]:
    return {
        "video": ModalityShape(input_width=12, tokens=8),
        "audio": ModalityShape(input_width=10, tokens=6),
        "imu": ModalityShape(input_width=8, tokens=4),
    }


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    mlp_ratio: int = 4
    shapes: Mapping[str, ModalityShape] = field(default_factory=_default_shapes)

    def validate(self) -> "EncoderConfig":
        if self.d_model < 1 or self.mlp_ratio < 1:
            raise ConfigError("d_model and mlp_ratio must be positive")
        for m, s in self.shapes.items():
            if m not in MODALITIES:
                raise ConfigError(f"unknown modality {m!r} in encoder config")
            if s.depth < 1 or s.tokens < 1 or s.input_width < 1:
                raise ConfigError(f"{m}: depth, tokens and input width must be >= 1")
            if self.d_model % s.heads:
                raise ConfigError(f"{m}: d_model {self.d_model} not divisible by {s.heads} heads")
        return self


@dataclass
class ModalitySample:
    modality: str
    tokens: np.ndarray
    source_example_id: str = ""


@dataclass
class EncodedModality:
    modality: str
    tokens_out: Tensor
    pooled: Tensor


def gaussian(rng: np.random.Generator, shape, scale: float = INIT_SCALE) -> np.ndarray:
    return rng.standard_normal(shape) * scale


def init_block(rng: np.random.Generator, d: int, mlp_ratio: int, prefix: str) -> dict[str, Tensor]:
    h = d * mlp_ratio
    arrays = {
        "ln1.g": np.ones(d), "ln1.b": np.zeros(d),
        "attn.wq": gaussian(rng, (d, d)), "attn.bq": np.zeros(d),
        "attn.wk": gaussian(rng, (d, d)), "attn.bk": np.zeros(d),
        "attn.wv": gaussian(rng, (d, d)), "attn.bv": np.zeros(d),
        "attn.wo": gaussian(rng, (d, d)), "attn.bo": np.zeros(d),
        "ln2.g": np.ones(d), "ln2.b": np.zeros(d),
        "mlp.w1": gaussian(rng, (d, h)), "mlp.b1": np.zeros(h),
        "mlp.w2": gaussian(rng, (h, d)), "mlp.b2": np.zeros(d),
    }
    return {prefix + k: ag.parameter(v, prefix + k) for k, v in arrays.items()}


def block_param_count(d: int, mlp_ratio: int) -> int:
    return (4 + 2 * mlp_ratio) * d * d + (9 + mlp_ratio) * d


def encoder_param_count(config: EncoderConfig, modality: str) -> int:
    s, d = config.shapes[modality], config.d_model
    return (s.input_width * d + d) + s.depth * block_param_count(d, config.mlp_ratio) + 2 * d + (d * d + d)


def _modality_rng(seed: int, modality: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), 1 + MODALITIES.index(modality)])


def build_encoder(config: EncoderConfig, seed: int) -> dict[str, dict[str, Tensor]]:
    """Fresh parameters for every configured modality, keyed by modality."""
    config.validate()
    out = {}
    for m, s in config.shapes.items():
        rng = _modality_rng(seed, m)
        d = config.d_model
        p: dict[str, Tensor] = {
            "in.w": ag.parameter(gaussian(rng, (s.input_width, d)), "in.w"),
            "in.b": ag.parameter(np.zeros(d), "in.b"),
        }
        for i in range(s.depth):
            p.update(init_block(rng, d, config.mlp_ratio, f"block{i}."))
        p["ln.g"] = ag.parameter(np.ones(d), "ln.g")
        p["ln.b"] = ag.parameter(np.zeros(d), "ln.b")
        p["out.w"] = ag.parameter(gaussian(rng, (d, d)), "out.w")
        p["out.b"] = ag.parameter(np.zeros(d), "out.b")
        out[m] = p
    return out


def encode_tokens(tokens, params: Mapping[str, Tensor], shape: ModalityShape) -> tuple[Tensor, Tensor]:
    """Batched encoder forward: (..., T, D_in) -> tokens (..., T, D), pooled (..., D)."""
    x = as_tensor(tokens)
    if x.shape[-1] != shape.input_width:
        raise ConfigError(f"token width {x.shape[-1]} != configured {shape.input_width}")
    h = linear(x, params["in.w"], params["in.b"])
    for i in range(shape.depth):
        blk = {k[len(f"block{i}."):]: v for k, v in params.items() if k.startswith(f"block{i}.")}
        h = transformer_block(h, blk, shape.heads, LN_EPS)
    h = layer_norm(h, params["ln.g"], params["ln.b"], LN_EPS)
    out = linear(h, params["out.w"], params["out.b"])
    return out, ag.ordered_mean(out, axis=-2)


def encode(sample: ModalitySample, params: Mapping[str, Mapping[str, Tensor]],
           config: EncoderConfig) -> EncodedModality:
    if sample.modality not in params or sample.modality not in config.shapes:
        raise ConfigError(f"no encoder for modality {sample.modality!r}")
    tokens = np.asarray(sample.tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ConfigError("a modality sample needs a (T, D_in) token array with T >= 1")
    out, pooled = encode_tokens(tokens, params[sample.modality], config.shapes[sample.modality])
    return EncodedModality(sample.modality, out, pooled)


def init_head(d: int, num_classes: int, rng: np.random.Generator, prefix: str = "") -> dict[str, Tensor]:
    return {
        prefix + "w": ag.parameter(gaussian(rng, (d, num_classes)), prefix + "w"),
        prefix + "b": ag.parameter(np.zeros(num_classes), prefix + "b"),
    }


def unimodal_logits(encoded: EncodedModality | Tensor, head_params: Mapping[str, Tensor],
                    num_classes: int) -> Tensor:
    """Linear classifier on the pooled feature."""
    feat = encoded.pooled if isinstance(encoded, EncodedModality) else as_tensor(encoded)
    w, b = head_params["w"], head_params["b"]
    if w.shape[0] != feat.shape[-1]:
        raise ConfigError(f"head expects width {w.shape[0]}, feature has {feat.shape[-1]}")
    if w.shape[1] != num_classes or b.shape[0] != num_classes:
        raise ConfigError(f"head has {w.shape[1]} classes, expected {num_classes}")
    return linear(feat, w, b)
