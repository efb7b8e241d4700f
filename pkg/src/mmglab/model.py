"""The multimodal network: per-modality encoders, a fusion module and heads.

All parameters live in one flat ``name -> Tensor`` mapping so optimisers and
checkpoints treat the model uniformly:

* ``enc.<modality>.*``  encoder weights
* ``fusion.*``          transformer fusion (or ``mlpfusion.*`` for the MLP baseline)
* ``head.*``            classifier on the fused feature
* ``unihead.<modality>.*``  classifiers used during unimodal pretraining
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from .encoders import EncoderConfig, ModalityShape, build_encoder, encode_tokens, init_head
from .errors import ConfigError
from .fusion import FusionConfig, build_fusion, build_mlp_fusion, fuse_tokens, mlp_fuse
from .modality import MODALITIES, ModalityMask
from .numcore.autograd import Tensor, parameter
from .numcore.layers import linear

FUSION_KINDS = ("attention", "mlp")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    encoder_depth: int = 2
    encoder_heads: int = 4
    fusion_depth: int = 2
    fusion_heads: int = 4
    mlp_ratio: int = 4
    pooling: str = "mean"
    fusion_kind: str = "attention"
    modality_embeddings: bool = True

    def validate(self) -> "ModelConfig":
        if self.fusion_kind not in FUSION_KINDS:
            raise ConfigError(f"fusion_kind must be one of {FUSION_KINDS}")
        self.fusion_config().validate()
        return self

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(self.d_model, self.fusion_depth, self.fusion_heads, self.mlp_ratio,
                            self.pooling, self.modality_embeddings)

    def encoder_config(self, token_shapes: Mapping[str, tuple[int, int]]) -> EncoderConfig:
        shapes = {m: ModalityShape(input_width=int(token_shapes[m][1]), tokens=int(token_shapes[m][0]),
                                   depth=self.encoder_depth, heads=self.encoder_heads)
                  for m in MODALITIES}
        return EncoderConfig(self.d_model, self.mlp_ratio, shapes).validate()

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MultimodalModel:
    config: ModelConfig
    token_shapes: dict[str, tuple[int, int]]
    num_classes: int
    params: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self):
        self.config.validate()
        self.token_shapes = {m: tuple(int(v) for v in s) for m, s in self.token_shapes.items()}
        self.encoder_config = self.config.encoder_config(self.token_shapes)
        self.fusion_config = self.config.fusion_config()
        self._views: dict[str, dict[str, Tensor]] = {}

    # -- construction --------------------------------------------------
    @classmethod
    def create(cls, config: ModelConfig, token_shapes, num_classes: int, seed: int) -> "MultimodalModel":
        model = cls(config, dict(token_shapes), num_classes)
        model.reset_encoders(seed)
        model.reset_fusion(seed)
        model.reset_head(num_classes, seed)
        return model

    def _set_prefix(self, prefix: str, values: Mapping[str, Tensor]) -> None:
        for k in [k for k in self.params if k.startswith(prefix)]:
            del self.params[k]
        for k, v in values.items():
            v.name = prefix + k
            self.params[prefix + k] = v
        self._views.clear()

    def reset_encoders(self, seed: int, modalities=MODALITIES) -> None:
        fresh = build_encoder(self.encoder_config, seed)
        for m in modalities:
            self._set_prefix(f"enc.{m}.", fresh[m])

    def reset_fusion(self, seed: int) -> None:
        if self.config.fusion_kind == "attention":
            self._set_prefix("fusion.", build_fusion(self.fusion_config, seed))
        else:
            self._set_prefix("mlpfusion.", build_mlp_fusion(self.fusion_config, seed))

    def reset_head(self, num_classes: int, seed: int) -> None:
        rng = np.random.default_rng([int(seed), 300])
        self.num_classes = num_classes
        self._set_prefix("head.", init_head(self.config.d_model, num_classes, rng))

    def reset_unimodal_heads(self, num_classes: int, seed: int) -> None:
        for i, m in enumerate(MODALITIES):
            rng = np.random.default_rng([int(seed), 400 + i])
            self._set_prefix(f"unihead.{m}.", init_head(self.config.d_model, num_classes, rng))

    # -- parameter views -----------------------------------------------
    def group(self, prefix: str) -> dict[str, Tensor]:
        view = self._views.get(prefix)
        if view is None:
            n = len(prefix)
            view = {k[n:]: v for k, v in self.params.items() if k.startswith(prefix)}
            self._views[prefix] = view
        return view

    def subset(self, *prefixes: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefixes)}

    @property
    def fusion_prefix(self) -> str:
        return "fusion." if self.config.fusion_kind == "attention" else "mlpfusion."

    # -- forward -------------------------------------------------------
    def encode(self, modality: str, tokens) -> tuple[Tensor, Tensor]:
        if modality not in MODALITIES:
            raise ConfigError(f"unknown modality {modality!r}")
        return encode_tokens(tokens, self.group(f"enc.{modality}."), self.encoder_config.shapes[modality])

    def fuse(self, encoded: Mapping[str, tuple[Tensor, Tensor]], mask: ModalityMask) -> Tensor:
        if self.config.fusion_kind == "attention":
            toks = {m: encoded[m][0] for m in mask if m in encoded}
            return fuse_tokens(toks, mask, self.group("fusion."), self.fusion_config)
        pooled = {m: encoded[m][1] for m in mask if m in encoded}
        return mlp_fuse(pooled, mask, self.group("mlpfusion.")).z

    def embed(self, tokens: Mapping[str, np.ndarray | Tensor], mask: ModalityMask) -> Tensor:
        """Encode the masked-in modalities and fuse them: (B, T, D_in) -> (B, D)."""
        mask.require_nonempty()
        encoded = {m: self.encode(m, tokens[m]) for m in mask}
        return self.fuse(encoded, mask)

    def logits(self, z) -> Tensor:
        h = self.group("head.")
        return linear(z, h["w"], h["b"])

    def unimodal_logits(self, modality: str, pooled) -> Tensor:
        h = self.group(f"unihead.{modality}.")
        return linear(pooled, h["w"], h["b"])

    def features(self, tokens: Mapping[str, np.ndarray], mask: ModalityMask) -> np.ndarray:
        return self.embed({m: np.asarray(tokens[m], dtype=np.float64) for m in mask}, mask).data

    @property
    def width(self) -> int:
        return self.config.d_model

    # -- state ---------------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in sorted(self.params.items())}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        self.params = {k: parameter(np.array(v, dtype=np.float64), k) for k, v in state.items()}
        self._views.clear()
        if "head.b" in self.params:
            self.num_classes = self.params["head.b"].shape[0]

    def clone(self) -> "MultimodalModel":
        twin = MultimodalModel(self.config, dict(self.token_shapes), self.num_classes)
        twin.load_state(self.state())
        return twin

    def describe(self) -> dict:
        return {"model": self.config.to_dict(),
                "token_shapes": {m: list(s) for m, s in self.token_shapes.items()},
                "num_classes": self.num_classes}


class UnimodalFeatureModel:
    """Pooled output of a single encoder, used as a unimodal few-shot baseline."""

    def __init__(self, model: MultimodalModel, modality: str):
        self.model = model
        self.modality = modality

    @property
    def width(self) -> int:
        return self.model.width

    def features(self, tokens: Mapping[str, np.ndarray], mask: ModalityMask) -> np.ndarray:
        if tuple(mask) != (self.modality,):
            raise ConfigError(f"unimodal {self.modality} model only accepts mask {{{self.modality}}}")
        return self.model.encode(self.modality, np.asarray(tokens[self.modality], dtype=np.float64))[1].data

