"""Modality names and masks."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Iterable

from .errors import ConfigError

MODALITIES: tuple[str, ...] = ("video", "audio", "imu")


@dataclass(frozen=True)
class ModalityMask:
    """An ordered, immutable subset of :data:`MODALITIES`."""

    modalities: tuple[str, ...]

    def __init__(self, modalities: Iterable[str] = ()):
        items = set(modalities)
        unknown = items - set(MODALITIES)
        if unknown:
            raise ConfigError(f"unknown modality: {sorted(unknown)}")
        object.__setattr__(self, "modalities", tuple(m for m in MODALITIES if m in items))

    @classmethod
    def parse(cls, text: str | Iterable[str]) -> "ModalityMask":
        """Parse ``"video,audio"`` (also accepts ``+`` or a list)."""
        if isinstance(text, str):
            parts = [p.strip().lower() for p in text.replace("+", ",").split(",")]
            parts = [p for p in parts if p]
        else:
            parts = list(text)
        return cls(parts)

    @classmethod
    def full(cls) -> "ModalityMask":
        return cls(MODALITIES)

    def __contains__(self, m: str) -> bool:
        return m in self.modalities

    def __iter__(self):
        return iter(self.modalities)

    def __len__(self) -> int:
        return len(self.modalities)

    def __bool__(self) -> bool:
        return bool(self.modalities)

    def __str__(self) -> str:
        return "+".join(self.modalities) if self.modalities else "none"

    def issubset(self, other: "ModalityMask") -> bool:
        return set(self.modalities) <= set(other.modalities)

    def isdisjoint(self, other: "ModalityMask") -> bool:
        return not set(self.modalities) & set(other.modalities)

    def require_nonempty(self) -> "ModalityMask":
        if not self.modalities:
            raise ConfigError("modality mask is empty")
        return self


def nonempty_masks(within: ModalityMask | None = None) -> list[ModalityMask]:
    """All non-empty subsets of ``within`` (default: every modality)."""
    base = (within or ModalityMask.full()).modalities
    return [ModalityMask(c) for r in range(len(base), 0, -1) for c in combinations(base, r)]
