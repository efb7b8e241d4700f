"""Checkpoints: a zip of float64 MMGT parameter files plus a JSON header.

Entries are written in sorted order with a fixed timestamp, so identical
weights give identical bytes.
"""
from __future__ import annotations

import json
import os
import zipfile
from pathlib import Path

from ..dataeng.tensorio import decode_tensor, encode_tensor
from ..errors import DataError
from ..model import ModelConfig, MultimodalModel

FORMAT = "mmglab-checkpoint"
FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(path: str | os.PathLike, model: MultimodalModel, header: dict) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    head = {"format": FORMAT, "version": FORMAT_VERSION, **header, **model.describe()}
    tmp = p.with_name(p.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr(_entry("header.json"), json.dumps(head, sort_keys=True, indent=1))
        for name, arr in model.state().items():
            zf.writestr(_entry(f"params/{name}.mmgt"), encode_tensor(arr, dtype="float64"))
    os.replace(tmp, p)
    return p


def read_header(path: str | os.PathLike) -> dict:
    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint not found: {p}")
    try:
        with zipfile.ZipFile(p) as zf:
            head = json.loads(zf.read("header.json"))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{p}: not a readable checkpoint ({exc})") from exc
    if head.get("format") != FORMAT:
        raise DataError(f"{p}: unknown checkpoint format {head.get('format')!r}")
    return head


def load_checkpoint(path: str | os.PathLike) -> tuple[MultimodalModel, dict]:
    head = read_header(path)
    state = {}
    with zipfile.ZipFile(path) as zf:
        for name in zf.namelist():
            if name.startswith("params/") and name.endswith(".mmgt"):
                state[name[len("params/"):-len(".mmgt")]] = decode_tensor(zf.read(name), f"{path}:{name}")
    model = MultimodalModel(ModelConfig(**head["model"]),
                            {m: tuple(s) for m, s in head["token_shapes"].items()}, head["num_classes"])
    model.load_state(state)
    return model, head
