"""Run records and their JSON / CSV renderings."""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..errors import DataError

CSV_COLUMNS = ("setting", "task", "train_mask", "test_mask", "metric", "value", "ci", "seed", "config_hash")


@dataclass
class ResultRow:
    train_mask: str
    test_mask: str
    metric: str
    value: float
    ci: float = 0.0


@dataclass
class RunRecord:
    setting: str
    task: str
    seed: int
    config_hash: str
    stages: list[dict]
    rows: list[ResultRow]
    checkpoint: str = ""
    wall_time: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        d["rows"] = [ResultRow(**r) for r in d["rows"]]
        return cls(**d)


def render_csv(records: list[RunRecord]) -> str:
    """Byte-stable CSV: fixed column order, rows sorted, floats as %.6f."""
    lines = []
    for r in records:
        for row in r.rows:
            lines.append((r.setting, r.task, row.train_mask, row.test_mask, row.metric,
                          f"{row.value:.6f}", f"{row.ci:.6f}", str(r.seed), r.config_hash))
    lines.sort()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(lines)
    return buf.getvalue()


def write_report(records: list[RunRecord], out_dir: str | os.PathLike) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath, cpath = out / "results.json", out / "results.csv"
    payload = sorted((r.to_dict() for r in records), key=lambda d: (d["setting"], d["task"], d["seed"]))
    jpath.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    cpath.write_text(render_csv(records), encoding="utf-8")
    return jpath, cpath


def load_records(path: str | os.PathLike) -> list[RunRecord]:
    """Records from a results.json file, or from every results.json below a directory."""
    p = Path(path)
    files = sorted(p.rglob("results.json")) if p.is_dir() else [p]
    if not files or not all(f.exists() for f in files):
        raise DataError(f"no results.json found at {p}")
    out = []
    for f in files:
        try:
            out.extend(RunRecord.from_dict(d) for d in json.loads(f.read_text(encoding="utf-8")))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{f}: malformed results ({exc})") from exc
    return out


def merge_records(old: list[RunRecord], new: list[RunRecord]) -> list[RunRecord]:
    key = lambda r: (r.setting, r.task, r.seed, r.config_hash)  # noqa: E731
    merged = {key(r): r for r in old}
    merged.update({key(r): r for r in new})
    return list(merged.values())
