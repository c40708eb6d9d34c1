"""Artifact formats: embedding dumps (CSV), report envelopes (JSON) and CSV series."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import IoError
from .geom import ModalityBatchSet, modality_set

FORMAT_VERSION = "1"
FIXED_COLUMNS = ["modality", "sample_id", "label"]


def format_float(x: float) -> str:
    """17 significant digits, trailing zeros kept: parses back to the same double."""
    return format(float(x), "#.17g")


def dump_rows(s: ModalityBatchSet, sample_ids: Sequence[int] | None = None) -> list[list[str]]:
    ids = np.arange(s.B) if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
    if ids.shape != (s.B,) or np.unique(ids).size != s.B:
        raise IoError("sample ids must be unique, one per sample")
    order = np.argsort(ids, kind="stable")
    width = max(b.d for b in s.batches)
    rows = [FIXED_COLUMNS + [f"e{j}" for j in range(width)]]
    for name, arr in zip(s.modality_names, s.arrays()):
        pad = [""] * (width - arr.shape[1])
        for i in order:
            rows.append([name, str(int(ids[i])), str(int(s.labels[i])), *map(format_float, arr[i]), *pad])
    return rows


def write_embedding_dump(path: str | Path, s: ModalityBatchSet, sample_ids: Sequence[int] | None = None) -> Path:
    """Rows grouped by modality (in set order), sorted by sample id."""
    path = Path(path)
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(dump_rows(s, sample_ids))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(buf.getvalue(), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write embedding dump {str(path)!r}: {exc.strerror}") from exc
    return path


def parse_embedding_dump(text: str, source: str = "<dump>") -> ModalityBatchSet:
    """Parse and validate dump text; sample ids end up in ``aux["sample_ids"]``."""
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if not rows:
        raise IoError(f"{source}: empty embedding dump")
    header = rows[0]
    width = len(header) - len(FIXED_COLUMNS)
    if header[:3] != FIXED_COLUMNS or width < 1 or header[3:] != [f"e{j}" for j in range(width)]:
        raise IoError(f"{source}: header must be modality,sample_id,label,e0,...")
    per_mod: dict[str, dict[int, tuple[int, list[float]]]] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise IoError(f"{source}:{lineno}: expected {len(header)} fields, got {len(row)}")
        name = row[0]
        try:
            sid, label = int(row[1]), int(row[2])
            cells = row[3:]
            n = len(cells)
            while n and cells[n - 1] == "":
                n -= 1
            vec = [float(c) for c in cells[:n]]
        except ValueError as exc:
            raise IoError(f"{source}:{lineno}: {exc}") from exc
        if not vec or not all(math.isfinite(v) for v in vec):
            raise IoError(f"{source}:{lineno}: embedding must be nonempty and finite")
        entries = per_mod.setdefault(name, {})
        if sid in entries:
            raise IoError(f"{source}:{lineno}: duplicate sample_id {sid} in modality {name!r}")
        entries[sid] = (label, vec)
    names = list(per_mod)
    ids = sorted(per_mod[names[0]])
    arrays = []
    for name in names:
        entries = per_mod[name]
        if sorted(entries) != ids:
            raise IoError(f"{source}: modality {name!r} covers different sample ids")
        widths = {len(entries[i][1]) for i in ids}
        if len(widths) != 1:
            raise IoError(f"{source}: modality {name!r} mixes embedding widths {sorted(widths)}")
        arrays.append(np.array([entries[i][1] for i in ids]))
    labels = []
    for i in ids:
        ls = {per_mod[n][i][0] for n in names}
        if len(ls) != 1:
            raise IoError(f"{source}: sample_id {i} has conflicting labels {sorted(ls)}")
        labels.append(ls.pop())
    s = modality_set(arrays, np.array(labels, dtype=np.int64), names)
    s.aux["sample_ids"] = np.array(ids, dtype=np.int64)
    return s


def read_embedding_dump(path: str | Path) -> ModalityBatchSet:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise IoError(f"cannot read embedding dump {str(path)!r}: {exc}") from exc
    return parse_embedding_dump(text, str(path))


def to_jsonable(obj):
    """Plain JSON types; numpy scalars and arrays unwrap, non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


@dataclass
class ReportEnvelope:
    command: str
    config_echo: dict
    seed: int
    results: dict
    version: str = FORMAT_VERSION
    started_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))

    def to_dict(self) -> dict:
        d = to_jsonable(asdict(self))
        return {k: d[k] for k in ("version", "command", "config_echo", "seed", "started_at", "results")}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False, allow_nan=False) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.to_json(), encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot write report {str(path)!r}: {exc.strerror}") from exc
        return path


def read_envelope(path: str | Path) -> ReportEnvelope:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise IoError(f"cannot read report {str(path)!r}: {exc}") from exc
    missing = {"version", "command", "config_echo", "seed", "started_at", "results"} - set(d)
    if missing:
        raise IoError(f"{path}: report lacks {sorted(missing)}")
    return ReportEnvelope(d["command"], d["config_echo"], d["seed"], d["results"], d["version"], d["started_at"])


def write_csv(path: str | Path, rows: list[list]) -> Path:
    path = Path(path)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in rows:
        w.writerow([format_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(buf.getvalue(), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {str(path)!r}: {exc.strerror}") from exc
    return path
