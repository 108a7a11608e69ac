"""Deterministic CSV/JSON writers; every file carries the config hash and version."""

import hashlib
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

from . import __version__


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def meta(config: dict) -> dict:
    return {"config_hash": config_hash(config), "tool_version": __version__}


def fmt(value) -> str:
    """CSV cell: floats with 17 significant digits, no locale formatting."""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return format(value, ".17g")
    if value is None:
        return ""
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence], config: dict) -> None:
    m = meta(config)
    lines = [f"# config_hash={m['config_hash']} tool_version={m['tool_version']}", ",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_csv(path: Path) -> list:
    """Rows as dicts of strings, skipping ``#`` comment lines."""
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    header = lines[0].split(",")
    return [dict(zip(header, ln.split(","))) for ln in lines[1:]]


def clean(obj):
    """Recursively make ``obj`` strict-JSON: numpy scalars to Python, NaN to null, inf to a string."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if hasattr(obj, "tolist"):
        return clean(obj.tolist())
    if isinstance(obj, float):
        if math.isnan(obj):
            return None
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
    return obj


def write_json(path: Path, obj: dict, config: dict) -> None:
    out = clean(obj)
    out["meta"] = meta(config)
    Path(path).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_jsonl(path: Path, records: Iterable[dict], config: dict) -> None:
    """JSON lines; the first line is a ``{"meta": ...}`` record that readers skip."""
    lines = [json.dumps({"meta": meta(config)}, sort_keys=True)]
    lines += [json.dumps(clean(r)) for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
