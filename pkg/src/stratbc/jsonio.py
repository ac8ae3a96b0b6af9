"""Canonical JSON encoding shared by every artifact writer.

One encoder, sorted keys, fixed separators: re-serializing a parsed document
reproduces the original bytes exactly, which the checkpoint and bank formats
rely on.
"""

from __future__ import annotations

import json
from pathlib import Path


def canonical_dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False)


def write_json(path, obj) -> None:
    Path(path).write_text(canonical_dumps(obj) + "\n", encoding="utf-8")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def dumps_jsonl_row(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def jround(x: float, ndigits: int = 9) -> float:
    """Round floats written to bulk JSONL files; idempotent under read/write."""
    return round(float(x), ndigits)
