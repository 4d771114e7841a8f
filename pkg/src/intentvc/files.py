"""JSON/JSONL helpers with atomic writes."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

from .errors import AnnotationParseError, InputError

__all__ = ["atomic_write_bytes", "atomic_write_text", "write_json", "write_jsonl", "read_jsonl",
           "read_captions", "read_references"]


def atomic_write_bytes(path, data):
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, ensure_ascii=False) + "\n")


def write_jsonl(path, rows):
    atomic_write_text(path, "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in rows))


def read_jsonl(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise AnnotationParseError(path, f"cannot read: {exc.strerror or exc}") from exc
    rows = []
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise AnnotationParseError(path, exc.msg, n) from exc
    return rows


def _caption_rows(path):
    for n, row in enumerate(read_jsonl(path), start=1):
        if not isinstance(row, dict) or not isinstance(row.get("video_id"), str) \
                or not isinstance(row.get("caption"), str):
            raise AnnotationParseError(path, 'each line needs string "video_id" and "caption"', n)
        yield row["video_id"], row["caption"]


def read_captions(path):
    """``video_id -> caption``; a repeated video id is an error."""
    out = {}
    for vid, cap in _caption_rows(path):
        if vid in out:
            raise InputError(f"{path}: video {vid} appears more than once")
        out[vid] = cap
    return out


def read_references(path):
    """``video_id -> [captions]``; ids repeat once per reference."""
    out = {}
    for vid, cap in _caption_rows(path):
        out.setdefault(vid, []).append(cap)
    return out
