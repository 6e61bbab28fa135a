"""8-bit binary PGM images and CSV tables."""

from __future__ import annotations

import csv
import os
import re
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = ["PGMError", "load_pgm", "save_pgm", "emit_csv", "read_csv", "atomic_write_bytes"]

_HEADER = re.compile(rb"P5(?:\s+|#[^\n]*\n)+")


class PGMError(ValueError):
    """Malformed or unsupported PGM file."""


def _tokens(data: bytes, count: int, pos: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PGMError("truncated PGM header")
        out.append(data[start:pos])
    return out, pos


def load_pgm(path) -> np.ndarray:
    """Load a binary (P5) 8-bit PGM as floats in [0, 1], shape ``(H, W)``."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise PGMError(f"{path}: not a binary PGM (P5)")
    toks, pos = _tokens(data, 3, 2)
    try:
        width, height, maxval = (int(t) for t in toks)
    except ValueError as exc:
        raise PGMError(f"{path}: malformed header") from exc
    if maxval != 255:
        raise PGMError(f"{path}: unsupported maxval {maxval}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PGMError(f"{path}: malformed header")
    pos += 1
    raster = data[pos:pos + width * height]
    if len(raster) != width * height:
        raise PGMError(f"{path}: expected {width * height} bytes, found {len(raster)}")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return img.astype(float) / 255.0


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_pgm(image, path) -> None:
    """Write ``image`` (values nominally in [0, 1]) as an 8-bit P5 PGM."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {img.shape}")
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + q.tobytes())


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def emit_csv(rows: Iterable[Sequence], schema: Sequence[str], path) -> Path:
    """Write ``rows`` under the header ``schema``; floats get 9 significant digits."""
    schema = list(schema)
    lines = []
    for i, row in enumerate(rows):
        row = list(row)
        if len(row) != len(schema):
            raise ValueError(f"row {i} has {len(row)} fields, schema has {len(schema)}")
        lines.append([_fmt(v) for v in row])
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(schema)
        w.writerows(lines)
    os.replace(tmp, path)
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]
