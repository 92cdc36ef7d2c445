"""Atomic file output and delimited-table formatting."""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def fmt(value, digits: int = 6) -> str:
    """Text-table cell: 6 significant digits for reals, verbatim otherwise."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        out = f"{value:.{digits}g}"
        return "0" if out == "-0" else out
    if isinstance(value, np.integer):
        return str(int(value))
    if isinstance(value, np.floating):
        return fmt(float(value), digits)
    return str(value)


def parse_floats(texts: Iterable[str]) -> np.ndarray:
    """Parse decimal strings exactly (correctly rounded); blanks and junk become NaN.

    ``pandas.to_numeric`` can be off by one ulp, which breaks write/read
    round trips at 17 significant digits.
    """

    def one(s: str) -> float:
        try:
            v = float(s)
        except ValueError:
            return math.nan
        return v if math.isfinite(v) else math.nan

    texts = list(texts)
    return np.fromiter((one(s) for s in texts), dtype=float, count=len(texts))


def render_table(header: Sequence[str], rows: Iterable[Sequence], delimiter: str = ",") -> str:
    lines = [delimiter.join(header)]
    for row in rows:
        lines.append(delimiter.join(fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def write_table(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    atomic_write_text(path, render_table(header, rows))


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default, allow_nan=True) + "\n"


def write_json(path, obj) -> None:
    atomic_write_text(path, dumps_json(obj))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
