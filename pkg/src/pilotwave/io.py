"""Bit-stable CSV emission.

Every file starts with ``# config_hash=<hex>``; numbers are written with 17
significant digits so equal doubles always render to equal text.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

import numpy as np


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    x = float(x)
    if np.isnan(x):
        return "nan"
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.16e}"


def write_csv(path, columns, rows, chash: str = "", comments=()):
    """Write a CSV table with the config-hash header line."""
    path = Path(path)
    lines = [f"# config_hash={chash}"]
    lines += [f"# {c}" for c in comments]
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    tmp = path.with_suffix(path.suffix + ".part")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)
    return path
