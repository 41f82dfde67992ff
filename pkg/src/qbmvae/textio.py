"""Shared text encoding helpers.

Every on-disk artifact (model checkpoints, sample CSVs, metric tables) is
plain text with '.' decimals and '\n' newlines.  Floats are written with
``repr(float(x))``, the shortest string that round-trips to the identical
IEEE double, so save → load → save is byte-stable.
"""

from __future__ import annotations

import numpy as np


def fmt(x) -> str:
    """Render a scalar for text output (shortest exact form for floats)."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def floats_line(values) -> str:
    return " ".join(fmt(float(v)) for v in np.asarray(values, dtype=np.float64).ravel())


def parse_floats(text: str, expect: int | None = None, what: str = "values") -> np.ndarray:
    parts = text.split()
    try:
        arr = np.array([float(p) for p in parts], dtype=np.float64)
    except ValueError as exc:
        raise ValueError(f"malformed {what}: {exc}") from None
    if expect is not None and arr.size != expect:
        raise ValueError(f"expected {expect} {what}, got {arr.size}")
    return arr


def write_csv(path, header: list[str], rows) -> None:
    """Write rows of mixed scalars as CSV with deterministic formatting."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else fmt(v) for v in row))
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
