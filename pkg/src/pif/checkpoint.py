"""Plain-text persistence: named tensors and flat key=value files.

Named-tensor files hold one tensor per line::

    name 3x4 v1 v2 ... v12

Values are written with 17 significant digits, which round-trips float64
exactly, so re-saving a loaded file reproduces it byte for byte.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

from .treeio import FormatError


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_named_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    lines = []
    for name, arr in tensors.items():
        if not name or any(ch.isspace() for ch in name):
            raise ValueError(f"tensor name {name!r} must be non-empty without whitespace")
        arr = np.asarray(arr, dtype=np.float64)
        shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "1"
        values = " ".join(fmt(v) for v in arr.reshape(-1))
        lines.append(f"{name} {shape} {values}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_named_tensors(path: str | Path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) < 2:
            raise FormatError("expected 'name shape values...'", line=lineno)
        name, shape_s, values = parts[0], parts[1], parts[2:]
        try:
            shape = tuple(int(d) for d in shape_s.split("x"))
            data = np.array([float(v) for v in values], dtype=np.float64)
        except ValueError:
            raise FormatError(f"unparsable shape or value in tensor {name!r}", line=lineno) from None
        if data.size != int(np.prod(shape)):
            raise FormatError(f"tensor {name!r} has {data.size} values for shape {shape}", line=lineno)
        out[name] = data.reshape(shape)
    return out


def write_kv(path: str | Path, values: Mapping[str, object]) -> None:
    lines = [f"{k}={_kv_str(v)}\n" for k, v in values.items()]
    Path(path).write_text("".join(lines), encoding="utf-8")


def _kv_str(v: object) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_kv(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"expected key=value, got {raw!r}", line=lineno)
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
