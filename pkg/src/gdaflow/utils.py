"""Shared utility functions for gdaflow."""

from __future__ import annotations

import hashlib
import os
import tempfile
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np


def json_safe_default(value: Any) -> Any:
    """Convert non-JSON-serializable types to JSON-safe values.

    Designed to be used as the `default` parameter to `json.dumps()`:
    - numpy scalars -> Python scalars
    - numpy arrays -> nested lists
    - Path -> string
    - Enum -> its value
    - Objects with model_dump() (pydantic) -> the dumped mapping
    - All others -> string representation
    """
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, Enum):
        return getattr(value, "value", str(value))
    if hasattr(value, "model_dump"):
        try:
            return value.model_dump(mode="json")
        except Exception:
            return str(value)
    return str(value)


def _key_to_int(key: Any) -> int:
    if isinstance(key, (int, np.integer)) and not isinstance(key, bool):
        return int(key) & 0xFFFFFFFF
    if isinstance(key, (float, np.floating)):
        # time indices: 1e-9 resolution keeps 1.3 and 1.3000000000000003 on one stream
        key = f"t={round(float(key), 9) + 0.0:.9f}"
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def derive_seed(root: int, *keys: Any) -> int:
    """Split ``root`` deterministically into a child seed for the component named by ``keys``."""

    entropy = [int(root) & 0xFFFFFFFF, (int(root) >> 32) & 0xFFFFFFFF]
    spawn_key = tuple(_key_to_int(key) for key in keys)
    state = np.random.SeedSequence(entropy, spawn_key=spawn_key).generate_state(2, np.uint32)
    return (int(state[0]) << 31 | int(state[1]) >> 1) & ((1 << 63) - 1)


def rng_for(root: int, *keys: Any) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, *keys))


def format_float(value: float) -> str:
    """Decimal text with 17 significant digits (round-trips every double)."""

    return f"{float(value):.17g}"


def atomic_write_text(path: str | os.PathLike[str], text: str) -> Path:
    """Write ``text`` to ``path`` via a temp file + rename so readers never see partial files."""

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp_name, target)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return target
