"""Textual flow checkpoints.

Layout::

    GDAFLOW-CKPT 1
    {"D": ..., "K": ..., "steps_per_unit_time": ..., ...}   # one JSON line
    0x1.91eb851eb851fp+1                                  # one float.hex() per parameter

Hex floats make the write/read round trip bit-exact.
"""

from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError

from ..diffmath.mlp import MlpSpec, ParamVector
from ..errors import GdaFlowError
from ..utils import atomic_write_text
from .flow import FlowModel, flow_layout

logger = logging.getLogger(__name__)

MAGIC = "GDAFLOW-CKPT"
FORMAT_VERSION = 1


def _header(flow: FlowModel) -> dict[str, Any]:
    return {
        "D": flow.dim,
        "K": flow.horizon,
        "steps_per_unit_time": flow.steps_per_unit_time,
        "block_count": flow.block_count,
        "mlp_spec": flow.velocity_spec.model_dump(mode="json"),
        "gamma": flow.gamma,
        "m": flow.m,
        "time_indices": list(flow.time_indices),
    }


def dumps_flow(flow: FlowModel) -> str:
    lines = [f"{MAGIC} {FORMAT_VERSION}", json.dumps(_header(flow), sort_keys=True)]
    lines.extend(float(v).hex() for v in flow.params.values)
    return "\n".join(lines) + "\n"


def save_flow(flow: FlowModel, path: str | os.PathLike[str]) -> Path:
    target = atomic_write_text(path, dumps_flow(flow))
    logger.info(
        "flow_checkpoint_saved",
        extra={"event": "flow_checkpoint_saved", "path": str(target), "size": len(flow.params)},
    )
    return target


def _bad(message: str, line: int, **context: Any) -> GdaFlowError:
    return GdaFlowError(
        f"Malformed flow checkpoint (line {line}): {message}",
        code="INVALID_INPUT",
        context={"line": line, **context},
    )


def loads_flow(text: str) -> FlowModel:
    lines = text.splitlines()
    if not lines or lines[0].split() != [MAGIC, str(FORMAT_VERSION)]:
        raise _bad(f"expected '{MAGIC} {FORMAT_VERSION}'", 1)
    if len(lines) < 2:
        raise _bad("missing header", 2)
    try:
        header = json.loads(lines[1])
        spec = MlpSpec.model_validate(header["mlp_spec"])
        block_count = int(header["block_count"])
    except (ValueError, KeyError, TypeError, ValidationError) as exc:
        raise _bad(f"invalid header ({type(exc).__name__})", 2) from None

    layout = flow_layout(spec, block_count)
    body = lines[2:]
    if len(body) != layout.size:
        raise _bad(
            "parameter count does not match the header",
            len(lines),
            expected=layout.size,
            got=len(body),
        )
    values = np.empty(layout.size)
    for i, token in enumerate(body):
        try:
            values[i] = float.fromhex(token.strip())
        except ValueError:
            raise _bad("not a hex float", i + 3) from None
        if not np.isfinite(values[i]):
            raise _bad("non-finite parameter", i + 3)

    try:
        return FlowModel(
            dim=int(header["D"]),
            horizon=float(header["K"]),
            velocity_spec=spec,
            params=ParamVector(values, layout),
            steps_per_unit_time=int(header["steps_per_unit_time"]),
            block_count=block_count,
            gamma=float(header["gamma"]),
            m=int(header["m"]),
            time_indices=tuple(float(t) for t in header.get("time_indices", ())),
        )
    except (KeyError, TypeError) as exc:
        raise _bad(f"invalid header ({type(exc).__name__})", 2) from None


def load_flow(path: str | os.PathLike[str]) -> FlowModel:
    source = Path(path)
    if not source.is_file():
        raise GdaFlowError(
            f"Flow checkpoint not found: {source}",
            code="NOT_FOUND",
            context={"path": str(source)},
        )
    return loads_flow(source.read_text(encoding="utf-8"))


__all__ = ["FORMAT_VERSION", "MAGIC", "dumps_flow", "load_flow", "loads_flow", "save_flow"]
