"""Error handling utilities for gdaflow.

- ``GdaFlowError``: unified exception for expected failures with explicit codes.
- ``handle_errors``: wraps CLI commands to log via ``OperationLogger`` and exit with a
  compact JSON payload (`code`, `message`, `run_id`, optional context).

Usage:
- Apply ``@handle_errors`` to CLI command functions (not numerical code) so failures end
  the process with a sanitized payload and a nonzero exit code.
- Library code raises ``GdaFlowError`` (or subclasses) for invalid inputs, non-finite
  numbers and other anticipated problems.
- Unexpected exceptions are masked as ``INTERNAL_ERROR`` while retaining the original stack
  trace in logs.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Callable
from functools import wraps
from typing import Any, Final

import click

from .observability import get_current_operation_logger, get_last_operation_logger

logger = logging.getLogger(__name__)

_UNEXPECTED_ERROR_MESSAGE: Final[str] = "Unexpected error; see logs with run_id"
_USAGE_CODES: Final[frozenset[str]] = frozenset({"INVALID_INPUT", "CONFIG_ERROR"})


class GdaFlowError(ValueError):
    """Raised for expected/user-facing errors anywhere in gdaflow."""

    def __init__(self, message: str, *, code: str, context: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.code = code
        self.context = context or {}


class TransportError(GdaFlowError):
    """ODE integration produced a non-finite state."""

    def __init__(self, message: str, *, step_index: int, time: float) -> None:
        super().__init__(
            message,
            code="TRANSPORT_FAILED",
            context={"step_index": step_index, "time": time},
        )
        self.step_index = step_index
        self.time = time


class FlowDivergedError(GdaFlowError):
    """Flow training hit a non-finite loss; the history up to that point is attached."""

    def __init__(self, message: str, *, history: Any, context: dict[str, Any] | None = None) -> None:
        super().__init__(message, code="DIVERGED", context=context)
        self.history = history


class CommandFailed(click.ClickException):
    """Click exception carrying the JSON error payload and a chosen exit code."""

    def __init__(self, payload: dict[str, Any], exit_code: int) -> None:
        super().__init__(json.dumps(payload, ensure_ascii=False))
        self.exit_code = exit_code

    def format_message(self) -> str:
        return self.message


def handle_errors(func: Callable[..., Any]) -> Callable[..., Any]:
    @wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except GdaFlowError as exc:
            current_op = get_current_operation_logger()
            op = current_op or get_last_operation_logger()
            payload: dict[str, Any] = {
                "code": exc.code,
                "message": str(exc),
                "run_id": getattr(op, "run_id", None),
            }
            if exc.context:
                payload["context"] = exc.context

            if current_op is not None:
                current_op.error(str(exc), error_type=exc.code)
            else:
                logger.warning(
                    "command_error",
                    extra={
                        "event": "command_error",
                        "code": exc.code,
                        "command": func.__name__,
                    },
                )

            raise CommandFailed(payload, 2 if exc.code in _USAGE_CODES else 1) from None
        except click.ClickException:
            raise
        except Exception:  # pragma: no cover - compact envelope
            current_op = get_current_operation_logger()
            op = current_op or get_last_operation_logger()
            run_id = getattr(op, "run_id", None)

            logger.error(
                "unexpected_command_error",
                extra={"command": func.__name__, "run_id": run_id},
                exc_info=True,
            )

            if current_op is not None:
                current_op.error(
                    _UNEXPECTED_ERROR_MESSAGE,
                    error_type="INTERNAL_ERROR",
                    level=logging.ERROR,
                    exc_info=True,
                )

            payload = {
                "code": "INTERNAL_ERROR",
                "message": _UNEXPECTED_ERROR_MESSAGE,
                "run_id": run_id,
            }
            raise CommandFailed(payload, 1) from None

    return wrapper


__all__ = ["CommandFailed", "FlowDivergedError", "GdaFlowError", "TransportError", "handle_errors"]
