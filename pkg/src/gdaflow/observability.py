from __future__ import annotations

import json
import logging
import sys
import uuid
from collections.abc import Mapping
from contextlib import AbstractContextManager
from contextvars import ContextVar, Token
from time import perf_counter
from typing import Any

from gdaflow.utils import json_safe_default

logger = logging.getLogger(__name__)


_current_logger: ContextVar[OperationLogger | None] = ContextVar(
    "gdaflow_operation_logger", default=None
)
_last_logger: ContextVar[OperationLogger | None] = ContextVar(
    "gdaflow_operation_logger_last", default=None
)


def configure_logging(level: str = "INFO", log_file: str | None = None) -> None:
    """Install stderr (and optional file) handlers on the root logger."""

    handlers: list[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=handlers,
        force=True,
    )


class OperationLogger(AbstractContextManager["OperationLogger"]):
    """Context manager that emits structured logs for pipeline operations."""

    def __init__(self, op_name: str, **context: Any) -> None:
        self.op_name = op_name
        self.context: dict[str, Any] = {
            key: value for key, value in context.items() if value is not None
        }
        provided_run_id = self.context.pop("run_id", None)
        self.run_id = provided_run_id or uuid.uuid4().hex
        self._start: float | None = None
        self._completed = False
        self._token: Token[OperationLogger | None] | None = None

    def __enter__(self) -> OperationLogger:
        self._start = perf_counter()
        self._token = _current_logger.set(self)
        _last_logger.set(self)
        logger.info("op_start", extra=self._log_fields(event="op_start"))
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        if not self._completed:
            if exc is not None:
                self.error(str(exc), error_type=exc_type.__name__)
            else:
                self.success({})
        if self._token is not None:
            _current_logger.reset(self._token)
        return False

    def success(self, summary: Mapping[str, Any]) -> None:
        """Log ``op_success`` once, with ``summary`` as a sorted JSON string."""

        self._finish(
            logging.INFO,
            "op_success",
            summary=json.dumps(dict(summary), sort_keys=True, default=json_safe_default),
        )

    def error(
        self,
        message: str,
        *,
        error_type: str | None = None,
        level: int = logging.WARNING,
        exc_info: Any | None = None,
    ) -> None:
        self._finish(level, "op_error", exc_info=exc_info, error=message, error_type=error_type)

    def update_context(self, **context: Any) -> None:
        for key, value in context.items():
            if value is not None:
                self.context[key] = value

    def elapsed_ms(self) -> float:
        if self._start is None:
            return 0.0
        return round((perf_counter() - self._start) * 1000, 2)

    def _finish(self, level: int, event: str, *, exc_info: Any | None = None, **fields: Any) -> None:
        logger.log(
            level,
            event,
            extra=self._log_fields(event=event, duration_ms=self.elapsed_ms(), **fields),
            exc_info=exc_info,
        )
        self._completed = True
        _last_logger.set(self)

    def _log_fields(self, **extra: Any) -> dict[str, Any]:
        fields = {"op_name": self.op_name, "run_id": self.run_id}
        fields.update(self.context)
        fields.update(extra)
        return fields


def operation_logger(op_name: str, **context: Any) -> OperationLogger:
    """Helper for creating an :class:`OperationLogger` instance."""

    return OperationLogger(op_name, **context)


def get_current_operation_logger() -> OperationLogger | None:
    return _current_logger.get()


def get_last_operation_logger() -> OperationLogger | None:
    return _last_logger.get()


__all__ = [
    "OperationLogger",
    "configure_logging",
    "operation_logger",
    "get_current_operation_logger",
    "get_last_operation_logger",
]
