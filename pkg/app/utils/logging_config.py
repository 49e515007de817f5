"""Structured logging configuration for the pipeline."""

import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from app.utils.config import settings


LOGGER_NAME = "repogen_reflex"

# Extra attributes copied into the JSON payload when present on a record
STRUCTURED_FIELDS = (
    "task_id",
    "iteration",
    "role_tag",
    "backend_id",
    "latency_ms",
    "attempt",
    "em",
    "es",
    "stop_reason",
    "iterations_run",
    "error_type",
)


class StructuredFormatter(logging.Formatter):
    """Custom formatter for structured JSON logging."""

    def format(self, record: logging.LogRecord) -> str:
        """Format log record as JSON."""
        log_data = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }

        for field in STRUCTURED_FIELDS:
            if hasattr(record, field):
                log_data[field] = getattr(record, field)

        if record.exc_info:
            log_data["exception"] = self.formatException(record.exc_info)

        return json.dumps(log_data, default=str)


def setup_logging(log_level: str = "INFO", log_dir: Optional[str] = None) -> logging.Logger:
    """
    Configure structured logging for the pipeline.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_dir: Directory for JSON log files; console only when empty

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(logging.DEBUG)
    logger.handlers.clear()
    logger.propagate = False

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(getattr(logging, log_level.upper(), logging.INFO))
    console_handler.setFormatter(logging.Formatter(
        "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    ))
    logger.addHandler(console_handler)

    if log_dir:
        logs_path = Path(log_dir)
        logs_path.mkdir(parents=True, exist_ok=True)
        stamp = datetime.now().strftime("%Y%m%d")

        file_handler = logging.FileHandler(logs_path / f"agent_{stamp}.log")
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(StructuredFormatter())
        logger.addHandler(file_handler)

        error_handler = logging.FileHandler(logs_path / f"errors_{stamp}.log")
        error_handler.setLevel(logging.ERROR)
        error_handler.setFormatter(StructuredFormatter())
        logger.addHandler(error_handler)

    return logger


def set_console_level(log_level: str) -> None:
    """Change the console verbosity without touching file handlers (used by --trace)."""
    for handler in logger.handlers:
        if not isinstance(handler, logging.FileHandler):
            handler.setLevel(getattr(logging, log_level.upper(), logging.INFO))


# Global logger instance; file handlers are attached by the CLI
logger = setup_logging(log_level=settings.log_level)


def redact(text: str, secret: Optional[str]) -> str:
    """Replace every occurrence of a secret with a fixed marker."""
    if not secret:
        return text
    return text.replace(secret, "***REDACTED***")


def log_iteration(task_id: str, iteration: int, em: int, es: float, generated_line: str):
    """
    Log one completed loop pass.

    Args:
        task_id: Task identifier
        iteration: Iteration index (from 0)
        em: Exact match of the generated line
        es: Edit similarity of the generated line
        generated_line: Post-processed prediction
    """
    logger.info(
        f"Iteration {iteration} of {task_id}: EM={em} ES={es:.4f}",
        extra={
            "task_id": task_id,
            "iteration": iteration,
            "em": em,
            "es": es,
        },
    )
    logger.debug(f"Generated line: {generated_line!r}", extra={"task_id": task_id, "iteration": iteration})


def log_retrieval(task_id: str, iteration: int, target_lines: list, trace: list):
    """Log the retrieval target and top-k scores at DEBUG level."""
    logger.debug(
        f"Retrieved {len(trace)} snippets for {task_id} (target of {len(target_lines)} lines)",
        extra={"task_id": task_id, "iteration": iteration},
    )
    for entry in trace:
        logger.debug(
            f"  {entry.file_path}:{entry.start_line}-{entry.end_line} score={entry.score:.4f}",
            extra={"task_id": task_id, "iteration": iteration},
        )


def log_backend_call(backend_id: str, role_tag: str, latency_ms: float, task_id: Optional[str] = None):
    """Log a completed backend request."""
    logger.debug(
        f"Backend {backend_id} answered {role_tag} request in {latency_ms:.1f} ms",
        extra={
            "backend_id": backend_id,
            "role_tag": role_tag,
            "latency_ms": latency_ms,
            "task_id": task_id,
        },
    )


def log_task_result(task_id: str, stop_reason: str, iterations_run: int, em: int, es: float):
    """Log the final outcome of a task's loop."""
    logger.info(
        f"Task {task_id} stopped ({stop_reason}) after {iterations_run} iterations: EM={em} ES={es:.4f}",
        extra={
            "task_id": task_id,
            "stop_reason": stop_reason,
            "iterations_run": iterations_run,
            "em": em,
            "es": es,
        },
    )


def log_error(error_type: str, error_message: str, task_id: Optional[str] = None, **kwargs):
    """
    Log error with context.

    Args:
        error_type: Type/category of error
        error_message: Error message
        task_id: Optional task identifier
        **kwargs: Additional context
    """
    extra = {"error_type": error_type, "task_id": task_id}
    extra.update(kwargs)

    logger.error(error_message, extra=extra)
