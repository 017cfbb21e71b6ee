"""Logging infrastructure for Mask Volume Synth."""

import logging
import sys
from pathlib import Path
from typing import Optional

from rich.logging import RichHandler

DEFAULT_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# torch and PIL are chatty at DEBUG
_QUIET_LOGGERS = ("PIL", "matplotlib", "torch")


def setup_logging(
    level: int = logging.INFO,
    log_file: Optional[Path] = None,
    log_format: Optional[str] = None,
    console_output: bool = True,
    rich_console: bool = True,
) -> None:
    """Set up logging for a command run.

    Args:
        level: Logging level (e.g., logging.INFO, logging.DEBUG)
        log_file: Optional path to a log file that receives the plain format
        log_format: Optional custom log format string for the file handler
        console_output: Whether to log to the console
        rich_console: Render console records with rich instead of a plain stream
    """
    if log_format is None:
        log_format = DEFAULT_FORMAT

    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    root_logger.handlers.clear()

    if console_output:
        if rich_console:
            console_handler: logging.Handler = RichHandler(
                show_path=False, rich_tracebacks=False, markup=False
            )
            console_handler.setFormatter(logging.Formatter("%(name)s: %(message)s"))
        else:
            console_handler = logging.StreamHandler(sys.stderr)
            console_handler.setFormatter(logging.Formatter(log_format))
        console_handler.setLevel(level)
        root_logger.addHandler(console_handler)

    if log_file:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setLevel(level)
        file_handler.setFormatter(logging.Formatter(log_format))
        root_logger.addHandler(file_handler)

    for name in _QUIET_LOGGERS:
        logging.getLogger(name).setLevel(max(level, logging.WARNING))

    logger = logging.getLogger(__name__)
    logger.debug(f"Logging initialized at level {logging.getLevelName(level)}")
    if log_file:
        logger.debug(f"Logging to file: {log_file}")


def get_logger(name: str) -> logging.Logger:
    """Get a logger instance.

    Args:
        name: Name for the logger (typically __name__)

    Returns:
        Logger instance
    """
    return logging.getLogger(name)
