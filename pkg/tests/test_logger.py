"""Tests for logging setup."""

import logging

import pytest
from rich.logging import RichHandler

from mask_volume_synth.logger import get_logger, setup_logging


@pytest.fixture(autouse=True)
def _restore_root_logger():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    for handler in root.handlers:
        handler.close()
    root.handlers[:] = handlers
    root.setLevel(level)


def test_console_handler_is_rich():
    """Test the default console handler renders with rich."""
    setup_logging(logging.INFO)
    handlers = logging.getLogger().handlers
    assert len(handlers) == 1
    assert isinstance(handlers[0], RichHandler)


def test_plain_console_handler():
    """Test rich rendering can be switched off."""
    setup_logging(logging.INFO, rich_console=False)
    handler = logging.getLogger().handlers[0]
    assert type(handler) is logging.StreamHandler


def test_log_file_receives_records(tmp_path):
    """Test records reach the log file in the plain format."""
    log_file = tmp_path / "logs" / "run.log"
    setup_logging(logging.DEBUG, log_file=log_file, console_output=False)
    get_logger("mask_volume_synth.test").info("window 3 done")
    for handler in logging.getLogger().handlers:
        handler.flush()

    text = log_file.read_text(encoding="utf-8")
    assert "mask_volume_synth.test - INFO - window 3 done" in text


def test_repeated_setup_replaces_handlers():
    """Test setup does not stack handlers across commands."""
    setup_logging(logging.INFO)
    setup_logging(logging.WARNING)
    root = logging.getLogger()
    assert len(root.handlers) == 1
    assert root.level == logging.WARNING


def test_chatty_libraries_quieted():
    """Test torch and PIL stay at WARNING even under DEBUG."""
    setup_logging(logging.DEBUG, console_output=False)
    assert logging.getLogger("torch").level == logging.WARNING
    assert logging.getLogger("PIL").level == logging.WARNING


def test_get_logger_returns_named_logger():
    """Test get_logger is a thin wrapper over logging.getLogger."""
    assert get_logger("mask_volume_synth.sampler") is logging.getLogger("mask_volume_synth.sampler")
