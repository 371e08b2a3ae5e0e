"""
===============================================================================
Project   : mvprompt
Module    : app/core/logging.py
Created   : 2025-11-03
Author    : Florian
Purpose   : This module provides logging utilities for mvprompt runs.

@docstyle: google
@language: english
@voice: imperative
===============================================================================
"""


import logging
import os
from pathlib import Path

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


def setup_logging(level: str | int | None = None, log_file: str | Path | None = None):
    """
    Initialize the global logging configuration.

    The level can be configured either via argument or the environment variable `LOG_LEVEL`.
    Example: LOG_LEVEL=DEBUG

    Args:
        level (str | int | None): Desired log level (e.g. 'DEBUG', 'INFO', 'WARNING').
                                  Overrides environment setting if provided.
        log_file (str | Path | None): If given, also log to this file.

    Returns:
        None
    """

    # --- Determine the effective log level ---
    env_level = os.getenv("LOG_LEVEL", "INFO").upper()
    if level is None:
        level = env_level

    if isinstance(level, str):
        level = getattr(logging, level.upper(), logging.INFO)

    handlers: list[logging.Handler] = [logging.StreamHandler()]

    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(logging.Formatter(LOG_FORMAT, DATE_FORMAT))
        handlers.append(file_handler)

    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        datefmt=DATE_FORMAT,
        handlers=handlers,
        force=True,
    )

    logging.getLogger().debug(f"Logging initialized at level: {logging.getLevelName(level)}")


def get_run_logger(run_dir: str | Path) -> logging.Logger:
    """
    Get or create the run logger that records the progress of one experiment run.

    Messages go to `<run_dir>/run.log` only; they do not propagate to the console.
    A logger already attached to a different run directory is re-pointed.

    Args:
        run_dir (str | Path): Directory of the current run.

    Returns:
        logging.Logger: Configured run logger instance.
    """
    run_logger = logging.getLogger("run")
    log_path = str(Path(run_dir) / "run.log")

    for handler in list(run_logger.handlers):
        if getattr(handler, "baseFilename", None) != os.path.abspath(log_path):
            run_logger.removeHandler(handler)
            handler.close()

    if not run_logger.handlers:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(log_path, encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(asctime)s [RUN] %(message)s", DATE_FORMAT))
        run_logger.addHandler(handler)

        # Inherit global level
        run_logger.setLevel(logging.getLogger().level or logging.INFO)
        run_logger.propagate = False

    return run_logger
