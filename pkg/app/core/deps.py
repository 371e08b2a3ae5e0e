"""
===============================================================================
Project   : mvprompt
Module    : app/core/deps.py
Created   : 2025-11-03
Author    : Florian
Purpose   : This module provides shared paths and the Jinja2 environment used
            for prompt templates.

@docstyle: google
@language: english
@voice: imperative
===============================================================================
"""

from functools import lru_cache
from pathlib import Path

from jinja2 import Environment, FileSystemLoader, StrictUndefined


# Base directory: one level above "app"
BASE_DIR = Path(__file__).resolve().parent.parent.parent

# Default prompt templates shipped with the project
PROMPTS_DIR = BASE_DIR / "prompts"

# Default location of run artifacts
OUTPUT_DIR = BASE_DIR / "runs"


@lru_cache(maxsize=8)
def prompt_environment(template_dir: str | None = None) -> Environment:
    """
    Returns the Jinja2 environment for a prompt template directory.

    Environments are cached per directory. Undefined placeholders raise instead
    of rendering as empty strings, and trailing newlines are kept so that the
    prompt prefix is byte-stable.

    Args:
        template_dir (str | None): Directory holding the template files. Defaults to PROMPTS_DIR.

    Returns:
        Environment: A configured Jinja2 environment.
    """
    directory = template_dir or str(PROMPTS_DIR)
    env = Environment(
        loader=FileSystemLoader(directory),
        undefined=StrictUndefined,
        keep_trailing_newline=True,
        autoescape=False,
    )
    return env
