"""
===============================================================================
Project   : mvprompt
Module    : app/core/constants.py
Created   : 2025-11-03
Author    : Florian
Purpose   : This module provides general constants and settings, read from the
            environment (.env) with sensible defaults.

@docstyle: google
@language: english
@voice: imperative
===============================================================================
"""


import os
from dotenv import load_dotenv

load_dotenv()


def _int_env(name: str, default: int) -> int:
    """
    Reads an integer setting from the environment.

    Args:
        name (str): Name of the environment variable.
        default (int): Value used when the variable is unset or empty.

    Returns:
        int: The parsed value.

    Raises:
        RuntimeError: If the variable is set but not a valid integer.
    """
    raw = os.getenv(name, "").strip()
    if not raw:
        return default
    try:
        return int(raw)
    except ValueError:
        raise RuntimeError(f"Invalid {name} in .env: {raw}")


def _float_env(name: str, default: float) -> float:
    raw = os.getenv(name, "").strip()
    if not raw:
        return default
    try:
        return float(raw)
    except ValueError:
        raise RuntimeError(f"Invalid {name} in .env: {raw}")


# ============================================================================
# Decoding
# ============================================================================

# Generation stops once the closing ")]" of the tuple list has been produced
STOP_SEQUENCE = os.getenv("MVP_STOP_SEQUENCE", ")]")

MAX_CONTEXT_TOKENS = _int_env("MVP_MAX_CONTEXT_TOKENS", 16_384)
MAX_NEW_TOKENS = _int_env("MVP_MAX_NEW_TOKENS", 512)

# Multi-view decodes are greedy
MVP_TEMPERATURE = 0.0

# ============================================================================
# View selection / aggregation
# ============================================================================

DEFAULT_M = {
    "TASD": _int_env("MVP_DEFAULT_M_TASD", 5),
    "ASQP": _int_env("MVP_DEFAULT_M_ASQP", 17),
}

SC_SAMPLES = _int_env("MVP_SC_SAMPLES", 5)
SC_TEMPERATURE = _float_env("MVP_SC_TEMPERATURE", 0.8)

# Fraction of least confident instances escalated by the mvp_eff strategy
EFF_QUANTILE = _float_env("MVP_EFF_QUANTILE", 0.25)

# ============================================================================
# Grammar surface form
# ============================================================================

NULL_ASPECT = "NULL"
POLARITIES = ("positive", "negative", "neutral")
ELEMENT_SEPARATOR = ", "
TUPLE_SEPARATOR = ", "

# ============================================================================
# Scheduler / remote endpoint
# ============================================================================

MAX_IN_FLIGHT = _int_env("MVP_MAX_IN_FLIGHT", 4)

OPENAI_BASE_URL = os.getenv("OPENAI_BASE_URL", "http://127.0.0.1:8000/v1")
OPENAI_API_KEY = os.getenv("OPENAI_API_KEY", "EMPTY")
DEFAULT_MODEL = os.getenv("MVP_MODEL", "google/gemma-4-31b-it")
TOP_LOGPROBS = _int_env("MVP_TOP_LOGPROBS", 20)
# Served-model tokenizer: "tiktoken:<encoding>", a tokenizer.json path or a hub id
MODEL_TOKENIZER = os.getenv("MVP_MODEL_TOKENIZER") or None
REQUEST_TIMEOUT_SECONDS = _float_env("MVP_REQUEST_TIMEOUT", 120.0)

# Tolerance for probability mass checks
PROBABILITY_EPSILON = 1e-9
