"""
===============================================================================
Project   : mvprompt
Module    : app/helpers/entropy_helper.py
Created   : 2025-11-05
Author    : Florian
Purpose   : Token-level entropy and confidence of generations.

@docstyle: google
@language: english
@voice: imperative
===============================================================================
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from typing import TYPE_CHECKING

import numpy as np

from app.core.errors import EmptyGenerationError, InvalidDistributionError

if TYPE_CHECKING:
    from app.services.backend_service import GenerationRecord, TokenDistribution


def entropy(dist: "TokenDistribution | Mapping[int, float]", base: float | None = None) -> float:
    """
    Computes the Shannon entropy of a next-token distribution.

    The distribution is renormalized over its support first, so a truncated
    top-k distribution is scored as if the returned tokens were the whole
    vocabulary. Zero probabilities contribute nothing (0 * ln 0 = 0).

    Args:
        dist (TokenDistribution | Mapping[int, float]): The distribution.
        base (float | None): Logarithm base. Defaults to e (nats).

    Returns:
        float: Non-negative entropy.

    Raises:
        InvalidDistributionError: On negative or all-zero probability mass.
    """
    probabilities = dist.probabilities if hasattr(dist, "probabilities") else dist
    p = np.fromiter(probabilities.values(), dtype=np.float64, count=len(probabilities))
    if p.size == 0 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InvalidDistributionError("Distribution has no valid probability mass")
    total = p.sum()
    if total <= 0.0:
        raise InvalidDistributionError("Distribution has zero probability mass")
    p = p[p > 0] / total
    h = float(-np.sum(p * np.log(p)))
    if base is not None:
        h /= math.log(base)
    return max(h, 0.0)


def mean_entropy(record: "GenerationRecord") -> float:
    """
    Averages the per-token entropies of a generation.

    Raises:
        EmptyGenerationError: If the generation has no tokens.
    """
    if not record.per_token_entropy:
        raise EmptyGenerationError("Mean entropy of an empty generation is undefined")
    return float(np.mean(record.per_token_entropy))


def mean_confidence(record: "GenerationRecord") -> float:
    """Averages the probabilities of the emitted tokens."""
    if not record.per_token_confidence:
        raise EmptyGenerationError("Mean confidence of an empty generation is undefined")
    return float(np.mean(record.per_token_confidence))
