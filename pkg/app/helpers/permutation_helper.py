"""
===============================================================================
Project   : mvprompt
Module    : app/helpers/permutation_helper.py
Created   : 2025-11-04
Author    : Florian
Purpose   : Enumerates element-order permutations (views) and samples nested
            few-shot demonstration sets.

@docstyle: google
@language: english
@voice: imperative
===============================================================================
"""

import itertools
import random

from pydantic import ValidationError

from app.core.errors import ConfigError, InsufficientPoolError
from app.core.schemas import ElementKind, Instance, Permutation, ShotConfig, Task


def all_permutations(task: Task) -> list[Permutation]:
    """
    Returns every ordering of the task's elements.

    The order is canonical: lexicographic over the element codes, so that
    "ac-at-ot-p" comes first for ASQP. TASD yields 6 permutations, ASQP 24.

    Args:
        task (Task): The extraction task.

    Returns:
        list[Permutation]: All arity! permutations in canonical order.
    """
    codes = sorted(e.value for e in task.elements)
    return [
        Permutation(task=task, order=tuple(ElementKind(c) for c in order))
        for order in itertools.permutations(codes)
    ]


def default_permutation(task: Task) -> Permutation:
    """The natural element order: (at, ac, p) for TASD, (at, ac, ot, p) for ASQP."""
    return Permutation(task=task, order=task.elements)


def permutation_from_id(task: Task, permutation_id: str) -> Permutation:
    """
    Parses a canonical permutation id such as "at-ot-ac-p".

    Raises:
        ConfigError: If the id is not a permutation of the task's elements.
    """
    try:
        order = tuple(ElementKind(code) for code in permutation_id.split("-"))
        return Permutation(task=task, order=order)
    except (ValueError, ValidationError):
        raise ConfigError(f"'{permutation_id}' is not a valid {task.kind.value} permutation")


def sample_shots(config: ShotConfig, k: int) -> list[Instance]:
    """
    Samples k demonstrations from the pool.

    The pool is shuffled once with the configured seed and the first k
    entries are returned, so samples are nested: the 10-shot set is the
    prefix of the 50-shot set under the same seed. Demonstrations keep the
    sampling order.

    Args:
        config (ShotConfig): Pool and seed.
        k (int): Number of demonstrations.

    Returns:
        list[Instance]: The sampled demonstrations.

    Raises:
        InsufficientPoolError: If k exceeds the pool size.
    """
    if k < 0:
        raise ConfigError(f"Number of demonstrations must be >= 0, got {k}")
    if k > len(config.pool):
        raise InsufficientPoolError(f"{k} demonstrations requested but the pool holds only {len(config.pool)}")
    order = list(range(len(config.pool)))
    random.Random(config.seed).shuffle(order)
    return [config.pool[i] for i in order[:k]]


def shot_sample_id(seed: int, k: int) -> str:
    """Stable identifier of a demonstration sample, used in prefix-group keys."""
    return f"seed{seed}-k{k}"
