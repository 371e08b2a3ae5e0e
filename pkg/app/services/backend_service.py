"""
===============================================================================
Project   : mvprompt
Module    : app/services/backend_service.py
Created   : 2025-11-06
Author    : Florian
Purpose   : Language-model backend contract: decode requests, per-token
            distributions, generation records and the masked decode loop
            shared by all backends that expose per-step distributions.

@docstyle: google
@language: english
@voice: imperative
===============================================================================
"""

import logging
import math
import random
from abc import ABC, abstractmethod
from collections.abc import Mapping
from dataclasses import dataclass, replace
from typing import Any, Optional

from app.core.constants import MAX_CONTEXT_TOKENS, MAX_NEW_TOKENS, PROBABILITY_EPSILON, STOP_SEQUENCE
from app.core.errors import ConfigError, ContextLengthError, InvalidDistributionError
from app.core.schemas import Permutation
from app.core.vocabulary import TokenCounter, TokenizerVocabulary
from app.helpers.entropy_helper import entropy, mean_confidence, mean_entropy
from app.services.grammar_service import (
    DecodeState,
    TupleSchema,
    advance,
    compile_schema,
    start_state,
    token_mask,
)

logger = logging.getLogger(__name__)


# ------------------------------
#  VALUE TYPES
# ------------------------------

@dataclass(frozen=True)
class TokenDistribution:
    """
    Next-token distribution of one decoding step.

    Attributes:
        probabilities (Mapping[int, float]): Probability per token id.
        coverage (float): Fraction of the total mass represented. 1.0 for
            local backends, below 1.0 for truncated top-k log-probabilities.
    """
    probabilities: Mapping[int, float]
    coverage: float = 1.0

    def __post_init__(self):
        total = 0.0
        for token_id, p in self.probabilities.items():
            if p < 0 or not math.isfinite(p):
                raise InvalidDistributionError(f"Token {token_id} has invalid probability {p}")
            total += p
        if total > 1.0 + PROBABILITY_EPSILON:
            raise InvalidDistributionError(f"Probabilities sum to {total:.12f} > 1")
        if not 0.0 <= self.coverage <= 1.0 + PROBABILITY_EPSILON:
            raise InvalidDistributionError(f"Coverage {self.coverage} is outside [0, 1]")


@dataclass(frozen=True)
class DecodeRequest:
    """
    One generation request.

    The full prompt is `prefix + suffix`; the split lets the scheduler pay
    the prefix once per group. Routing tags identify the request in logs and
    let simulated backends look up the instance and view.

    Attributes:
        prefix (str): Shared prompt prefix (descriptions, format, demonstrations).
        suffix (str): Per-instance part (input sentence and marker).
        schema (Optional[TupleSchema]): Grammar constraint; None for unconstrained decoding.
        stop_sequence (str): Generation halts once the output ends with it.
        max_tokens (int): Generation budget.
        temperature (float): 0 for greedy decoding.
        seed (Optional[int]): Sampling seed.
        request_id (str): Unique id within a run.
        instance_id (str): Id of the instance being predicted.
        permutation (Optional[Permutation]): Element order of the view.
        group_key (tuple): Prefix-group key (permutation id, shot sample id, task, dataset).
    """
    prefix: str
    suffix: str = ""
    schema: Optional[TupleSchema] = None
    stop_sequence: str = STOP_SEQUENCE
    max_tokens: int = MAX_NEW_TOKENS
    temperature: float = 0.0
    seed: Optional[int] = None
    request_id: str = ""
    instance_id: str = ""
    permutation: Optional[Permutation] = None
    group_key: tuple = ()

    def __post_init__(self):
        if self.max_tokens <= 0:
            raise ConfigError(f"max_tokens must be > 0, got {self.max_tokens}")
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")

    @property
    def prompt(self) -> str:
        return self.prefix + self.suffix


@dataclass(frozen=True)
class GenerationRecord:
    """
    Output of one decode with its per-token uncertainty.

    Attributes:
        tokens (tuple[int, ...]): Emitted token ids.
        token_texts (tuple[str, ...]): Surface text per token.
        text (str): The generated text.
        per_token (tuple[TokenDistribution, ...]): Distribution each token was drawn from.
        per_token_entropy (tuple[float, ...]): Entropy per step in nats.
        mean_entropy (float): Mean of per_token_entropy.
        per_token_confidence (tuple[float, ...]): Probability of each emitted token.
        premask_mean_entropy (Optional[float]): Mean entropy before grammar masking, when known.
        finish_reason (str): "stop" or "length".
        prompt_tokens (Optional[int]): Prompt tokens billed by the endpoint, when reported.
        completion_tokens (Optional[int]): Generated tokens billed by the endpoint, when reported.
    """
    tokens: tuple[int, ...]
    token_texts: tuple[str, ...]
    text: str
    per_token: tuple[TokenDistribution, ...]
    per_token_entropy: tuple[float, ...]
    mean_entropy: float
    per_token_confidence: tuple[float, ...]
    premask_mean_entropy: Optional[float] = None
    finish_reason: str = "stop"
    prompt_tokens: Optional[int] = None
    completion_tokens: Optional[int] = None

    @classmethod
    def from_steps(cls, tokens: list[int], token_texts: list[str], text: str,
                   per_token: list[TokenDistribution], confidences: list[float],
                   premask_entropies: Optional[list[float]] = None,
                   finish_reason: str = "stop") -> "GenerationRecord":
        """
        Assembles a record and derives the entropy fields.

        Raises:
            EmptyGenerationError: If no token was generated.
        """
        record = cls(
            tokens=tuple(tokens),
            token_texts=tuple(token_texts),
            text=text,
            per_token=tuple(per_token),
            per_token_entropy=tuple(entropy(d) for d in per_token),
            mean_entropy=0.0,
            per_token_confidence=tuple(confidences),
            finish_reason=finish_reason,
        )
        premask = sum(premask_entropies) / len(premask_entropies) if premask_entropies else None
        return replace(record, mean_entropy=mean_entropy(record), premask_mean_entropy=premask)

    @property
    def mean_confidence(self) -> float:
        return mean_confidence(self)


# ------------------------------
#  BACKENDS
# ------------------------------

class LanguageModelBackend(ABC):
    """
    Contract of all language-model backends.

    Backends must tolerate concurrent `generate` calls.

    Attributes:
        name (str): Short backend name used in logs and run metadata.
        vocabulary (Optional[TokenizerVocabulary]): Local tokenizer, if the
            backend has one. Enables context-length checks and token masking.
        token_counter (Optional[TokenCounter]): Counts prompt tokens for context
            checks and prefill ledgers. Defaults to the vocabulary; None skips both.
        max_context_tokens (int): Context window in tokens.
    """
    name: str = "backend"

    def __init__(self, vocabulary: Optional[TokenizerVocabulary] = None,
                 max_context_tokens: int = MAX_CONTEXT_TOKENS,
                 token_counter: Optional[TokenCounter] = None):
        self.vocabulary = vocabulary
        self.max_context_tokens = max_context_tokens
        self.token_counter = token_counter if token_counter is not None else vocabulary

    @abstractmethod
    def generate(self, request: DecodeRequest) -> GenerationRecord:
        """Runs one decode. Called through `decode`."""

    def describe(self) -> dict:
        return {"name": self.name, "max_context_tokens": self.max_context_tokens}


class SteppingBackend(LanguageModelBackend):
    """
    Backend exposing one next-token distribution per step.

    Subclasses implement `next_distribution`; this class runs the masked
    decode loop: restrict to the grammar mask, renormalize, then pick the
    argmax (temperature 0, lowest id on ties) or sample with the request seed.
    """

    def __init__(self, vocabulary: TokenizerVocabulary, max_context_tokens: int = MAX_CONTEXT_TOKENS):
        super().__init__(vocabulary=vocabulary, max_context_tokens=max_context_tokens)

    def open_stream(self, request: DecodeRequest) -> Any:
        """Creates per-request state handed to `next_distribution`."""
        return None

    @abstractmethod
    def next_distribution(self, stream: Any, request: DecodeRequest, generated: list[int],
                          state: Optional[DecodeState], allowed: Optional[set[int]]) -> Mapping[int, float]:
        """
        Returns the unmasked next-token distribution.

        Args:
            stream (Any): Value returned by `open_stream`.
            request (DecodeRequest): The request being decoded.
            generated (list[int]): Tokens emitted so far.
            state (Optional[DecodeState]): Grammar state, None when unconstrained.
            allowed (Optional[set[int]]): Grammar mask, None when unconstrained.
        """

    def generate(self, request: DecodeRequest) -> GenerationRecord:
        vocab = self.vocabulary
        state = start_state(compile_schema(request.schema)) if request.schema is not None else None
        rng = random.Random(request.seed)
        stop = request.stop_sequence.encode("utf-8")
        stream = self.open_stream(request)

        tokens: list[int] = []
        texts: list[str] = []
        dists: list[TokenDistribution] = []
        confidences: list[float] = []
        premask: list[float] = []
        data = bytearray()
        finish_reason = "length"

        for _ in range(request.max_tokens):
            allowed = token_mask(state, vocab) if state is not None else None
            if allowed is not None and not allowed:
                finish_reason = "stop"
                break
            raw = self.next_distribution(stream, request, tokens, state, allowed)
            premask.append(entropy(raw))
            dist = _restrict(raw, allowed)
            token_id = _choose(dist, request.temperature, rng)

            piece = vocab.token_bytes(token_id)
            if state is not None:
                state = advance(state, piece)
            tokens.append(token_id)
            texts.append(vocab.token_text(token_id))
            dists.append(TokenDistribution(dist))
            confidences.append(dist[token_id])
            data += piece
            if data.endswith(stop) and (state is None or state.accepting):
                finish_reason = "stop"
                break

        return GenerationRecord.from_steps(
            tokens, texts, data.decode("utf-8", errors="replace"), dists, confidences,
            premask_entropies=premask, finish_reason=finish_reason,
        )


def _restrict(raw: Mapping[int, float], allowed: Optional[set[int]]) -> dict[int, float]:
    """Keeps the allowed support and renormalizes it."""
    support = {t: p for t, p in raw.items() if p > 0 and (allowed is None or t in allowed)}
    total = sum(support.values())
    if total <= 0:
        raise InvalidDistributionError("The grammar mask removes all probability mass")
    return {t: p / total for t, p in sorted(support.items())}


def _choose(dist: dict[int, float], temperature: float, rng: random.Random) -> int:
    if temperature == 0:
        return min(dist, key=lambda t: (-dist[t], t))
    ids = sorted(dist)
    weights = [dist[t] ** (1.0 / temperature) for t in ids]
    return rng.choices(ids, weights=weights, k=1)[0]


def decode(backend: LanguageModelBackend, request: DecodeRequest) -> GenerationRecord:
    """
    Runs one request on a backend.

    Args:
        backend (LanguageModelBackend): The backend.
        request (DecodeRequest): The request.

    Returns:
        GenerationRecord: The generation with per-token uncertainty.

    Raises:
        ContextLengthError: If prompt plus generation budget exceed the context window.
        BackendError: On transport failures, empty masks and other backend errors.
    """
    counter = backend.token_counter
    if counter is not None:
        prompt_tokens = counter.count_tokens(request.prefix) + counter.count_tokens(request.suffix)
        if prompt_tokens + request.max_tokens > backend.max_context_tokens:
            raise ContextLengthError(
                f"Request {request.request_id or '?'}: {prompt_tokens} prompt tokens + "
                f"{request.max_tokens} new tokens exceed the context of {backend.max_context_tokens}"
            )
    record = backend.generate(request)
    logger.debug(f"[{backend.name}] {request.request_id}: {len(record.tokens)} tokens, "
                 f"mean entropy {record.mean_entropy:.4f}, finish={record.finish_reason}")
    return record
