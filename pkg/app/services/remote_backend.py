"""
===============================================================================
Project   : mvprompt
Module    : app/services/remote_backend.py
Created   : 2025-11-07
Author    : Florian
Purpose   : Client for hosted models behind an OpenAI-compatible
            chat/completions endpoint with log-probabilities enabled.

@docstyle: google
@language: english
@voice: imperative
===============================================================================
"""

import logging
import math
import os
from dataclasses import replace
from typing import Optional

import httpx
import openai
from openai import OpenAI

from app.core.constants import MAX_CONTEXT_TOKENS, OPENAI_API_KEY, REQUEST_TIMEOUT_SECONDS
from app.core.errors import BackendError, ContextLengthError, TransportError
from app.core.schemas import BackendSpec
from app.core.vocabulary import TokenCounter, load_model_tokenizer
from app.services.backend_service import (
    DecodeRequest,
    GenerationRecord,
    LanguageModelBackend,
    TokenDistribution,
)
from app.services.grammar_service import export_ebnf

logger = logging.getLogger(__name__)


def get_client(spec: BackendSpec) -> OpenAI:
    api_key = os.getenv(spec.api_key_env, OPENAI_API_KEY)
    return OpenAI(base_url=spec.base_url, api_key=api_key, timeout=REQUEST_TIMEOUT_SECONDS)


def check_health(spec: BackendSpec) -> bool:
    """Pings the /models route of the endpoint."""
    try:
        resp = httpx.get(f"{spec.base_url.rstrip('/')}/models", timeout=REQUEST_TIMEOUT_SECONDS)
        return resp.status_code == 200
    except httpx.HTTPError:
        return False


def _is_context_overflow(error: Exception) -> bool:
    code = getattr(error, "code", None) or ""
    message = str(error).lower()
    return code == "context_length_exceeded" or "context length" in message or "maximum context" in message


def _distribution(item) -> tuple[TokenDistribution, int, float]:
    """
    Builds the step distribution from one logprob entry.

    Token ids are positions within the returned top-k list; the emitted token
    is appended when the server left it out.

    Returns:
        tuple[TokenDistribution, int, float]: Distribution, emitted id, emitted probability.
    """
    tops = list(item.top_logprobs or [])
    probabilities: dict[int, float] = {}
    emitted: Optional[int] = None
    for idx, alt in enumerate(tops):
        probabilities[idx] = math.exp(alt.logprob)
        if emitted is None and alt.token == item.token:
            emitted = idx
    if emitted is None:
        emitted = len(tops)
        probabilities[emitted] = math.exp(item.logprob)

    total = sum(probabilities.values())
    if total > 1.0:
        # server-side rounding can push the top-k mass past 1
        probabilities = {k: v / total for k, v in probabilities.items()}
        total = 1.0
    return TokenDistribution(probabilities, coverage=total), emitted, math.exp(item.logprob)


class RemoteBackend(LanguageModelBackend):
    """
    Hosted model backend.

    Sends the prompt as one user message with `logprobs=True` and
    `top_logprobs=k`. The grammar is forwarded as `guided_grammar` when the
    endpoint enforces grammars server-side; callers parse-validate every
    output regardless. Entropy is computed over the renormalized top-k
    support and the covered mass is recorded per token.

    Prompt tokens are counted with the served model's tokenizer when
    `spec.tokenizer` names one. Without it the local context check is skipped
    and the endpoint's reported usage is the only token count.

    Attributes:
        spec (BackendSpec): Endpoint, model and top-k settings.
        client (OpenAI): The API client.
    """
    name = "remote"

    def __init__(self, spec: BackendSpec, max_context_tokens: int = MAX_CONTEXT_TOKENS,
                 client: Optional[OpenAI] = None, token_counter: Optional[TokenCounter] = None):
        if token_counter is None and spec.tokenizer:
            token_counter = load_model_tokenizer(spec.tokenizer)
        super().__init__(vocabulary=None, max_context_tokens=max_context_tokens, token_counter=token_counter)
        self.spec = spec
        self.client = client or get_client(spec)

    def describe(self) -> dict:
        return {
            **super().describe(),
            "model": self.spec.model,
            "base_url": self.spec.base_url,
            "top_logprobs": self.spec.top_logprobs,
            "server_grammar": self.spec.server_grammar,
            "tokenizer": self.spec.tokenizer,
        }

    def generate(self, request: DecodeRequest) -> GenerationRecord:
        extra_body: dict = {"include_stop_str_in_output": True}
        if request.schema is not None and self.spec.server_grammar:
            extra_body["guided_grammar"] = export_ebnf(request.schema)

        try:
            response = self.client.chat.completions.create(
                model=self.spec.model,
                messages=[{"role": "user", "content": request.prompt}],
                max_tokens=request.max_tokens,
                temperature=request.temperature,
                seed=request.seed,
                stop=[request.stop_sequence],
                logprobs=True,
                top_logprobs=self.spec.top_logprobs,
                extra_body=extra_body,
            )
        except openai.BadRequestError as e:
            if _is_context_overflow(e):
                raise ContextLengthError(f"Request {request.request_id}: {e}")
            raise TransportError(f"Request {request.request_id} rejected: {e}")
        except (openai.APIError, httpx.HTTPError) as e:
            logger.error(f"[Remote] ❌ Request {request.request_id} failed: {e}")
            raise TransportError(f"Request {request.request_id} failed: {e}")

        if not response.choices:
            raise BackendError(f"Request {request.request_id}: endpoint returned no choices")
        choice = response.choices[0]
        text = choice.message.content or ""
        if choice.finish_reason == "stop" and not text.endswith(request.stop_sequence):
            text += request.stop_sequence

        content = choice.logprobs.content if choice.logprobs is not None else None
        if not content:
            raise BackendError(f"Request {request.request_id}: endpoint returned no log-probabilities")

        tokens, texts, dists, confidences = [], [], [], []
        for item in content:
            dist, emitted, confidence = _distribution(item)
            tokens.append(emitted)
            texts.append(item.token)
            dists.append(dist)
            confidences.append(confidence)

        record = GenerationRecord.from_steps(
            tokens, texts, text, dists, confidences,
            premask_entropies=None,
            finish_reason="length" if choice.finish_reason == "length" else "stop",
        )
        usage = getattr(response, "usage", None)
        if usage is not None:
            record = replace(record, prompt_tokens=usage.prompt_tokens, completion_tokens=usage.completion_tokens)
        coverage = sum(d.coverage for d in dists) / len(dists)
        logger.debug(f"[Remote] {request.request_id}: {len(tokens)} tokens, mean top-k coverage {coverage:.3f}")
        return record
