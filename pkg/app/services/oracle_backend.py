"""
===============================================================================
Project   : mvprompt
Module    : app/services/oracle_backend.py
Created   : 2025-11-06
Author    : Florian
Purpose   : Deterministic language-model simulator. Emits the gold tuple list
            of an instance (optionally corrupted) token by token, with
            controlled uncertainty, so the whole pipeline can be verified
            without a model.

@docstyle: google
@language: english
@voice: imperative
===============================================================================
"""

import hashlib
import heapq
import json
import logging
import random
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.core.constants import MAX_CONTEXT_TOKENS, POLARITIES, STOP_SEQUENCE
from app.core.errors import BackendError, ConfigError, OracleMissError
from app.core.schemas import Permutation, SentimentTuple
from app.core.vocabulary import TokenizerVocabulary, build_vocabulary
from app.services.backend_service import DecodeRequest, SteppingBackend
from app.services.grammar_service import DecodeState, format_tuples, shortest_completion

logger = logging.getLogger(__name__)

# Number of alternative tokens sharing the spread mass
_ALTERNATIVES = 4
# Fraction of the uniform point k/(k+1) a spread may reach over k alternatives
_SPREAD_CAP = 0.99


# ------------------------------
#  CONFIGURATION
# ------------------------------

class NoiseSpec(BaseModel):
    """
    Corruption and uncertainty settings of a view.

    Attributes:
        corrupt_prob (float): Probability that the view output is corrupted.
        kind (str): "drop" removes one tuple, "flip" changes one polarity,
            "malformed" breaks one tuple (unconstrained requests only).
        spread_clean (float): Probability mass moved off the target token in clean views.
        spread_corrupt (float): Probability mass moved off the target token in corrupted views.

    Both spreads stay below 0.8, the uniform point of the four alternatives.
    Steps where the grammar leaves fewer alternatives cap the spread lower
    (see `capped_spread`).
    """
    model_config = ConfigDict(frozen=True)

    corrupt_prob: float = Field(default=0.0, ge=0.0, le=1.0)
    kind: Literal["drop", "flip", "malformed"] = "drop"
    spread_clean: float = Field(default=0.0, ge=0.0, lt=0.8)
    spread_corrupt: float = Field(default=0.3, gt=0.0, lt=0.8)

    @model_validator(mode="after")
    def _check_spread(self):
        if self.spread_corrupt <= self.spread_clean:
            raise ValueError("spread_corrupt must exceed spread_clean")
        return self


class OracleNoise(BaseModel):
    """
    Noise settings at three levels. The most specific match wins.

    Attributes:
        default (NoiseSpec): Applies to every view.
        permutations (dict[str, NoiseSpec]): Keyed by permutation id.
        views (dict[str, NoiseSpec]): Keyed by "instance|permutation" or
            "instance|permutation|seed".
    """
    model_config = ConfigDict(frozen=True)

    default: NoiseSpec = Field(default_factory=NoiseSpec)
    permutations: dict[str, NoiseSpec] = Field(default_factory=dict)
    views: dict[str, NoiseSpec] = Field(default_factory=dict)

    def resolve(self, instance_id: str, permutation_id: str, seed: Optional[int]) -> NoiseSpec:
        for key in (f"{instance_id}|{permutation_id}|{seed}", f"{instance_id}|{permutation_id}"):
            if key in self.views:
                return self.views[key]
        return self.permutations.get(permutation_id, self.default)


class OracleConfig(BaseModel):
    """
    Oracle configuration file.

    Attributes:
        seed (int): Seed of the corruption decisions.
        gold (dict[str, tuple[SentimentTuple, ...]]): Gold tuples per instance id,
            in the dataset format ({"at", "ac", "ot", "p"}).
        noise (OracleNoise): Corruption settings.
    """
    seed: int = 0
    gold: dict[str, tuple[SentimentTuple, ...]] = Field(default_factory=dict)
    noise: OracleNoise = Field(default_factory=OracleNoise)

    @field_validator("gold", mode="before")
    @classmethod
    def _gold_from_json(cls, v):
        if not isinstance(v, dict):
            return v
        return {
            key: tuple(SentimentTuple.from_json(t) if isinstance(t, dict) and "at" in t else t for t in tuples)
            for key, tuples in v.items()
        }


# ------------------------------
#  BACKEND
# ------------------------------

@dataclass
class _ViewPlan:
    target: list[int]
    spread: float
    corrupted: bool


def _rng_for(seed: int, instance_id: str, permutation_id: str, sample_seed: Optional[int]) -> random.Random:
    digest = hashlib.sha256(f"{seed}|{instance_id}|{permutation_id}|{sample_seed}".encode("utf-8")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _corrupt(tuples: list[SentimentTuple], kind: str, rng: random.Random,
             permutation: Permutation) -> str:
    """Renders a corrupted version of the gold tuples."""
    if not tuples:
        return format_tuples(tuples, permutation)
    if kind == "drop" and len(tuples) > 1:
        del tuples[rng.randrange(len(tuples))]
        return format_tuples(tuples, permutation)
    if kind == "malformed":
        first = tuples[0]
        broken = "(" + ", ".join(first.value(e) for e in permutation.order[:-1]) + ")"
        rest = format_tuples(tuples[1:], permutation)[1:-1] if len(tuples) > 1 else ""
        return "[" + broken + (", " + rest if rest else "") + "]"
    # flip, and drop of a single tuple
    idx = rng.randrange(len(tuples))
    current = POLARITIES.index(tuples[idx].polarity.value)
    flipped = POLARITIES[(current + 1 + rng.randrange(len(POLARITIES) - 1)) % len(POLARITIES)]
    tuples[idx] = SentimentTuple(**{**tuples[idx].model_dump(), "polarity": flipped})
    return format_tuples(tuples, permutation)


class OracleBackend(SteppingBackend):
    """
    Simulated language model that knows the gold answers.

    For each request (identified by its instance and permutation tags) the
    oracle plans a target string: the gold tuples rendered under the view's
    permutation, corrupted with the configured probability. At every step the
    next target token gets probability 1 - spread; the spread is shared by up
    to four allowed alternatives with the lowest ids. Clean views default to
    spread 0 (one-hot, entropy 0), so corrupted views always carry strictly
    higher mean entropy.

    The oracle is pure: corruption decisions come from a SHA-256 keyed RNG
    over (seed, instance, permutation, request seed), so it is thread-safe
    and reproducible.
    """
    name = "oracle"

    def __init__(self, gold: Mapping[str, Iterable[SentimentTuple]], noise: OracleNoise,
                 seed: int = 0, vocabulary: Optional[TokenizerVocabulary] = None,
                 max_context_tokens: int = MAX_CONTEXT_TOKENS):
        super().__init__(vocabulary=vocabulary or build_vocabulary(), max_context_tokens=max_context_tokens)
        self.gold = {key: tuple(tuples) for key, tuples in gold.items()}
        self.noise = noise
        self.seed = seed

    def describe(self) -> dict:
        return {**super().describe(), "seed": self.seed, "instances": len(self.gold)}

    def plan_text(self, request: DecodeRequest) -> tuple[str, float, bool]:
        """
        Decides the output of a view.

        Returns:
            tuple[str, float, bool]: Target text, spread, corrupted flag.

        Raises:
            OracleMissError: If the instance id is unknown.
        """
        if request.instance_id not in self.gold:
            raise OracleMissError(f"Oracle has no gold for instance '{request.instance_id}'")
        if request.permutation is None:
            raise BackendError(f"Request {request.request_id} carries no permutation tag")
        permutation = request.permutation
        spec = self.noise.resolve(request.instance_id, permutation.id, request.seed)
        rng = _rng_for(self.seed, request.instance_id, permutation.id, request.seed)
        tuples = list(self.gold[request.instance_id])

        corrupted = rng.random() < spec.corrupt_prob
        if corrupted and spec.kind == "malformed" and request.schema is not None:
            # the grammar cannot produce a malformed tuple
            corrupted = False
        if corrupted:
            text = _corrupt(tuples, spec.kind, rng, permutation)
            logger.debug(f"[Oracle] {request.instance_id}/{permutation.id} seed={request.seed}: {spec.kind}")
        else:
            text = format_tuples(tuples, permutation)
        return text, (spec.spread_corrupt if corrupted else spec.spread_clean), corrupted

    def open_stream(self, request: DecodeRequest) -> _ViewPlan:
        text, spread, corrupted = self.plan_text(request)
        return _ViewPlan(target=self.vocabulary.encode(text), spread=spread, corrupted=corrupted)

    def _replan(self, plan: _ViewPlan, request: DecodeRequest, generated: list[int],
                state: Optional[DecodeState]):
        """Continues from a sampled divergence with the shortest valid completion."""
        if state is not None:
            completion = shortest_completion(state)
        else:
            produced = b"".join(self.vocabulary.token_bytes(t) for t in generated)
            stop = request.stop_sequence.encode("utf-8") or STOP_SEQUENCE.encode("utf-8")
            completion = b"" if produced.endswith(stop) else stop
        plan.target = list(generated) + self.vocabulary.encode_bytes(completion)

    def next_distribution(self, stream: _ViewPlan, request: DecodeRequest, generated: list[int],
                          state: Optional[DecodeState], allowed: Optional[set[int]]) -> dict[int, float]:
        n = len(generated)
        on_track = (
            n < len(stream.target)
            and stream.target[:n] == generated
            and (allowed is None or stream.target[n] in allowed)
        )
        if not on_track:
            self._replan(stream, request, generated, state)
            if n >= len(stream.target):
                # completion exhausted
                pool = allowed if allowed is not None else range(self.vocabulary.size)
                return {min(pool): 1.0}
        target = stream.target[n]

        if stream.spread == 0:
            return {target: 1.0}
        pool = allowed if allowed is not None else range(self.vocabulary.size)
        alternatives = heapq.nsmallest(_ALTERNATIVES, (t for t in pool if t != target))
        if not alternatives:
            return {target: 1.0}
        spread = capped_spread(stream.spread, len(alternatives))
        share = spread / len(alternatives)
        probs = {t: share for t in alternatives}
        probs[target] = 1.0 - spread
        return probs


def capped_spread(spread: float, n_alternatives: int) -> float:
    """
    Limits a spread so the target stays the strict argmax.

    With k alternatives the step entropy rises with the spread only up to the
    uniform point k/(k+1); beyond it the target would lose the argmax.
    """
    return min(spread, _SPREAD_CAP * n_alternatives / (n_alternatives + 1))


# ------------------------------
#  FACTORIES
# ------------------------------

def oracle_configure(gold: Mapping[str, Iterable[SentimentTuple]],
                     noise: "OracleNoise | NoiseSpec | None" = None,
                     seed: int = 0,
                     vocabulary: Optional[TokenizerVocabulary] = None,
                     max_context_tokens: int = MAX_CONTEXT_TOKENS) -> OracleBackend:
    """
    Builds an oracle backend.

    Args:
        gold (Mapping[str, Iterable[SentimentTuple]]): Gold tuples per instance id.
        noise (OracleNoise | NoiseSpec | None): Corruption settings; a single
            NoiseSpec applies to every view, None means noiseless.
        seed (int): Seed of the corruption decisions.
        vocabulary (Optional[TokenizerVocabulary]): Tokenizer; defaults to the byte vocabulary.
        max_context_tokens (int): Context window.

    Returns:
        OracleBackend: The configured backend.
    """
    if noise is None:
        noise = OracleNoise()
    elif isinstance(noise, NoiseSpec):
        noise = OracleNoise(default=noise)
    return OracleBackend(gold, noise, seed=seed, vocabulary=vocabulary, max_context_tokens=max_context_tokens)


def load_oracle(path: Optional[Path], fallback_gold: Mapping[str, Iterable[SentimentTuple]],
                vocabulary: Optional[TokenizerVocabulary] = None,
                max_context_tokens: int = MAX_CONTEXT_TOKENS) -> OracleBackend:
    """
    Loads an oracle from its JSON configuration.

    Gold entries of the file take precedence over `fallback_gold` (usually
    the gold annotation of the instances file).

    Raises:
        ConfigError: If the file cannot be read or validated.
    """
    config = OracleConfig()
    if path is not None:
        try:
            config = OracleConfig.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError, ValidationError) as e:
            raise ConfigError(f"Invalid oracle file {path}: {e}")
    gold = {**{k: tuple(v) for k, v in fallback_gold.items()}, **config.gold}
    logger.info(f"[Oracle] Loaded {len(gold)} gold entries (seed={config.seed})")
    return oracle_configure(gold, config.noise, seed=config.seed, vocabulary=vocabulary,
                            max_context_tokens=max_context_tokens)
