"""
===============================================================================
Project   : mvprompt
Module    : app/core/schemas.py
Created   : 2025-11-03
Author    : Florian
Purpose   : This module defines the domain types (tasks, tuples, permutations,
            instances, run configuration) used by all services.

@docstyle: google
@language: english
@voice: imperative
===============================================================================
"""


import math
from enum import Enum
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.constants import (
    DEFAULT_M,
    DEFAULT_MODEL,
    EFF_QUANTILE,
    MAX_CONTEXT_TOKENS,
    MAX_IN_FLIGHT,
    MAX_NEW_TOKENS,
    MODEL_TOKENIZER,
    NULL_ASPECT,
    OPENAI_BASE_URL,
    SC_SAMPLES,
    SC_TEMPERATURE,
    TOP_LOGPROBS,
)
from app.core.deps import OUTPUT_DIR
from app.core.errors import ConfigError, InsufficientPoolError


# ------------------------------
#  ENUMS
# ------------------------------

class ElementKind(str, Enum):
    """Sentiment elements, identified by their stable two-letter codes."""
    ASPECT_TERM = "at"
    ASPECT_CATEGORY = "ac"
    OPINION_TERM = "ot"
    POLARITY = "p"


class TaskKind(str, Enum):
    TASD = "TASD"
    ASQP = "ASQP"


class Polarity(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    NEUTRAL = "neutral"


class Strategy(str, Enum):
    MVP = "mvp"
    SINGLE_ORDER = "single_order"
    SELF_CONSISTENCY = "self_consistency"
    MVP_EFF = "mvp_eff"


TASK_ELEMENTS = {
    TaskKind.TASD: (ElementKind.ASPECT_TERM, ElementKind.ASPECT_CATEGORY, ElementKind.POLARITY),
    TaskKind.ASQP: (
        ElementKind.ASPECT_TERM,
        ElementKind.ASPECT_CATEGORY,
        ElementKind.OPINION_TERM,
        ElementKind.POLARITY,
    ),
}


# ------------------------------
#  TASK
# ------------------------------

class Task(BaseModel):
    """
    Represents an extraction task.

    The element set and the arity follow from the kind: TASD extracts
    (aspect term, category, polarity) triples, ASQP adds the opinion term.

    Attributes:
        kind (TaskKind): TASD or ASQP.
    """
    model_config = ConfigDict(frozen=True)

    kind: TaskKind

    @field_validator("kind", mode="before")
    @classmethod
    def _upper_kind(cls, v):
        return v.upper() if isinstance(v, str) else v

    @classmethod
    def of(cls, kind: "str | TaskKind") -> "Task":
        """Builds a task from its kind name ('tasd', 'ASQP', ...)."""
        return cls(kind=kind)

    @property
    def elements(self) -> tuple[ElementKind, ...]:
        return TASK_ELEMENTS[self.kind]

    @property
    def arity(self) -> int:
        return len(self.elements)

    @property
    def has_opinion(self) -> bool:
        return self.kind == TaskKind.ASQP


# ------------------------------
#  SENTIMENT TUPLE
# ------------------------------

class SentimentTuple(BaseModel):
    """
    One extracted sentiment record, the unit of exact-match evaluation.

    Equality is field-wise and case-sensitive. The aspect term may be the
    literal "NULL" for implicit aspects; the opinion term is only set for ASQP.

    Attributes:
        aspect_term (str): Aspect term surface string or "NULL".
        aspect_category (str): Aspect category (e.g. "drinks#style").
        opinion_term (Optional[str]): Opinion term surface string (ASQP only).
        polarity (Polarity): One of positive, negative, neutral.
    """
    model_config = ConfigDict(frozen=True)

    aspect_term: str = Field(min_length=1)
    aspect_category: str = Field(min_length=1)
    opinion_term: Optional[str] = Field(default=None, min_length=1)
    polarity: Polarity

    def value(self, kind: ElementKind) -> str:
        """Returns the surface string of one element."""
        if kind == ElementKind.ASPECT_TERM:
            return self.aspect_term
        if kind == ElementKind.ASPECT_CATEGORY:
            return self.aspect_category
        if kind == ElementKind.OPINION_TERM:
            if self.opinion_term is None:
                raise ValueError("Tuple has no opinion term")
            return self.opinion_term
        return self.polarity.value

    @property
    def is_implicit(self) -> bool:
        return self.aspect_term == NULL_ASPECT

    def sort_key(self) -> tuple[str, str, str, str]:
        return (self.aspect_term, self.aspect_category, self.opinion_term or "", self.polarity.value)

    def fits(self, task: Task) -> bool:
        """Checks the field presence rule: opinion term iff the task is ASQP."""
        return (self.opinion_term is not None) == task.has_opinion

    @classmethod
    def from_elements(cls, values: dict[ElementKind, str]) -> "SentimentTuple":
        """Builds a tuple from element values keyed by ElementKind."""
        return cls(
            aspect_term=values[ElementKind.ASPECT_TERM],
            aspect_category=values[ElementKind.ASPECT_CATEGORY],
            opinion_term=values.get(ElementKind.OPINION_TERM),
            polarity=values[ElementKind.POLARITY],
        )

    def to_json(self) -> dict:
        """Serializes to the dataset format ({"at", "ac", "ot", "p"})."""
        data = {"at": self.aspect_term, "ac": self.aspect_category}
        if self.opinion_term is not None:
            data["ot"] = self.opinion_term
        data["p"] = self.polarity.value
        return data

    @classmethod
    def from_json(cls, data: dict) -> "SentimentTuple":
        return cls(
            aspect_term=data["at"],
            aspect_category=data["ac"],
            opinion_term=data.get("ot"),
            polarity=data["p"],
        )


# ------------------------------
#  PERMUTATION
# ------------------------------

class Permutation(BaseModel):
    """
    An ordering of a task's sentiment elements; identifies one view.

    Attributes:
        task (Task): The task whose elements are permuted.
        order (tuple[ElementKind, ...]): The element order, a bijection on task.elements.
    """
    model_config = ConfigDict(frozen=True)

    task: Task
    order: tuple[ElementKind, ...]

    @model_validator(mode="after")
    def _check_bijection(self):
        if len(self.order) != self.task.arity or set(self.order) != set(self.task.elements):
            raise ValueError(
                f"Order {[e.value for e in self.order]} is not a permutation of "
                f"{[e.value for e in self.task.elements]}"
            )
        return self

    @property
    def id(self) -> str:
        """Canonical id such as 'at-ot-ac-p'."""
        return "-".join(e.value for e in self.order)

    @property
    def canonical_key(self) -> tuple[str, ...]:
        """Sort key giving the canonical (lexicographic) permutation order."""
        return tuple(e.value for e in self.order)


# ------------------------------
#  INSTANCES / DATASETS
# ------------------------------

class Instance(BaseModel):
    """
    One input sentence with optional gold annotation.

    Gold tuples keep their dataset order (used when the instance serves as a
    demonstration); duplicates are removed.

    Attributes:
        id (str): Instance identifier.
        text (str): The input sentence.
        gold (Optional[tuple[SentimentTuple, ...]]): Gold tuples, if annotated.
    """
    model_config = ConfigDict(frozen=True)

    id: str = Field(min_length=1)
    text: str = Field(min_length=1)
    gold: Optional[tuple[SentimentTuple, ...]] = None

    @field_validator("text")
    @classmethod
    def _check_text(cls, v):
        if not v.strip():
            raise ValueError("Instance text must not be blank")
        return v

    @field_validator("gold")
    @classmethod
    def _dedupe_gold(cls, v):
        if v is None:
            return v
        return tuple(dict.fromkeys(v))

    @property
    def gold_set(self) -> frozenset[SentimentTuple]:
        return frozenset(self.gold or ())


class CategorySet(BaseModel):
    """
    The dataset-specific set of aspect categories.

    Attributes:
        categories (tuple[str, ...]): Ordered, duplicate-free category names.
    """
    model_config = ConfigDict(frozen=True)

    categories: tuple[str, ...]

    @field_validator("categories")
    @classmethod
    def _check_categories(cls, v):
        if not v:
            raise ValueError("Category set must not be empty")
        if len(set(v)) != len(v):
            raise ValueError("Category set contains duplicates")
        if any(not c for c in v):
            raise ValueError("Category names must not be empty")
        return v

    def __contains__(self, item: str) -> bool:
        return item in self.categories

    def __len__(self) -> int:
        return len(self.categories)


class ShotConfig(BaseModel):
    """
    Few-shot demonstration settings.

    Attributes:
        k (int): Number of demonstrations.
        seed (int): Seed of the sampling permutation.
        pool (tuple[Instance, ...]): Labelled demonstration pool.
    """
    model_config = ConfigDict(frozen=True)

    k: int = Field(ge=0)
    seed: int
    pool: tuple[Instance, ...] = ()

    @model_validator(mode="after")
    def _check_pool_size(self):
        if self.k > len(self.pool):
            raise InsufficientPoolError(
                f"{self.k} demonstrations requested but the pool holds only {len(self.pool)}"
            )
        return self


# ------------------------------
#  RUN CONFIGURATION
# ------------------------------

class ViewSelectionConfig(BaseModel):
    """
    Settings of the prediction strategy.

    Attributes:
        m (Optional[int]): Number of lowest-entropy views voted on; None picks the task default.
        strategy (Strategy): mvp, single_order, self_consistency or mvp_eff.
        sc_samples (int): Samples drawn by self-consistency.
        sc_temperature (float): Sampling temperature of self-consistency.
        eff_quantile (float): Fraction of least confident instances escalated by mvp_eff.
        guided (bool): Whether decoding is schema-constrained.
    """
    model_config = ConfigDict(frozen=True)

    m: Optional[int] = Field(default=None, ge=1)
    strategy: Strategy = Strategy.MVP
    sc_samples: int = Field(default=SC_SAMPLES, ge=1)
    sc_temperature: float = Field(default=SC_TEMPERATURE, ge=0.0)
    eff_quantile: float = Field(default=EFF_QUANTILE, ge=0.0, le=1.0)
    guided: bool = True

    def resolved_m(self, task: Task) -> int:
        return self.m if self.m is not None else DEFAULT_M[task.kind.value]


class BackendSpec(BaseModel):
    """
    Selects and configures the language-model backend.

    Attributes:
        kind (str): "oracle" (deterministic simulator) or "remote" (OpenAI-compatible endpoint).
        oracle_path (Optional[Path]): Oracle configuration file (gold + corruption spec).
        base_url (str): Endpoint URL of the remote backend.
        model (str): Model name of the remote backend.
        api_key_env (str): Environment variable holding the API key.
        top_logprobs (int): Depth of returned log-probabilities.
        server_grammar (bool): Forward the grammar to the server for guided decoding.
        tokenizer (Optional[str]): Tokenizer of the served model for context checks and
            prefill accounting; None relies on the usage the endpoint reports.
    """
    model_config = ConfigDict(frozen=True)

    kind: Literal["oracle", "remote"] = "oracle"
    oracle_path: Optional[Path] = None
    base_url: str = OPENAI_BASE_URL
    model: str = DEFAULT_MODEL
    api_key_env: str = "OPENAI_API_KEY"
    top_logprobs: int = Field(default=TOP_LOGPROBS, ge=1, le=20)
    server_grammar: bool = True
    tokenizer: Optional[str] = MODEL_TOKENIZER


class RunConfig(BaseModel):
    """
    Declarative description of one experiment run.

    Loaded from a JSON file and overridden by CLI flags. All randomness flows
    from `seeds`.
    """
    model_config = ConfigDict(frozen=True)

    task: Task
    instances: Path
    categories: Path
    pool: Optional[Path] = None
    dataset: Optional[str] = None
    strategy: Strategy = Strategy.MVP
    m: Optional[int] = None
    k: int = Field(default=0, ge=0)
    seeds: list[int] = Field(default_factory=lambda: [1])
    backend: BackendSpec = Field(default_factory=BackendSpec)
    template_dir: Optional[Path] = None
    output_dir: Path = OUTPUT_DIR / "latest"
    prefix_grouping: bool = True
    max_context_tokens: int = Field(default=MAX_CONTEXT_TOKENS, gt=0)
    max_new_tokens: int = Field(default=MAX_NEW_TOKENS, gt=0)
    max_in_flight: int = Field(default=MAX_IN_FLIGHT, ge=1)
    guided: bool = True
    eff_quantile: float = Field(default=EFF_QUANTILE, ge=0.0, le=1.0)
    sc_samples: int = Field(default=SC_SAMPLES, ge=1)
    sc_temperature: float = Field(default=SC_TEMPERATURE, ge=0.0)

    @field_validator("task", mode="before")
    @classmethod
    def _task_from_name(cls, v):
        if isinstance(v, (str, TaskKind)):
            return {"kind": v}
        return v

    @model_validator(mode="after")
    def _check_config(self):
        for label, path in (("instances", self.instances), ("categories", self.categories), ("pool", self.pool)):
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"{label} file not found: {path}")
        if self.template_dir is not None and not Path(self.template_dir).is_dir():
            raise ConfigError(f"Template directory not found: {self.template_dir}")
        if self.backend.kind == "oracle" and self.backend.oracle_path is not None \
                and not Path(self.backend.oracle_path).is_file():
            raise ConfigError(f"Oracle file not found: {self.backend.oracle_path}")
        if not self.seeds:
            raise ConfigError("At least one seed is required")
        if self.k > 0 and self.pool is None:
            raise ConfigError(f"k={self.k} demonstrations requested but no pool file given")
        if self.m is not None:
            if self.m < 1:
                raise ConfigError(f"m must be >= 1, got {self.m}")
            n_views = math.factorial(self.task.arity)
            if self.strategy in (Strategy.MVP, Strategy.MVP_EFF) and self.m > n_views:
                raise ConfigError(f"m={self.m} exceeds the {n_views} permutations of {self.task.kind.value}")
        return self

    @property
    def dataset_name(self) -> str:
        return self.dataset or Path(self.instances).stem

    def selection(self) -> ViewSelectionConfig:
        """Derives the strategy settings used by the multi-view engine."""
        return ViewSelectionConfig(
            m=self.m,
            strategy=self.strategy,
            sc_samples=self.sc_samples,
            sc_temperature=self.sc_temperature,
            eff_quantile=self.eff_quantile,
            guided=self.guided,
        )
