"""
===============================================================================
Project   : mvprompt
Module    : tests/conftest.py
Created   : 2025-11-12
Author    : Florian
Purpose   : Shared fixtures: example sentence, categories, synthetic datasets,
            vocabulary, prompt template and oracle-backed engines.

@docstyle: google
@language: english
@voice: imperative
===============================================================================
"""

import random

import pytest

from app.core.schemas import CategorySet, Instance, SentimentTuple, Task, ViewSelectionConfig
from app.services.multiview_service import MultiViewEngine
from app.services.oracle_backend import oracle_configure
from app.services.prompt_service import PromptTemplate
from app.services.run_service import run_vocabulary
from app.services.scheduler import BatchScheduler

WINE_SENTENCE = "The wine list is excellent but the service is slow ."

CATEGORIES = (
    "drinks#style",
    "drinks#quality",
    "food#quality",
    "food#prices",
    "service#general",
    "ambience#general",
    "restaurant#general",
    "location#general",
)

ASPECTS = (
    ("wine list", "drinks#style"),
    ("cocktails", "drinks#quality"),
    ("pasta", "food#quality"),
    ("sushi", "food#quality"),
    ("prices", "food#prices"),
    ("waiter", "service#general"),
    ("staff", "service#general"),
    ("music", "ambience#general"),
    ("decor", "ambience#general"),
    ("view", "location#general"),
)

OPINIONS = (
    ("excellent", "positive"),
    ("great", "positive"),
    ("fresh", "positive"),
    ("slow", "negative"),
    ("rude", "negative"),
    ("bland", "negative"),
    ("okay", "neutral"),
    ("average", "neutral"),
)


def wine_tuples(task: Task) -> tuple[SentimentTuple, ...]:
    with_opinion = task.has_opinion
    return (
        SentimentTuple(aspect_term="wine list", aspect_category="drinks#style",
                       opinion_term="excellent" if with_opinion else None, polarity="positive"),
        SentimentTuple(aspect_term="service", aspect_category="service#general",
                       opinion_term="slow" if with_opinion else None, polarity="negative"),
    )


def make_instances(n: int, task: Task, seed: int = 0, max_tuples: int = 2, prefix: str = "x") -> list[Instance]:
    """
    Generates a synthetic labelled dataset.

    Sentences read "The <aspect> is <opinion> and the <aspect> is <opinion> ."
    so every gold aspect and opinion term is a span of its sentence.
    """
    rng = random.Random(seed)
    instances = []
    for idx in range(n):
        n_tuples = rng.randint(1, max_tuples)
        picked = rng.sample(ASPECTS, n_tuples)
        clauses = []
        gold = []
        for aspect, category in picked:
            opinion, polarity = rng.choice(OPINIONS)
            clauses.append(f"the {aspect} is {opinion}")
            gold.append(SentimentTuple(
                aspect_term=aspect,
                aspect_category=category,
                opinion_term=opinion if task.has_opinion else None,
                polarity=polarity,
            ))
        text = " and ".join(clauses).capitalize() + " ."
        instances.append(Instance(id=f"{prefix}{idx:04d}", text=text, gold=tuple(gold)))
    return instances


def make_engine(instances, task: Task, noise=None, oracle_seed: int = 0, grouping: bool = True,
                shots=(), seed: int = 0, **selection) -> MultiViewEngine:
    """Builds a multi-view engine over an oracle that knows the instances' gold tuples."""
    categories = CategorySet(categories=CATEGORIES)
    vocab = run_vocabulary(categories, [*instances, *shots])
    backend = oracle_configure({i.id: i.gold for i in instances}, noise, seed=oracle_seed, vocabulary=vocab)
    scheduler = BatchScheduler(backend, tokenizer=vocab, grouping=grouping, max_in_flight=2)
    return MultiViewEngine(task, categories, PromptTemplate.load(), scheduler,
                           selection=ViewSelectionConfig(**selection), shots=shots, seed=seed)


@pytest.fixture
def asqp() -> Task:
    return Task.of("ASQP")


@pytest.fixture
def tasd() -> Task:
    return Task.of("TASD")


@pytest.fixture
def categories() -> CategorySet:
    return CategorySet(categories=CATEGORIES)


@pytest.fixture
def template() -> PromptTemplate:
    return PromptTemplate.load()


@pytest.fixture
def wine_instance(asqp) -> Instance:
    return Instance(id="wine", text=WINE_SENTENCE, gold=wine_tuples(asqp))
