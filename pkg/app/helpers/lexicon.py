"""
===============================================================================
Project   : mvprompt
Module    : app/helpers/lexicon.py
Created   : 2025-11-04
Author    : Florian
Purpose   : Builds the valid phrase set of a sentence: boundary tokenization
            followed by enumeration of all contiguous token spans.

@docstyle: google
@language: english
@voice: imperative
===============================================================================
"""

import unicodedata
from collections.abc import Iterator
from dataclasses import dataclass

from app.core.constants import NULL_ASPECT
from app.core.errors import EmptyInputError
from app.core.schemas import CategorySet, Instance, Task


@dataclass(frozen=True, slots=True)
class BoundaryToken:
    """
    A token of the boundary tokenizer.

    Attributes:
        text (str): Token text, equal to sentence[start:end].
        start (int): Start offset in code points.
        end (int): End offset in code points (exclusive).
    """
    text: str
    start: int
    end: int


@dataclass(frozen=True)
class PhraseLexicon:
    """
    The valid phrase set of one sentence.

    Attributes:
        sentence (str): The source sentence.
        tokens (tuple[BoundaryToken, ...]): Boundary tokens in offset order.
        spans (frozenset[str]): Distinct span strings.
    """
    sentence: str
    tokens: tuple[BoundaryToken, ...]
    spans: frozenset[str]

    @property
    def span_count(self) -> int:
        """Number of (i, j) index-pair spans, n(n+1)/2."""
        n = len(self.tokens)
        return n * (n + 1) // 2

    def __contains__(self, phrase: str) -> bool:
        return phrase in self.spans


def _is_punctuation(ch: str) -> bool:
    return ch == "-" or unicodedata.category(ch).startswith("P")


def _splits_between(prev: str, ch: str) -> bool:
    # camel-case: lower -> upper
    if prev.islower() and ch.isupper():
        return True
    return (ord(prev) < 128) != (ord(ch) < 128)


def tokenize(sentence: str) -> list[BoundaryToken]:
    """
    Splits a sentence at whitespace, punctuation, hyphen, camel-case and
    non-ASCII boundaries.

    Whitespace is a pure separator. Every punctuation character (any Unicode
    `P*` category, hyphens included) becomes a single-character token. Within
    a word, a lowercase-to-uppercase transition and a switch between ASCII and
    non-ASCII code points start a new token.

    Args:
        sentence (str): The input sentence.

    Returns:
        list[BoundaryToken]: Tokens with offsets into the original sentence.

    Raises:
        EmptyInputError: If the sentence is empty.
    """
    if not sentence:
        raise EmptyInputError("Cannot tokenize an empty sentence")

    tokens: list[BoundaryToken] = []
    word_start: int | None = None

    def close_word(end: int):
        nonlocal word_start
        if word_start is not None:
            tokens.append(BoundaryToken(sentence[word_start:end], word_start, end))
            word_start = None

    for idx, ch in enumerate(sentence):
        if ch.isspace():
            close_word(idx)
        elif _is_punctuation(ch):
            close_word(idx)
            tokens.append(BoundaryToken(ch, idx, idx + 1))
        else:
            if word_start is not None and _splits_between(sentence[idx - 1], ch):
                close_word(idx)
            if word_start is None:
                word_start = idx
    close_word(len(sentence))
    return tokens


def iter_spans(lexicon: PhraseLexicon) -> Iterator[tuple[int, int, str]]:
    """Yields (i, j, text) for every token pair i <= j."""
    tokens = lexicon.tokens
    for i in range(len(tokens)):
        for j in range(i, len(tokens)):
            yield i, j, lexicon.sentence[tokens[i].start:tokens[j].end]


def build_lexicon(sentence: str) -> PhraseLexicon:
    """
    Builds the phrase set of a sentence.

    Every span is the exact original substring from the start of token i to
    the end of token j, interior separators included ("wine list" keeps its
    space).

    Args:
        sentence (str): The input sentence.

    Returns:
        PhraseLexicon: Tokens and distinct span strings.

    Raises:
        EmptyInputError: If the sentence is empty.
    """
    tokens = tuple(tokenize(sentence))
    lexicon = PhraseLexicon(sentence=sentence, tokens=tokens, spans=frozenset())
    spans = frozenset(text for _, _, text in iter_spans(lexicon))
    return PhraseLexicon(sentence=sentence, tokens=tokens, spans=spans)


def contains(lexicon: PhraseLexicon, phrase: str) -> bool:
    """Checks exact, case-sensitive membership of a phrase in the lexicon."""
    return bool(phrase) and phrase in lexicon.spans


def lint_instance(instance: Instance, categories: CategorySet, task: Task) -> list[str]:
    """
    Checks the gold tuples of an instance against the output grammar.

    Problems are reported, not raised: the grammar cannot produce such tuples,
    so they count as unreachable gold during evaluation.

    Args:
        instance (Instance): The annotated instance.
        categories (CategorySet): Valid aspect categories.
        task (Task): The extraction task.

    Returns:
        list[str]: Human-readable warnings, empty for a clean instance.
    """
    warnings: list[str] = []
    if not instance.gold:
        return warnings
    lexicon = build_lexicon(instance.text)
    for t in instance.gold:
        if not t.fits(task):
            warnings.append(f"{instance.id}: tuple {t.to_json()} does not match the {task.kind.value} fields")
        if t.aspect_term != NULL_ASPECT and not contains(lexicon, t.aspect_term):
            warnings.append(f"{instance.id}: aspect term '{t.aspect_term}' is not a span of the sentence")
        if t.opinion_term is not None:
            if t.opinion_term == NULL_ASPECT:
                warnings.append(f"{instance.id}: opinion term is NULL, which the grammar cannot produce")
            elif not contains(lexicon, t.opinion_term):
                warnings.append(f"{instance.id}: opinion term '{t.opinion_term}' is not a span of the sentence")
        if t.aspect_category not in categories:
            warnings.append(f"{instance.id}: unknown category '{t.aspect_category}'")
    return warnings
