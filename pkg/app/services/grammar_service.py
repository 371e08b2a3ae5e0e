"""
===============================================================================
Project   : mvprompt
Module    : app/services/grammar_service.py
Created   : 2025-11-05
Author    : Florian
Purpose   : Compiles the tuple-list output grammar of one sentence into a
            lazily determinized byte automaton. Provides incremental
            recognition, token masking for constrained decoding, parsing of
            generated outputs and the canonical surface form.

            Accepted language:
                "[" TUPLE (", " TUPLE)* "]"
                TUPLE = "(" e1 ", " e2 ", " ... ", " ek ")"
            where e1..ek follow the permutation and each element is drawn
            from its terminal class (phrases of the sentence, "NULL" for
            aspect terms, dataset categories, the three polarities).

@docstyle: google
@language: english
@voice: imperative
===============================================================================
"""

import json
import logging
import threading
from collections import deque
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

from app.core.constants import ELEMENT_SEPARATOR, NULL_ASPECT, POLARITIES, TUPLE_SEPARATOR
from app.core.errors import (
    DeadTransitionError,
    EmptyMaskError,
    TupleParseError,
    UnsatisfiableSchemaError,
)
from app.core.schemas import CategorySet, ElementKind, Permutation, SentimentTuple
from app.core.vocabulary import TokenizerVocabulary
from app.helpers.lexicon import PhraseLexicon

logger = logging.getLogger(__name__)


# ------------------------------
#  BYTE TRIES
# ------------------------------

class ByteTrie:
    """
    Array-backed trie over the UTF-8 bytes of a set of strings.

    Node 0 is the root. Empty strings are ignored.

    Attributes:
        children (list[dict[int, int]]): Outgoing edges per node, keyed by byte.
        terminal (list[bool]): Whether a string ends at the node.
    """
    __slots__ = ("children", "terminal")

    def __init__(self, strings: Iterable[str]):
        self.children: list[dict[int, int]] = [{}]
        self.terminal: list[bool] = [False]
        for s in strings:
            if not s:
                continue
            node = 0
            for b in s.encode("utf-8"):
                nxt = self.children[node].get(b)
                if nxt is None:
                    nxt = len(self.children)
                    self.children.append({})
                    self.terminal.append(False)
                    self.children[node][b] = nxt
                node = nxt
            self.terminal[node] = True

    def __len__(self) -> int:
        return len(self.children)

    @property
    def is_empty(self) -> bool:
        return not self.children[0]


_POLARITY_TRIE = ByteTrie(POLARITIES)
_NULL_TRIE = ByteTrie((NULL_ASPECT,))


@lru_cache(maxsize=2048)
def _phrase_trie(spans: frozenset[str]) -> ByteTrie:
    return ByteTrie(sorted(spans))


@lru_cache(maxsize=64)
def _category_trie(categories: CategorySet) -> ByteTrie:
    return ByteTrie(categories.categories)


# ------------------------------
#  SCHEMA
# ------------------------------

@dataclass(frozen=True)
class TupleSchema:
    """
    Output constraint of one view: element order plus the terminal classes.

    Attributes:
        permutation (Permutation): Element order of every tuple.
        lexicon (PhraseLexicon): Valid aspect/opinion phrases of the sentence.
        categories (CategorySet): Valid aspect categories of the dataset.
    """
    permutation: Permutation
    lexicon: PhraseLexicon
    categories: CategorySet

    @property
    def polarities(self) -> tuple[str, ...]:
        return POLARITIES

    def terminals(self, kind: ElementKind) -> frozenset[str]:
        """Returns the set of strings a slot of the given kind accepts."""
        if kind == ElementKind.ASPECT_TERM:
            return self.lexicon.spans | {NULL_ASPECT}
        if kind == ElementKind.OPINION_TERM:
            return self.lexicon.spans
        if kind == ElementKind.ASPECT_CATEGORY:
            return frozenset(self.categories.categories)
        return frozenset(POLARITIES)

    def tries(self, kind: ElementKind) -> tuple[ByteTrie, ...]:
        if kind == ElementKind.ASPECT_TERM:
            return _phrase_trie(self.lexicon.spans), _NULL_TRIE
        if kind == ElementKind.OPINION_TERM:
            return (_phrase_trie(self.lexicon.spans),)
        if kind == ElementKind.ASPECT_CATEGORY:
            return (_category_trie(self.categories),)
        return (_POLARITY_TRIE,)


# ------------------------------
#  AUTOMATON
# ------------------------------

# NFA states are small tuples:
#   ("lit", name, offset)       inside a fixed literal
#   ("slot", i, trie, node)     inside the terminal trie of element slot i
#   ("done",)                   after the closing "]"
_DONE = ("done",)


class GrammarAutomaton:
    """
    Deterministic byte automaton for one tuple schema.

    The automaton is the subset construction of an NFA over shared byte
    tries. DFA states are interned frozensets of NFA states and their
    transition tables are expanded on first use; expansion is guarded by a
    lock so an automaton can be shared by concurrent decode streams. Every
    non-empty DFA state is live: each NFA state has a path to acceptance.

    Attributes:
        schema (TupleSchema): The compiled schema.
        start (int): Id of the start state.
    """

    def __init__(self, schema: TupleSchema):
        self.schema = schema
        order = schema.permutation.order
        self._slots: tuple[tuple[ByteTrie, ...], ...] = tuple(schema.tries(kind) for kind in order)
        for kind, tries in zip(order, self._slots):
            if all(t.is_empty for t in tries):
                raise UnsatisfiableSchemaError(f"No terminals for the '{kind.value}' slot")

        k = len(order)
        self._literals: dict[str, tuple[bytes, tuple]] = {
            "start": (b"[(", ("slot", 0)),
            "close": (b")", ("after",)),
            "end": (b"]", _DONE),
            "next": ((TUPLE_SEPARATOR + "(").encode("utf-8"), ("slot", 0)),
        }
        for i in range(k - 1):
            self._literals[f"sep{i}"] = (ELEMENT_SEPARATOR.encode("utf-8"), ("slot", i + 1))
        self._follow = tuple(("lit", f"sep{i}") if i < k - 1 else ("lit", "close") for i in range(k))

        self._lock = threading.Lock()
        self._states: list[frozenset] = []
        self._index: dict[frozenset, int] = {}
        self._transitions: list[Optional[dict[int, int]]] = []
        self.start = self._intern(frozenset({("lit", "start", 0)}))

    # ---------------- NFA ----------------

    def _closure(self, target: tuple) -> tuple:
        if target[0] == "slot":
            j = target[1]
            return tuple(("slot", j, t, 0) for t, trie in enumerate(self._slots[j]) if not trie.is_empty)
        if target[0] == "lit":
            return (("lit", target[1], 0),)
        if target[0] == "after":
            return ("lit", "end", 0), ("lit", "next", 0)
        return (_DONE,)

    def _out_bytes(self, nfa_state: tuple) -> Iterable[int]:
        if nfa_state[0] == "lit":
            text, _ = self._literals[nfa_state[1]]
            return (text[nfa_state[2]],)
        if nfa_state[0] == "slot":
            _, i, t, node = nfa_state
            return self._slots[i][t].children[node].keys()
        return ()

    def _step(self, nfa_state: tuple, b: int) -> tuple:
        if nfa_state[0] == "lit":
            _, name, off = nfa_state
            text, target = self._literals[name]
            if text[off] != b:
                return ()
            if off + 1 < len(text):
                return (("lit", name, off + 1),)
            return self._closure(target)
        if nfa_state[0] == "slot":
            _, i, t, node = nfa_state
            trie = self._slots[i][t]
            child = trie.children[node].get(b)
            if child is None:
                return ()
            out: list[tuple] = []
            if trie.children[child]:
                out.append(("slot", i, t, child))
            if trie.terminal[child]:
                out.extend(self._closure(self._follow[i]))
            return tuple(out)
        return ()

    # ---------------- DFA ----------------

    def _intern(self, nfa_states: frozenset) -> int:
        sid = self._index.get(nfa_states)
        if sid is None:
            sid = len(self._states)
            self._states.append(nfa_states)
            self._transitions.append(None)
            self._index[nfa_states] = sid
        return sid

    def _expand(self, sid: int) -> dict[int, int]:
        by_byte: dict[int, set] = {}
        for s in self._states[sid]:
            for b in self._out_bytes(s):
                by_byte.setdefault(b, set()).update(self._step(s, b))
        return {b: self._intern(frozenset(targets)) for b, targets in sorted(by_byte.items()) if targets}

    def transitions(self, sid: int) -> Mapping[int, int]:
        """Returns the outgoing edges (byte -> state id) of a DFA state."""
        trans = self._transitions[sid]
        if trans is None:
            with self._lock:
                trans = self._transitions[sid]
                if trans is None:
                    trans = self._expand(sid)
                    self._transitions[sid] = trans
        return trans

    def next_state(self, sid: int, b: int) -> Optional[int]:
        return self.transitions(sid).get(b)

    def is_accepting(self, sid: int) -> bool:
        return _DONE in self._states[sid]

    @property
    def state_count(self) -> int:
        """Number of DFA states materialized so far."""
        return len(self._states)


@lru_cache(maxsize=512)
def compile_schema(schema: TupleSchema) -> GrammarAutomaton:
    """
    Compiles a tuple schema into a grammar automaton.

    Automata are cached per schema, and the category and polarity tries are
    shared across all schemas of a dataset, so only the phrase trie is built
    per sentence.

    Args:
        schema (TupleSchema): The schema to compile.

    Returns:
        GrammarAutomaton: The automaton accepting exactly the schema's tuple lists.

    Raises:
        UnsatisfiableSchemaError: If the lexicon or the category set is empty.
    """
    if not schema.lexicon.spans:
        raise UnsatisfiableSchemaError("Schema has an empty phrase lexicon")
    if len(schema.categories) == 0:
        raise UnsatisfiableSchemaError("Schema has an empty category set")
    automaton = GrammarAutomaton(schema)
    logger.debug(f"[Grammar] Compiled schema for permutation {schema.permutation.id} "
                 f"({len(schema.lexicon.spans)} phrases)")
    return automaton


# ------------------------------
#  DECODE STATE
# ------------------------------

@dataclass(frozen=True)
class DecodeState:
    """
    Position of one decode stream inside a grammar automaton.

    Attributes:
        automaton (GrammarAutomaton): The automaton.
        state (int): Current (always live) DFA state.
        consumed (int): Number of bytes consumed since the start state.
    """
    automaton: GrammarAutomaton
    state: int
    consumed: int = 0

    @property
    def accepting(self) -> bool:
        return self.automaton.is_accepting(self.state)


def start_state(automaton: GrammarAutomaton) -> DecodeState:
    return DecodeState(automaton=automaton, state=automaton.start, consumed=0)


def advance(state: DecodeState, data: bytes | str) -> DecodeState:
    """
    Consumes bytes from a decode state.

    Args:
        state (DecodeState): A live state.
        data (bytes | str): Bytes to consume (strings are UTF-8 encoded).

    Returns:
        DecodeState: The state after the last byte.

    Raises:
        DeadTransitionError: If a byte leaves the live states; `offset` is the
            1-based position of that byte within `data`.
    """
    if isinstance(data, str):
        data = data.encode("utf-8")
    automaton = state.automaton
    sid = state.state
    for position, b in enumerate(data, start=1):
        nxt = automaton.next_state(sid, b)
        if nxt is None:
            raise DeadTransitionError(
                f"Byte {bytes([b])!r} at position {position} is not allowed here", offset=position
            )
        sid = nxt
    return DecodeState(automaton=automaton, state=sid, consumed=state.consumed + len(data))


def token_mask(state: DecodeState, vocab: TokenizerVocabulary) -> set[int]:
    """
    Computes the tokens that keep a decode stream inside the grammar.

    Walks the vocabulary byte trie in lockstep with the automaton, so each
    shared token prefix is checked once.

    Args:
        state (DecodeState): A live state.
        vocab (TokenizerVocabulary): The tokenizer vocabulary.

    Returns:
        set[int]: Ids of all tokens whose bytes can be consumed from `state`.
            Empty only for the final accepting state.

    Raises:
        EmptyMaskError: If a non-accepting state admits no token.
    """
    automaton = state.automaton
    mask: set[int] = set()
    stack = [(vocab.trie, state.state)]
    while stack:
        vnode, sid = stack.pop()
        trans = automaton.transitions(sid)
        if len(trans) <= len(vnode.children):
            pairs = ((vnode.children.get(b), nsid) for b, nsid in trans.items())
        else:
            pairs = ((child, trans.get(b)) for b, child in vnode.children.items())
        for child, nsid in pairs:
            if child is None or nsid is None:
                continue
            mask.update(child.token_ids)
            if child.children:
                stack.append((child, nsid))
    if not mask and not state.accepting:
        raise EmptyMaskError(
            f"No vocabulary token continues the grammar after {state.consumed} bytes"
        )
    return mask


def shortest_completion(state: DecodeState) -> bytes:
    """
    Finds the shortest byte string that drives a state to acceptance.

    Breadth-first search over the automaton; among equally short paths the
    one with the smallest bytes wins.
    """
    automaton = state.automaton
    if automaton.is_accepting(state.state):
        return b""
    parents: dict[int, tuple[int, int]] = {}
    queue = deque([state.state])
    seen = {state.state}
    while queue:
        sid = queue.popleft()
        for b, nsid in sorted(automaton.transitions(sid).items()):
            if nsid in seen:
                continue
            seen.add(nsid)
            parents[nsid] = (sid, b)
            if automaton.is_accepting(nsid):
                path = bytearray()
                cur = nsid
                while cur != state.state:
                    prev, byte = parents[cur]
                    path.append(byte)
                    cur = prev
                return bytes(reversed(path))
            queue.append(nsid)
    raise UnsatisfiableSchemaError("No accepting state is reachable")


# ------------------------------
#  PARSING / FORMATTING
# ------------------------------

def _iter_elements(text: str, pos: int, slots: tuple[frozenset[str], ...],
                   index: int, values: tuple[str, ...]) -> Iterator[tuple[int, tuple[str, ...]]]:
    """
    Yields (end, values) for every way to read slots[index:] starting at pos,
    longest terminal first. `end` points just past the closing ")".
    """
    if index == len(slots):
        yield pos, values
        return
    delimiter = ELEMENT_SEPARATOR if index < len(slots) - 1 else ")"
    ends: list[int] = []
    j = text.find(delimiter, pos + 1)
    while j != -1:
        ends.append(j)
        j = text.find(delimiter, j + 1)
    for j in reversed(ends):
        if text[pos:j] in slots[index]:
            yield from _iter_elements(text, j + len(delimiter), slots, index + 1, values + (text[pos:j],))


def _parse_list(text: str, pos: int, slots: tuple[frozenset[str], ...],
                found: tuple[tuple[str, ...], ...]) -> Optional[tuple[tuple[str, ...], ...]]:
    # pos points just past "("
    next_sep = TUPLE_SEPARATOR + "("
    for end, values in _iter_elements(text, pos, slots, 0, ()):
        if end == len(text) - 1 and text[end] == "]":
            return found + (values,)
        if text.startswith(next_sep, end):
            result = _parse_list(text, end + len(next_sep), slots, found + (values,))
            if result is not None:
                return result
    return None


def _to_tuples(rows: Iterable[tuple[str, ...]], permutation: Permutation) -> frozenset[SentimentTuple]:
    return frozenset(
        SentimentTuple.from_elements(dict(zip(permutation.order, row)))
        for row in rows
    )


def parse_tuples(output: str, schema: TupleSchema) -> frozenset[SentimentTuple]:
    """
    Parses a generated tuple list into sentiment tuples.

    The output must be accepted by the schema's automaton. Elements are
    mapped back to canonical (at, ac, ot, p) fields whatever permutation
    produced them, and duplicate tuples collapse.

    Args:
        output (str): The generated text.
        schema (TupleSchema): The schema the text was generated under.

    Returns:
        frozenset[SentimentTuple]: The parsed tuples.

    Raises:
        TupleParseError: If the output is not a complete tuple list of the schema.
    """
    automaton = compile_schema(schema)
    try:
        final = advance(start_state(automaton), output)
    except DeadTransitionError as e:
        raise TupleParseError(f"Invalid output: {e.detail}", offset=e.offset)
    if not final.accepting:
        raise TupleParseError("Output ends before the tuple list is closed", offset=final.consumed + 1)

    slots = tuple(schema.terminals(kind) for kind in schema.permutation.order)
    rows = _parse_list(output, 2, slots, ())
    if rows is None:
        # the automaton accepted, so a split must exist
        raise TupleParseError("Accepted output could not be split into tuples", offset=1)
    return _to_tuples(rows, schema.permutation)


def parse_tuples_lenient(output: str, schema: TupleSchema) -> frozenset[SentimentTuple]:
    """
    Extracts every well-formed tuple from free-form output.

    Used for unconstrained decoding. Each "(" starts a candidate tuple; a
    candidate whose elements fall outside the schema's terminal classes is
    dropped. Never raises.
    """
    slots = tuple(schema.terminals(kind) for kind in schema.permutation.order)
    rows: list[tuple[str, ...]] = []
    pos = 0
    while True:
        start = output.find("(", pos)
        if start == -1:
            break
        parsed = next(_iter_elements(output, start + 1, slots, 0, ()), None)
        if parsed is None:
            pos = start + 1
            continue
        end, values = parsed
        rows.append(values)
        pos = end
    return _to_tuples(rows, schema.permutation)


def format_tuples(tuples: Iterable[SentimentTuple], permutation: Permutation) -> str:
    """
    Renders tuples in the grammar's surface form under a permutation.

    Tuples keep the given order, e.g.
    "[(wine list, drinks#style, excellent, positive), (service, service#general, slow, negative)]".
    """
    rendered = [
        "(" + ELEMENT_SEPARATOR.join(t.value(kind) for kind in permutation.order) + ")"
        for t in tuples
    ]
    return "[" + TUPLE_SEPARATOR.join(rendered) + "]"


# ------------------------------
#  DIAGNOSTICS / EXPORT
# ------------------------------

@dataclass(frozen=True)
class GrammarCheck:
    """
    Result of validating a candidate output.

    Attributes:
        accepted (bool): Whether the output is a complete tuple list.
        offset (Optional[int]): 1-based byte position of the first violation.
        message (str): Human-readable verdict.
        tuples (frozenset[SentimentTuple]): Parsed tuples if accepted.
    """
    accepted: bool
    offset: Optional[int]
    message: str
    tuples: frozenset[SentimentTuple] = frozenset()


def check_output(output: str, schema: TupleSchema) -> GrammarCheck:
    """Validates an output string and reports the first violating byte offset."""
    try:
        tuples = parse_tuples(output, schema)
    except TupleParseError as e:
        return GrammarCheck(accepted=False, offset=e.offset, message=e.detail)
    return GrammarCheck(accepted=True, offset=None, message=f"accepted ({len(tuples)} tuples)", tuples=tuples)


def _alternatives(strings: Iterable[str]) -> str:
    return " | ".join(json.dumps(s, ensure_ascii=False) for s in sorted(strings))


def export_ebnf(schema: TupleSchema) -> str:
    """
    Exports the schema as an EBNF grammar string.

    The grammar is forwarded to serving endpoints that enforce grammars
    server-side.
    """
    rule = {
        ElementKind.ASPECT_TERM: "aspect_term",
        ElementKind.ASPECT_CATEGORY: "aspect_category",
        ElementKind.OPINION_TERM: "opinion_term",
        ElementKind.POLARITY: "polarity",
    }
    sep = json.dumps(ELEMENT_SEPARATOR)
    body = f" {sep} ".join(rule[kind] for kind in schema.permutation.order)
    lines = [
        f'root ::= "[" tuple ({json.dumps(TUPLE_SEPARATOR)} tuple)* "]"',
        f'tuple ::= "(" {body} ")"',
    ]
    for kind in schema.permutation.order:
        if kind == ElementKind.ASPECT_TERM:
            lines.append(f'aspect_term ::= phrase | {json.dumps(NULL_ASPECT)}')
        elif kind == ElementKind.OPINION_TERM:
            lines.append("opinion_term ::= phrase")
        elif kind == ElementKind.ASPECT_CATEGORY:
            lines.append(f"aspect_category ::= {_alternatives(schema.categories.categories)}")
        else:
            lines.append(f"polarity ::= {_alternatives(POLARITIES)}")
    lines.append(f"phrase ::= {_alternatives(schema.lexicon.spans)}")
    return "\n".join(lines) + "\n"
