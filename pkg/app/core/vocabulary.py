"""
===============================================================================
Project   : mvprompt
Module    : app/core/vocabulary.py
Created   : 2025-11-04
Author    : Florian
Purpose   : Byte-level tokenizer vocabulary. Maps token ids to byte sequences,
            keeps a byte trie for grammar masking and encodes text by greedy
            longest match. Also loads the token counters of served models.

@docstyle: google
@language: english
@voice: imperative
===============================================================================
"""

from collections.abc import Callable, Iterable, Mapping, Sequence
from functools import lru_cache
from pathlib import Path
from typing import Protocol

import tiktoken
from tokenizers import Tokenizer as HFTokenizer

from app.core.constants import NULL_ASPECT, POLARITIES, STOP_SEQUENCE
from app.core.errors import BackendError, ConfigError


# Multi-byte tokens that spell the fixed parts of the output grammar
GRAMMAR_MERGES = ("[(", "), (", STOP_SEQUENCE, ", ", NULL_ASPECT, *POLARITIES)


class ByteTrieNode:
    """
    Node of the vocabulary byte trie.

    Attributes:
        children (dict[int, ByteTrieNode]): Child nodes keyed by byte value.
        token_ids (list[int]): Ids of the tokens spelled by the path to this node.
    """
    __slots__ = ("children", "token_ids")

    def __init__(self):
        self.children: dict[int, "ByteTrieNode"] = {}
        self.token_ids: list[int] = []


class TokenizerVocabulary:
    """
    Maps dense token ids to non-empty byte sequences.

    Attributes:
        size (int): Number of tokens.
        trie (ByteTrieNode): Root of the byte trie over all tokens.
    """

    def __init__(self, tokens: Mapping[int, bytes]):
        ids = sorted(tokens)
        if ids != list(range(len(ids))):
            raise ValueError("Token ids must be dense in [0, size)")
        self._tokens: dict[int, bytes] = {}
        self.trie = ByteTrieNode()
        for token_id in ids:
            data = bytes(tokens[token_id])
            if not data:
                raise ValueError(f"Token {token_id} has an empty byte sequence")
            self._tokens[token_id] = data
            node = self.trie
            for b in data:
                node = node.children.setdefault(b, ByteTrieNode())
            node.token_ids.append(token_id)
        # memoized: prompt prefixes are counted once per distinct text
        self._count = lru_cache(maxsize=4096)(lambda text: len(self.encode(text)))

    @property
    def size(self) -> int:
        return len(self._tokens)

    def __len__(self) -> int:
        return len(self._tokens)

    def token_bytes(self, token_id: int) -> bytes:
        return self._tokens[token_id]

    def token_text(self, token_id: int) -> str:
        return self._tokens[token_id].decode("utf-8", errors="replace")

    def items(self):
        return self._tokens.items()

    def longest_match(self, data: bytes, start: int = 0) -> tuple[int, int]:
        """
        Finds the longest token spelling `data[start:...]`.

        Args:
            data (bytes): The byte string.
            start (int): Offset to match at.

        Returns:
            tuple[int, int]: (token id, token length in bytes).

        Raises:
            BackendError: If no token matches at `start`.
        """
        node = self.trie
        best: tuple[int, int] | None = None
        pos = start
        while pos < len(data):
            node = node.children.get(data[pos])
            if node is None:
                break
            pos += 1
            if node.token_ids:
                best = (node.token_ids[0], pos - start)
        if best is None:
            raise BackendError(f"Vocabulary cannot encode byte 0x{data[start]:02x} at offset {start}")
        return best

    def encode(self, text: str) -> list[int]:
        """Encodes text greedily (longest token first) into token ids."""
        return self.encode_bytes(text.encode("utf-8"))

    def encode_bytes(self, data: bytes) -> list[int]:
        ids: list[int] = []
        pos = 0
        while pos < len(data):
            token_id, length = self.longest_match(data, pos)
            ids.append(token_id)
            pos += length
        return ids

    def count_tokens(self, text: str) -> int:
        return self._count(text)

    def decode(self, ids: Iterable[int]) -> str:
        return b"".join(self._tokens[i] for i in ids).decode("utf-8", errors="replace")


def build_vocabulary(merges: Iterable[str] = ()) -> TokenizerVocabulary:
    """
    Builds a byte-level vocabulary: the 256 single bytes followed by merges.

    The grammar literals and polarity words are always merged; further merges
    (categories, frequent words) shorten generations. Merges of one byte and
    duplicates are skipped so the vocabulary stays a bijection.

    Args:
        merges (Iterable[str]): Additional multi-byte tokens.

    Returns:
        TokenizerVocabulary: The vocabulary.
    """
    tokens: dict[int, bytes] = {i: bytes([i]) for i in range(256)}
    seen = set(tokens.values())
    for merge in (*GRAMMAR_MERGES, *merges):
        data = merge.encode("utf-8")
        if len(data) < 2 or data in seen:
            continue
        seen.add(data)
        tokens[len(tokens)] = data
    return TokenizerVocabulary(tokens)


# ------------------------------
#  SERVED-MODEL TOKENIZERS
# ------------------------------

class TokenCounter(Protocol):
    """Anything that can count the tokens of a prompt."""

    def count_tokens(self, text: str) -> int: ...


class ModelTokenizer:
    """
    Token counter of a served model.

    Counts prompt text the way the endpoint's own tokenizer does, so context
    checks and prefill ledgers match what the server bills. Chat-template
    tokens are not included; the endpoint's reported usage covers those.

    Attributes:
        name (str): The tokenizer spec it was loaded from.
    """

    def __init__(self, name: str, encode: Callable[[str], Sequence[int]]):
        self.name = name
        self._encode = encode
        self._count = lru_cache(maxsize=4096)(lambda text: len(self._encode(text)))

    def count_tokens(self, text: str) -> int:
        return self._count(text)


def load_model_tokenizer(spec: str) -> ModelTokenizer:
    """
    Loads the tokenizer of a served model.

    `tiktoken:<encoding>` selects a tiktoken encoding (e.g. `tiktoken:o200k_base`).
    A path to a `tokenizer.json` file or a HuggingFace hub id loads a
    `tokenizers` tokenizer.

    Args:
        spec (str): Tokenizer spec.

    Returns:
        ModelTokenizer: The counter.

    Raises:
        ConfigError: If the tokenizer cannot be loaded.
    """
    try:
        if spec.startswith("tiktoken:"):
            encoding = tiktoken.get_encoding(spec.split(":", 1)[1])
            return ModelTokenizer(spec, lambda text: encoding.encode(text, disallowed_special=()))
        if Path(spec).is_file():
            hf = HFTokenizer.from_file(spec)
        else:
            hf = HFTokenizer.from_pretrained(spec)
    except Exception as e:
        raise ConfigError(f"Cannot load model tokenizer '{spec}': {e}")
    return ModelTokenizer(spec, lambda text: hf.encode(text, add_special_tokens=False).ids)
