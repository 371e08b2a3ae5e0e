"""
===============================================================================
Project   : mvprompt
Module    : app/core/errors.py
Created   : 2025-11-03
Author    : Florian
Purpose   : Exception hierarchy shared by all services. Every error carries a
            human-readable detail and the process exit code the CLI uses.

@docstyle: google
@language: english
@voice: imperative
===============================================================================
"""


class MvpError(Exception):
    """
    Base class for all mvprompt errors.

    Attributes:
        detail (str): Human-readable description of the problem.
        exit_code (int): Exit code used by the command-line interface.
    """
    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


# ------------------------------
#  CONFIGURATION (exit code 2)
# ------------------------------

class ConfigError(MvpError):
    exit_code = 2


class InsufficientPoolError(ConfigError):
    """Raised when more demonstrations are requested than the pool holds."""


class MalformedDemonstrationError(ConfigError):
    """Raised when a demonstration instance carries no gold labels."""


class DatasetError(ConfigError):
    """Raised for unreadable or malformed dataset files."""


class LexiconError(MvpError):
    exit_code = 2


class EmptyInputError(LexiconError):
    """Raised when an empty sentence is tokenized."""


# ------------------------------
#  BACKEND / DECODING (exit code 3)
# ------------------------------

class BackendError(MvpError):
    exit_code = 3


class TransportError(BackendError):
    """Raised when a remote endpoint cannot be reached or answers with an error."""


class ContextLengthError(BackendError):
    """Raised when prompt plus generation budget exceeds the context window."""


class OracleMissError(BackendError):
    """Raised when the oracle backend has no gold entry for an instance."""


class EmptyMaskError(BackendError):
    """Raised when no vocabulary token can continue a live grammar state."""


class InvalidDistributionError(BackendError):
    """Raised for token distributions without probability mass."""


class EmptyGenerationError(BackendError):
    """Raised when an aggregate is requested over a zero-length generation."""


class GroupingIntegrityError(BackendError):
    """Raised when requests sharing a group key do not share their prefix."""


class GrammarError(MvpError):
    exit_code = 3


class UnsatisfiableSchemaError(GrammarError):
    """Raised when a schema has no terminals for some slot."""


class DeadTransitionError(GrammarError):
    """
    Raised when input leaves the live states of a grammar automaton.

    Attributes:
        offset (int): 1-based position of the first rejected byte in the consumed input.
    """

    def __init__(self, detail: str, offset: int):
        super().__init__(detail)
        self.offset = offset


class TupleParseError(GrammarError):
    """
    Raised when an output string is not a well-formed tuple list.

    Attributes:
        offset (int): 1-based byte position of the first violation; one past the
            end when the output stops early.
    """

    def __init__(self, detail: str, offset: int):
        super().__init__(detail)
        self.offset = offset


# ------------------------------
#  EVALUATION (exit code 4)
# ------------------------------

class EvaluationError(MvpError):
    exit_code = 4
