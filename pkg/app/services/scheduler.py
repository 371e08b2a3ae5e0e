"""
===============================================================================
Project   : mvprompt
Module    : app/services/scheduler.py
Created   : 2025-11-08
Author    : Florian
Purpose   : This module groups decode requests by shared prompt prefix,
            dispatches the groups to a backend and keeps an exact token-cost
            ledger of prefill reuse.

@docstyle: google
@language: english
@voice: imperative
===============================================================================
"""


import hashlib
import logging
import threading
from collections.abc import Iterable, Sequence
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Optional

from pydantic import BaseModel, computed_field

from app.core.constants import MAX_IN_FLIGHT
from app.core.errors import BackendError, GroupingIntegrityError
from app.core.vocabulary import TokenCounter
from app.services.backend_service import DecodeRequest, GenerationRecord, LanguageModelBackend, decode

logger = logging.getLogger(__name__)


# ------------------------------
#  GROUPS / LEDGER
# ------------------------------

@dataclass
class PrefixGroup:
    """
    Requests sharing one byte-identical prompt prefix.

    Attributes:
        key (tuple): Group key (permutation id, shot sample id, task, dataset).
        prefix (str): The shared prefix.
        prefix_hash (str): SHA-256 of the prefix.
        prefix_token_count (int): Prefix length in tokens, set when a tokenizer is known.
        requests (list[DecodeRequest]): Member requests in submission order.
    """
    key: tuple
    prefix: str
    prefix_hash: str
    prefix_token_count: int = 0
    requests: list[DecodeRequest] = field(default_factory=list)


class CostLedger(BaseModel):
    """
    Token cost of a batch with and without prefix reuse.

    cached   = sum over groups of prefix tokens + sum over requests of suffix tokens
    uncached = sum over requests of (prefix tokens + suffix tokens)

    Attributes:
        prefill_tokens_cached (int): Prefill tokens when each prefix is processed once per group.
        prefill_tokens_uncached (int): Prefill tokens when every request recomputes its prefix.
        generated_tokens (int): Tokens generated.
        reported_prompt_tokens (int): Prompt tokens billed by the endpoint, when it reports usage.
        reported_completion_tokens (int): Generated tokens billed by the endpoint, when it reports usage.
        requests (int): Number of requests.
        groups (int): Number of prefix groups.
    """
    prefill_tokens_cached: int = 0
    prefill_tokens_uncached: int = 0
    generated_tokens: int = 0
    reported_prompt_tokens: int = 0
    reported_completion_tokens: int = 0
    requests: int = 0
    groups: int = 0

    @computed_field
    @property
    def savings_ratio(self) -> float:
        if self.prefill_tokens_uncached == 0:
            return 0.0
        return 1.0 - self.prefill_tokens_cached / self.prefill_tokens_uncached

    def merge(self, other: "CostLedger") -> "CostLedger":
        return CostLedger(
            prefill_tokens_cached=self.prefill_tokens_cached + other.prefill_tokens_cached,
            prefill_tokens_uncached=self.prefill_tokens_uncached + other.prefill_tokens_uncached,
            generated_tokens=self.generated_tokens + other.generated_tokens,
            reported_prompt_tokens=self.reported_prompt_tokens + other.reported_prompt_tokens,
            reported_completion_tokens=self.reported_completion_tokens + other.reported_completion_tokens,
            requests=self.requests + other.requests,
            groups=self.groups + other.groups,
        )


def _hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def schedule(requests: Iterable[DecodeRequest], grouping: bool = True,
             tokenizer: Optional[TokenCounter] = None) -> list[PrefixGroup]:
    """
    Groups requests by their prefix-group key.

    Groups appear in first-seen order and keep the submission order of their
    requests. Without grouping every request forms its own group, which models
    a backend that recomputes each prompt from scratch.

    Args:
        requests (Iterable[DecodeRequest]): Requests tagged with group keys.
        grouping (bool): Whether to share prefixes.
        tokenizer (Optional[TokenCounter]): Fills `prefix_token_count` when given.

    Returns:
        list[PrefixGroup]: The groups.

    Raises:
        GroupingIntegrityError: If two requests under one key differ in prefix,
            or request ids are not unique.
    """
    groups: dict[tuple, PrefixGroup] = {}
    seen_ids: set[str] = set()
    for idx, request in enumerate(requests):
        if request.request_id:
            if request.request_id in seen_ids:
                raise GroupingIntegrityError(f"Duplicate request id '{request.request_id}'")
            seen_ids.add(request.request_id)

        if not grouping:
            key = ("request", idx, request.request_id)
        else:
            key = request.group_key or ("prefix", _hash(request.prefix))

        group = groups.get(key)
        if group is None:
            group = PrefixGroup(key=key, prefix=request.prefix, prefix_hash=_hash(request.prefix))
            if tokenizer is not None:
                group.prefix_token_count = tokenizer.count_tokens(request.prefix)
            groups[key] = group
        elif group.prefix != request.prefix:
            raise GroupingIntegrityError(
                f"Request '{request.request_id}' has a different prefix than group {key}"
            )
        group.requests.append(request)
    return list(groups.values())


def account(groups: Sequence[PrefixGroup], tokenizer: TokenCounter) -> CostLedger:
    """
    Computes the exact prefill ledger of a set of groups.

    Args:
        groups (Sequence[PrefixGroup]): Scheduled groups.
        tokenizer (TokenCounter): Tokenizer used for counting.

    Returns:
        CostLedger: Cached and uncached prefill token totals (generated tokens 0).
    """
    cached = 0
    uncached = 0
    n_requests = 0
    for group in groups:
        prefix_tokens = tokenizer.count_tokens(group.prefix)
        cached += prefix_tokens
        for request in group.requests:
            suffix_tokens = tokenizer.count_tokens(request.suffix)
            cached += suffix_tokens
            uncached += prefix_tokens + suffix_tokens
            n_requests += 1
    return CostLedger(
        prefill_tokens_cached=cached,
        prefill_tokens_uncached=uncached,
        requests=n_requests,
        groups=len(groups),
    )


# ------------------------------
#  DISPATCH
# ------------------------------

class BatchScheduler:
    """
    Dispatches decode requests group by group.

    Requests of one group run serially, so a cache-capable backend sees each
    prefix contiguously; groups run concurrently, bounded by `max_in_flight`.
    The ledger is updated under a lock once per completed request. A request
    failing with a backend error is recorded in `failures` and its group moves
    on to the next request.

    Attributes:
        backend (LanguageModelBackend): Backend decoding the requests.
        tokenizer (Optional[TokenCounter]): Counts prefill tokens for the ledger;
            None leaves the prefill counts at 0 (reported usage is still summed).
        grouping (bool): Whether requests share prefixes.
        max_in_flight (int): Maximum number of groups decoding at once.
        ledger (CostLedger): Accumulated cost of completed requests.
        completed (dict[str, GenerationRecord]): Records of completed requests.
        failures (dict[str, str]): Diagnostic per failed request id.
    """

    def __init__(self, backend: LanguageModelBackend, tokenizer: Optional[TokenCounter] = None,
                 grouping: bool = True, max_in_flight: int = MAX_IN_FLIGHT):
        self.backend = backend
        self.tokenizer = tokenizer if tokenizer is not None else backend.token_counter
        self.grouping = grouping
        self.max_in_flight = max(1, max_in_flight)
        self.ledger = CostLedger()
        self.completed: dict[str, GenerationRecord] = {}
        self.failures: dict[str, str] = {}
        self._lock = threading.Lock()
        self._cancel = threading.Event()
        if self.tokenizer is None:
            logger.warning(f"[Scheduler] ⚠️ No token counter for backend {backend.name}; "
                           f"the ledger only carries the usage the endpoint reports")

    def cancel(self) -> None:
        """Stops dispatching; requests already decoding finish and are kept."""
        self._cancel.set()

    def _count(self, text: str) -> int:
        return self.tokenizer.count_tokens(text) if self.tokenizer is not None else 0

    def _run_group(self, group: PrefixGroup) -> None:
        prefix_tokens = self._count(group.prefix)
        prefix_paid = False
        for request in group.requests:
            if self._cancel.is_set():
                return
            try:
                record = decode(self.backend, request)
            except BackendError as e:
                logger.warning(f"[Scheduler] ⚠️ Request {request.request_id} failed: {e.detail}")
                with self._lock:
                    self.failures[request.request_id] = e.detail
                continue
            suffix_tokens = self._count(request.suffix)
            step = CostLedger(
                prefill_tokens_cached=suffix_tokens + (0 if prefix_paid else prefix_tokens),
                prefill_tokens_uncached=prefix_tokens + suffix_tokens,
                generated_tokens=len(record.tokens),
                reported_prompt_tokens=record.prompt_tokens or 0,
                reported_completion_tokens=record.completion_tokens or 0,
                requests=1,
                groups=0 if prefix_paid else 1,
            )
            prefix_paid = True
            with self._lock:
                self.completed[request.request_id] = record
                self.ledger = self.ledger.merge(step)

    def dispatch(self, requests: Sequence[DecodeRequest]) -> dict[str, GenerationRecord]:
        """
        Decodes a batch of requests.

        Args:
            requests (Sequence[DecodeRequest]): Requests with unique ids.

        Returns:
            dict[str, GenerationRecord]: Records of the completed requests by id,
                in request order. Failed requests are left out and listed in `failures`.

        Raises:
            GroupingIntegrityError: On inconsistent group prefixes.
        """
        groups = schedule(requests, grouping=self.grouping)
        for request in requests:
            self.failures.pop(request.request_id, None)
        logger.info(f"[Scheduler] Dispatching {len(requests)} requests in {len(groups)} groups "
                    f"(grouping={'on' if self.grouping else 'off'}, max_in_flight={self.max_in_flight})")

        pool = ThreadPoolExecutor(max_workers=self.max_in_flight, thread_name_prefix="mvp-group")
        futures = [pool.submit(self._run_group, g) for g in groups]
        try:
            done, _ = wait(futures, return_when=FIRST_EXCEPTION)
            for future in done:
                error = future.exception()
                if error is not None:
                    raise error
        except BaseException:
            self.cancel()
            logger.error(f"[Scheduler] ❌ Dispatch aborted after {len(self.completed)} completed requests")
            raise
        finally:
            pool.shutdown(wait=True, cancel_futures=True)

        if self.failures:
            logger.warning(f"[Scheduler] ⚠️ {len(self.failures)} of {len(requests)} requests failed")
        return {r.request_id: self.completed[r.request_id] for r in requests if r.request_id in self.completed}
