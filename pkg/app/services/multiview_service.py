"""
===============================================================================
Project   : mvprompt
Module    : app/services/multiview_service.py
Created   : 2025-11-09
Author    : Florian
Purpose   : Multi-view prediction. Decodes an instance under every element
            order, ranks the views by mean token entropy, keeps the m most
            confident ones and majority-votes their tuples. Also provides the
            single-order, self-consistency and confidence-routed strategies
            and the JSONL persistence of predictions.

@docstyle: google
@language: english
@voice: imperative
===============================================================================
"""

import logging
import math
from collections import Counter
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Optional

from app.core.constants import MAX_NEW_TOKENS, MVP_TEMPERATURE
from app.core.errors import ConfigError, GrammarError
from app.core.schemas import (
    CategorySet,
    Instance,
    Permutation,
    SentimentTuple,
    Strategy,
    Task,
    ViewSelectionConfig,
)
from app.helpers.lexicon import PhraseLexicon, build_lexicon
from app.helpers.permutation_helper import all_permutations, default_permutation, shot_sample_id
from app.services.backend_service import DecodeRequest, GenerationRecord, LanguageModelBackend
from app.services.grammar_service import TupleSchema, parse_tuples, parse_tuples_lenient
from app.services.prompt_service import PromptTemplate, render_prefix, render_suffix
from app.services.scheduler import BatchScheduler

logger = logging.getLogger(__name__)


# ------------------------------
#  RESULT TYPES
# ------------------------------

@dataclass(frozen=True)
class ViewPrediction:
    """
    Parsed output of one view.

    Attributes:
        view_id (str): Permutation id, suffixed with the sample index for sampled views.
        permutation_id (str): Element order of the view.
        tuples (frozenset[SentimentTuple]): Parsed tuples in canonical form.
        mean_entropy (float): Mean token entropy of the generation.
        mean_confidence (float): Mean probability of the emitted tokens.
        text (str): Raw generated text.
        record (Optional[GenerationRecord]): Full record; None for views read back from disk.
    """
    view_id: str
    permutation_id: str
    tuples: frozenset[SentimentTuple]
    mean_entropy: float
    mean_confidence: float
    text: str
    record: Optional[GenerationRecord] = field(default=None, compare=False, repr=False)

    @property
    def canonical_key(self) -> tuple[str, ...]:
        return tuple(self.permutation_id.split("-"))

    @classmethod
    def from_record(cls, view_id: str, permutation: Permutation, record: GenerationRecord,
                    tuples: frozenset[SentimentTuple]) -> "ViewPrediction":
        return cls(
            view_id=view_id,
            permutation_id=permutation.id,
            tuples=tuples,
            mean_entropy=record.mean_entropy,
            mean_confidence=record.mean_confidence,
            text=record.text,
            record=record,
        )


@dataclass(frozen=True)
class AggregatedPrediction:
    """
    Final prediction of one instance.

    Attributes:
        instance_id (str): Instance id.
        tuples (frozenset[SentimentTuple]): Tuples with more than m/2 votes.
        views (tuple[ViewPrediction, ...]): All decoded views.
        selected_views (tuple[ViewPrediction, ...]): The m lowest-entropy views.
        vote_counts (Mapping[SentimentTuple, int]): Votes per tuple over the selected views.
        strategy (Strategy): Strategy that produced the prediction.
        m (int): Number of voting views.
        error (Optional[str]): Diagnostic when the instance was aborted.
    """
    instance_id: str
    tuples: frozenset[SentimentTuple]
    views: tuple[ViewPrediction, ...]
    selected_views: tuple[ViewPrediction, ...]
    vote_counts: Mapping[SentimentTuple, int]
    strategy: Strategy
    m: int
    error: Optional[str] = None

    @property
    def confidence(self) -> float:
        """Mean emitted-token probability of the first view, 0.0 for aborted instances."""
        return self.views[0].mean_confidence if self.views else 0.0


@dataclass(frozen=True)
class EffRouting:
    """
    Routing decision of the confidence-escalation strategy.

    Attributes:
        quantile (float): Fraction of instances escalated.
        confidences (Mapping[str, float]): Single-order confidence per instance.
        escalated (tuple[str, ...]): Escalated instance ids, least confident first.
    """
    quantile: float
    confidences: Mapping[str, float]
    escalated: tuple[str, ...]

    def to_json(self) -> dict:
        return {
            "quantile": self.quantile,
            "confidences": dict(sorted(self.confidences.items())),
            "escalated": list(self.escalated),
            "n_instances": len(self.confidences),
            "n_escalated": len(self.escalated),
        }


# ------------------------------
#  SELECTION / VOTING
# ------------------------------

def select_top_m(views: Sequence[ViewPrediction], m: int) -> list[ViewPrediction]:
    """
    Selects the m views with the lowest mean entropy.

    Ties are broken by the canonical permutation order, then by view id, so
    the selection is deterministic.

    Raises:
        ConfigError: If m is not in [1, len(views)].
    """
    if m < 1 or m > len(views):
        raise ConfigError(f"Cannot select m={m} views out of {len(views)}")
    ranked = sorted(views, key=lambda v: (v.mean_entropy, v.canonical_key, v.view_id))
    return ranked[:m]


def vote_counts(selected: Sequence[ViewPrediction]) -> Counter:
    counts: Counter = Counter()
    for view in selected:
        counts.update(view.tuples)
    return counts


def majority_vote(selected: Sequence[ViewPrediction]) -> frozenset[SentimentTuple]:
    """Keeps every tuple found in strictly more than half of the selected views."""
    m = len(selected)
    return frozenset(t for t, c in vote_counts(selected).items() if 2 * c > m)


def aggregate(instance_id: str, views: Sequence[ViewPrediction], m: int,
              strategy: Strategy) -> AggregatedPrediction:
    """
    Selects the top-m views of an instance and votes.

    Args:
        instance_id (str): Instance id.
        views (Sequence[ViewPrediction]): All views of the instance.
        m (int): Number of voting views.
        strategy (Strategy): Strategy recorded in the result.

    Returns:
        AggregatedPrediction: The voted prediction.
    """
    selected = select_top_m(views, m)
    return AggregatedPrediction(
        instance_id=instance_id,
        tuples=majority_vote(selected),
        views=tuple(views),
        selected_views=tuple(selected),
        vote_counts=dict(vote_counts(selected)),
        strategy=strategy,
        m=m,
    )


def _aborted(instance_id: str, strategy: Strategy, m: int, error: str) -> AggregatedPrediction:
    return AggregatedPrediction(
        instance_id=instance_id, tuples=frozenset(), views=(), selected_views=(),
        vote_counts={}, strategy=strategy, m=m, error=error,
    )


def sample_seeds(seed: int, n: int) -> list[int]:
    """Distinct sampling seeds derived from a run seed."""
    return [seed * 1000 + j for j in range(n)]


# ------------------------------
#  ENGINE
# ------------------------------

class MultiViewEngine:
    """
    Runs prediction strategies over batches of instances.

    All decodes of a batch go through one dispatcher, so requests of the same
    view share their prompt prefix.

    Attributes:
        task (Task): Extraction task.
        categories (CategorySet): Dataset categories.
        template (PromptTemplate): Prompt template.
        scheduler (BatchScheduler): Request dispatcher.
        selection (ViewSelectionConfig): Strategy settings.
        shots (tuple[Instance, ...]): Demonstrations.
        seed (int): Run seed.
        dataset (str): Dataset name, part of the prefix-group key.
        max_new_tokens (int): Generation budget per view.
    """

    def __init__(self, task: Task, categories: CategorySet, template: PromptTemplate,
                 scheduler: BatchScheduler, selection: Optional[ViewSelectionConfig] = None,
                 shots: Sequence[Instance] = (), seed: int = 0, dataset: str = "dataset",
                 max_new_tokens: int = MAX_NEW_TOKENS):
        self.task = task
        self.categories = categories
        self.template = template
        self.scheduler = scheduler
        self.selection = selection or ViewSelectionConfig()
        self.shots = tuple(shots)
        self.seed = seed
        self.dataset = dataset
        self.max_new_tokens = max_new_tokens
        self._lexicons: dict[str, PhraseLexicon] = {}
        self.finished: dict[str, AggregatedPrediction] = {}
        self._pending: Optional[tuple] = None

    # ---------------- requests ----------------

    def _lexicon(self, instance: Instance) -> PhraseLexicon:
        lexicon = self._lexicons.get(instance.text)
        if lexicon is None:
            lexicon = build_lexicon(instance.text)
            self._lexicons[instance.text] = lexicon
        return lexicon

    def schema_for(self, instance: Instance, permutation: Permutation) -> TupleSchema:
        return TupleSchema(permutation=permutation, lexicon=self._lexicon(instance), categories=self.categories)

    def group_key(self, permutation: Permutation) -> tuple:
        return permutation.id, shot_sample_id(self.seed, len(self.shots)), self.task.kind.value, self.dataset

    def build_requests(self, instances: Sequence[Instance], permutation: Permutation,
                       temperature: float = MVP_TEMPERATURE,
                       seeds: Optional[Sequence[int]] = None) -> list[DecodeRequest]:
        """
        Builds the requests of one view for a batch of instances.

        The prefix is rendered once per view. With `seeds`, one request per
        seed and instance is built (sampled views).
        """
        prefix = render_prefix(self.template, permutation, self.shots, self.categories)
        key = self.group_key(permutation)
        requests = []
        for instance in instances:
            suffix = render_suffix(self.template, instance)
            schema = self.schema_for(instance, permutation) if self.selection.guided else None
            for seed in (seeds if seeds is not None else (None,)):
                request_id = f"{instance.id}|{permutation.id}" + (f"|s{seed}" if seed is not None else "")
                requests.append(DecodeRequest(
                    prefix=prefix,
                    suffix=suffix,
                    schema=schema,
                    max_tokens=self.max_new_tokens,
                    temperature=temperature,
                    seed=seed if seed is not None else self.seed,
                    request_id=request_id,
                    instance_id=instance.id,
                    permutation=permutation,
                    group_key=key,
                ))
        return requests

    def to_view(self, instance: Instance, permutation: Permutation, record: GenerationRecord,
                view_id: Optional[str] = None) -> ViewPrediction:
        """
        Parses a record into a view.

        Raises:
            TupleParseError: If a guided output is not a complete tuple list.
        """
        schema = self.schema_for(instance, permutation)
        if self.selection.guided:
            tuples = parse_tuples(record.text, schema)
        else:
            tuples = parse_tuples_lenient(record.text, schema)
        return ViewPrediction.from_record(view_id or permutation.id, permutation, record, tuples)

    def _view_failure(self, instance: Instance, request_ids: Mapping[str, Sequence[str]]) -> Optional[str]:
        """Diagnostic of the first failed view of an instance, None when all views decoded."""
        failed = [self.scheduler.failures[r] for r in request_ids.get(instance.id, ()) if r in self.scheduler.failures]
        if not failed:
            return None
        return f"{len(failed)} view(s) failed: {failed[0]}"

    def _predict(self, instance: Instance, strategy: Strategy, m: int, records: Mapping[str, GenerationRecord],
                 views_of: Callable[..., list[ViewPrediction]],
                 request_ids: Mapping[str, Sequence[str]]) -> AggregatedPrediction:
        failure = self._view_failure(instance, request_ids)
        if failure is not None:
            logger.warning(f"[MultiView] ⚠️ Instance {instance.id} aborted: {failure}")
            return _aborted(instance.id, strategy, m, failure)
        try:
            views = views_of(instance, records)
        except GrammarError as e:
            logger.warning(f"[MultiView] ⚠️ Instance {instance.id} aborted: {e.detail}")
            return _aborted(instance.id, strategy, m, e.detail)
        return aggregate(instance.id, views, m, strategy)

    def _dispatch(self, requests: Sequence[DecodeRequest], instances: Sequence[Instance], strategy: Strategy,
                  m: int, views_of: Callable[..., list[ViewPrediction]]) -> list[AggregatedPrediction]:
        request_ids: dict[str, list[str]] = {}
        for request in requests:
            request_ids.setdefault(request.instance_id, []).append(request.request_id)
        self._pending = (tuple(instances), strategy, m, views_of, request_ids)
        records = self.scheduler.dispatch(requests)
        predictions = [self._predict(i, strategy, m, records, views_of, request_ids) for i in instances]
        self.finished.update({p.instance_id: p for p in predictions})
        self._pending = None
        return predictions

    def salvage(self) -> list[AggregatedPrediction]:
        """
        Assembles what an interrupted run has produced.

        Returns the predictions of finished phases plus every instance of the
        interrupted dispatch whose views all completed or failed.
        """
        by_id = dict(self.finished)
        if self._pending is not None:
            instances, strategy, m, views_of, request_ids = self._pending
            completed = dict(self.scheduler.completed)
            for instance in instances:
                settled = all(r in completed or r in self.scheduler.failures for r in request_ids.get(instance.id, ()))
                if settled:
                    by_id[instance.id] = self._predict(instance, strategy, m, completed, views_of, request_ids)
        return list(by_id.values())

    # ---------------- strategies ----------------

    def run_mvp(self, instances: Sequence[Instance]) -> list[AggregatedPrediction]:
        """
        Decodes every permutation greedily, selects the m lowest-entropy views
        and votes.

        Raises:
            ConfigError: If m exceeds the number of permutations.
        """
        permutations = all_permutations(self.task)
        m = self.selection.resolved_m(self.task)
        if m > len(permutations):
            raise ConfigError(f"m={m} exceeds the {len(permutations)} permutations of {self.task.kind.value}")
        logger.info(f"[MultiView] mvp: {len(instances)} instances x {len(permutations)} views (m={m})")

        requests = [r for p in permutations for r in self.build_requests(instances, p)]

        def views_of(instance, recs):
            return [self.to_view(instance, p, recs[f"{instance.id}|{p.id}"]) for p in permutations]

        return self._dispatch(requests, instances, Strategy.MVP, m, views_of)

    def run_single_order(self, instances: Sequence[Instance]) -> list[AggregatedPrediction]:
        """Decodes the natural element order once per instance."""
        permutation = default_permutation(self.task)
        logger.info(f"[MultiView] single_order: {len(instances)} instances ({permutation.id})")
        requests = self.build_requests(instances, permutation)

        def views_of(instance, recs):
            return [self.to_view(instance, permutation, recs[f"{instance.id}|{permutation.id}"])]

        return self._dispatch(requests, instances, Strategy.SINGLE_ORDER, 1, views_of)

    def run_self_consistency(self, instances: Sequence[Instance]) -> list[AggregatedPrediction]:
        """Samples the natural order several times and votes over all samples."""
        permutation = default_permutation(self.task)
        n = self.selection.sc_samples
        seeds = sample_seeds(self.seed, n)
        logger.info(f"[MultiView] self_consistency: {len(instances)} instances x {n} samples "
                    f"(T={self.selection.sc_temperature})")
        requests = self.build_requests(instances, permutation, temperature=self.selection.sc_temperature,
                                       seeds=seeds)

        def views_of(instance, recs):
            return [
                self.to_view(instance, permutation, recs[f"{instance.id}|{permutation.id}|s{s}"],
                             view_id=f"{permutation.id}#{j}")
                for j, s in enumerate(seeds)
            ]

        return self._dispatch(requests, instances, Strategy.SELF_CONSISTENCY, n, views_of)

    def route(self, single: Sequence[AggregatedPrediction], quantile: float) -> EffRouting:
        """
        Picks the least confident floor(quantile * N) instances.

        Ties are broken by instance id.
        """
        confidences = {p.instance_id: p.confidence for p in single}
        n_escalate = math.floor(quantile * len(single) + 1e-9)
        ranked = sorted(confidences, key=lambda i: (confidences[i], i))
        return EffRouting(quantile=quantile, confidences=confidences, escalated=tuple(ranked[:n_escalate]))

    def run_mvp_eff_with_routing(self, instances: Sequence[Instance]) -> tuple[list[AggregatedPrediction], EffRouting]:
        """
        Runs single-order prediction and escalates the least confident
        instances to full multi-view prediction.

        Returns:
            tuple[list[AggregatedPrediction], EffRouting]: Predictions in input
                order and the routing decision.
        """
        single = self.run_single_order(instances)
        routing = self.route(single, self.selection.eff_quantile)
        escalated_ids = set(routing.escalated)
        escalated = [i for i in instances if i.id in escalated_ids]
        logger.info(f"[MultiView] mvp_eff: escalating {len(escalated)} of {len(instances)} instances")

        by_id = {p.instance_id: p for p in single}
        if escalated:
            by_id.update({p.instance_id: p for p in self.run_mvp(escalated)})
        return [by_id[i.id] for i in instances], routing

    def run_mvp_eff(self, instances: Sequence[Instance]) -> list[AggregatedPrediction]:
        return self.run_mvp_eff_with_routing(instances)[0]

    def run(self, instances: Sequence[Instance]) -> tuple[list[AggregatedPrediction], Optional[EffRouting]]:
        """Runs the configured strategy."""
        self.finished.clear()
        self._pending = None
        strategy = self.selection.strategy
        if strategy == Strategy.MVP:
            return self.run_mvp(instances), None
        if strategy == Strategy.SINGLE_ORDER:
            return self.run_single_order(instances), None
        if strategy == Strategy.SELF_CONSISTENCY:
            return self.run_self_consistency(instances), None
        return self.run_mvp_eff_with_routing(instances)


# ------------------------------
#  SINGLE-CALL WRAPPERS
# ------------------------------

def _engine(task: Task, config: ViewSelectionConfig, backend: LanguageModelBackend,
            template: PromptTemplate, shots: Sequence[Instance], categories: CategorySet,
            seed: int) -> MultiViewEngine:
    return MultiViewEngine(task, categories, template, BatchScheduler(backend), selection=config,
                           shots=shots, seed=seed)


def run_mvp(instance: Instance, task: Task, config: ViewSelectionConfig, backend: LanguageModelBackend,
            template: PromptTemplate, shots: Sequence[Instance], categories: CategorySet,
            seed: int = 0) -> AggregatedPrediction:
    return _engine(task, config, backend, template, shots, categories, seed).run_mvp([instance])[0]


def run_single_order(instance: Instance, task: Task, config: ViewSelectionConfig,
                     backend: LanguageModelBackend, template: PromptTemplate, shots: Sequence[Instance],
                     categories: CategorySet, seed: int = 0) -> AggregatedPrediction:
    return _engine(task, config, backend, template, shots, categories, seed).run_single_order([instance])[0]


def run_self_consistency(instance: Instance, task: Task, config: ViewSelectionConfig,
                         backend: LanguageModelBackend, template: PromptTemplate, shots: Sequence[Instance],
                         categories: CategorySet, seed: int = 0) -> AggregatedPrediction:
    return _engine(task, config, backend, template, shots, categories, seed).run_self_consistency([instance])[0]


def run_mvp_eff(test_set: Sequence[Instance], task: Task, config: ViewSelectionConfig,
                backend: LanguageModelBackend, template: PromptTemplate, shots: Sequence[Instance],
                categories: CategorySet, seed: int = 0) -> list[AggregatedPrediction]:
    return _engine(task, config, backend, template, shots, categories, seed).run_mvp_eff(test_set)


def sweep_m(views_by_instance: Mapping[str, Sequence[ViewPrediction]],
            m_values: Iterable[int]) -> dict[int, list[AggregatedPrediction]]:
    """
    Re-aggregates stored views for several values of m without decoding again.

    Returns:
        dict[int, list[AggregatedPrediction]]: Predictions per m, instances in id order.

    Raises:
        ConfigError: If an m exceeds the views of some instance.
    """
    result: dict[int, list[AggregatedPrediction]] = {}
    for m in m_values:
        result[m] = [
            aggregate(instance_id, views_by_instance[instance_id], m, Strategy.MVP)
            for instance_id in sorted(views_by_instance)
        ]
    return result


# ------------------------------
#  PERSISTENCE
# ------------------------------

def _sorted_tuples(tuples: Iterable[SentimentTuple]) -> list[dict]:
    return [t.to_json() for t in sorted(tuples, key=lambda t: t.sort_key())]


def _view_to_json(view: ViewPrediction) -> dict:
    data = {
        "view": view.view_id,
        "permutation": view.permutation_id,
        "text": view.text,
        "tuples": _sorted_tuples(view.tuples),
        "mean_entropy": view.mean_entropy,
        "mean_confidence": view.mean_confidence,
    }
    if view.record is not None:
        data["tokens"] = len(view.record.tokens)
        data["finish_reason"] = view.record.finish_reason
        data["premask_mean_entropy"] = view.record.premask_mean_entropy
    return data


def prediction_to_json(prediction: AggregatedPrediction) -> dict:
    """
    Serializes a prediction to one JSONL object.

    Nothing time-dependent is written, so identical runs produce identical
    files. Serialize with sort_keys=True.
    """
    return {
        "id": prediction.instance_id,
        "strategy": prediction.strategy.value,
        "m": prediction.m,
        "tuples": _sorted_tuples(prediction.tuples),
        "selected": [v.view_id for v in prediction.selected_views],
        "votes": [
            {"tuple": t.to_json(), "count": prediction.vote_counts[t]}
            for t in sorted(prediction.vote_counts, key=lambda t: t.sort_key())
        ],
        "views": [_view_to_json(v) for v in prediction.views],
        "error": prediction.error,
    }


def prediction_from_json(data: dict) -> AggregatedPrediction:
    """Reads back a persisted prediction; views carry no generation records."""
    views = tuple(
        ViewPrediction(
            view_id=v["view"],
            permutation_id=v["permutation"],
            tuples=frozenset(SentimentTuple.from_json(t) for t in v["tuples"]),
            mean_entropy=float(v["mean_entropy"]),
            mean_confidence=float(v["mean_confidence"]),
            text=v["text"],
        )
        for v in data.get("views", [])
    )
    by_id = {v.view_id: v for v in views}
    return AggregatedPrediction(
        instance_id=data["id"],
        tuples=frozenset(SentimentTuple.from_json(t) for t in data["tuples"]),
        views=views,
        selected_views=tuple(by_id[i] for i in data.get("selected", []) if i in by_id),
        vote_counts={SentimentTuple.from_json(v["tuple"]): int(v["count"]) for v in data.get("votes", [])},
        strategy=Strategy(data["strategy"]),
        m=int(data["m"]),
        error=data.get("error"),
    )
