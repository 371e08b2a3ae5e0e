"""
===============================================================================
Project   : mvprompt
Module    : app/services/eval_service.py
Created   : 2025-11-10
Author    : Florian
Purpose   : Exact-match tuple evaluation: micro precision/recall/F1, macro-F1
            over instances and run reports across seeds.

@docstyle: google
@language: english
@voice: imperative
===============================================================================
"""

import json
import logging
import re
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from app.core.errors import EvaluationError, MvpError
from app.core.schemas import RunConfig, SentimentTuple, Strategy, Task
from app.services.dataset_service import load_instances
from app.services.multiview_service import AggregatedPrediction, prediction_from_json

logger = logging.getLogger(__name__)

REPORT_JSON = "report.json"
REPORT_TXT = "report.txt"
PREDICTIONS_FILE = "predictions.jsonl"
LEDGER_FILE = "ledger.json"

_SEED_DIR = re.compile(r"^seed-(-?\d+)$")


# ------------------------------
#  COUNTS / SCORES
# ------------------------------

@dataclass(frozen=True)
class MatchCounts:
    """
    Exact-match counts.

    Attributes:
        true_positives (int): Predicted tuples found in the gold set.
        false_positives (int): Predicted tuples not in the gold set.
        false_negatives (int): Gold tuples not predicted.
    """
    true_positives: int = 0
    false_positives: int = 0
    false_negatives: int = 0

    def __post_init__(self):
        if min(self.true_positives, self.false_positives, self.false_negatives) < 0:
            raise ValueError("Match counts must be non-negative")

    def __add__(self, other: "MatchCounts") -> "MatchCounts":
        return MatchCounts(
            self.true_positives + other.true_positives,
            self.false_positives + other.false_positives,
            self.false_negatives + other.false_negatives,
        )


@dataclass(frozen=True)
class MicroScores:
    precision: float
    recall: float
    f1: float


def match(gold: Iterable[SentimentTuple], pred: Iterable[SentimentTuple]) -> MatchCounts:
    """
    Counts exact matches between gold and predicted tuples.

    Both sides are treated as sets; a tuple matches only if every element is
    equal, case included.
    """
    gold_set = frozenset(gold)
    pred_set = frozenset(pred)
    tp = len(gold_set & pred_set)
    return MatchCounts(tp, len(pred_set) - tp, len(gold_set) - tp)


def micro_scores(counts: MatchCounts) -> MicroScores:
    """Computes precision, recall and F1 from pooled counts (0/0 counts as 0)."""
    tp, fp, fn = counts.true_positives, counts.false_positives, counts.false_negatives
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return MicroScores(precision, recall, f1)


def instance_f1(gold: Iterable[SentimentTuple], pred: Iterable[SentimentTuple]) -> float:
    """F1 of one instance; 1.0 when both gold and prediction are empty."""
    gold_set, pred_set = frozenset(gold), frozenset(pred)
    if not gold_set and not pred_set:
        return 1.0
    return micro_scores(match(gold_set, pred_set)).f1


def macro_f1(pairs: Iterable[tuple[Iterable[SentimentTuple], Iterable[SentimentTuple]]]) -> float:
    """Unweighted mean of per-instance F1 over (gold, pred) pairs."""
    scores = [instance_f1(gold, pred) for gold, pred in pairs]
    return float(np.mean(scores)) if scores else 0.0


# ------------------------------
#  REPORTS
# ------------------------------

class InstanceScore(BaseModel):
    id: str
    true_positives: int
    false_positives: int
    false_negatives: int
    f1: float
    error: Optional[str] = None


class MetricReport(BaseModel):
    """
    Scores of one prediction set.

    Attributes:
        micro_precision (float): Pooled precision.
        micro_recall (float): Pooled recall.
        micro_f1 (float): Pooled F1, the primary metric.
        macro_f1 (float): Mean per-instance F1.
        true_positives (int): Pooled true positives.
        false_positives (int): Pooled false positives.
        false_negatives (int): Pooled false negatives.
        n_instances (int): Number of gold instances.
        n_aborted (int): Instances whose prediction was aborted.
        per_instance (list[InstanceScore]): Breakdown in id order.
        metadata (dict): Run metadata (strategy, m, k, seed, ...).
    """
    micro_precision: float
    micro_recall: float
    micro_f1: float
    macro_f1: float
    true_positives: int
    false_positives: int
    false_negatives: int
    n_instances: int
    n_aborted: int = 0
    per_instance: list[InstanceScore] = Field(default_factory=list)
    metadata: dict[str, Any] = Field(default_factory=dict)


def evaluate(predictions: Iterable[AggregatedPrediction], gold: Mapping[str, frozenset[SentimentTuple]],
             metadata: Optional[dict] = None) -> MetricReport:
    """
    Scores predictions against gold tuples.

    Gold instances without a prediction count as empty predictions.

    Args:
        predictions (Iterable[AggregatedPrediction]): Predictions.
        gold (Mapping[str, frozenset[SentimentTuple]]): Gold tuples per instance id.
        metadata (Optional[dict]): Echoed into the report.

    Returns:
        MetricReport: Micro and macro scores with per-instance breakdown.

    Raises:
        EvaluationError: If a predicted instance has no gold annotation.
    """
    by_id: dict[str, AggregatedPrediction] = {}
    for prediction in predictions:
        if prediction.instance_id not in gold:
            raise EvaluationError(f"No gold annotation for instance '{prediction.instance_id}'")
        by_id[prediction.instance_id] = prediction

    total = MatchCounts()
    per_instance: list[InstanceScore] = []
    for instance_id in sorted(gold):
        prediction = by_id.get(instance_id)
        pred_tuples = prediction.tuples if prediction is not None else frozenset()
        counts = match(gold[instance_id], pred_tuples)
        total = total + counts
        per_instance.append(InstanceScore(
            id=instance_id,
            true_positives=counts.true_positives,
            false_positives=counts.false_positives,
            false_negatives=counts.false_negatives,
            f1=instance_f1(gold[instance_id], pred_tuples),
            error=prediction.error if prediction is not None else "missing prediction",
        ))

    micro = micro_scores(total)
    return MetricReport(
        micro_precision=micro.precision,
        micro_recall=micro.recall,
        micro_f1=micro.f1,
        macro_f1=float(np.mean([s.f1 for s in per_instance])) if per_instance else 0.0,
        true_positives=total.true_positives,
        false_positives=total.false_positives,
        false_negatives=total.false_negatives,
        n_instances=len(per_instance),
        n_aborted=sum(1 for s in per_instance if s.error is not None),
        per_instance=per_instance,
        metadata=dict(metadata or {}),
    )


class RunReport(BaseModel):
    """
    Report of a run directory across seeds.

    Attributes:
        run_dir (str): The run directory.
        gold (str): Gold file used.
        metadata (dict): Run configuration summary.
        seeds (dict[str, MetricReport]): Scores per seed.
        mean (dict[str, float]): Mean of each score over seeds.
        ledgers (dict[str, dict]): Cost ledger per seed, if recorded.
    """
    run_dir: str
    gold: str
    metadata: dict[str, Any] = Field(default_factory=dict)
    seeds: dict[str, MetricReport] = Field(default_factory=dict)
    mean: dict[str, float] = Field(default_factory=dict)
    ledgers: dict[str, dict] = Field(default_factory=dict)


def load_predictions(path: Path) -> list[AggregatedPrediction]:
    """
    Reads a predictions JSONL file.

    Raises:
        EvaluationError: If the file is missing, empty or malformed.
    """
    if not path.is_file():
        raise EvaluationError(f"Prediction file not found: {path}")
    predictions = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            predictions.append(prediction_from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as e:
            raise EvaluationError(f"{path}:{lineno}: malformed prediction ({e})")
    if not predictions:
        raise EvaluationError(f"Prediction file is empty: {path}")
    return predictions


def seed_dirs(run_dir: Path) -> list[tuple[int, Path]]:
    """Lists the seed-<s> subdirectories of a run, ordered by seed."""
    found = []
    for child in Path(run_dir).iterdir() if Path(run_dir).is_dir() else ():
        m = _SEED_DIR.match(child.name)
        if m and child.is_dir():
            found.append((int(m.group(1)), child))
    return sorted(found)


def load_gold(gold_path: Path, task: Task) -> dict[str, frozenset[SentimentTuple]]:
    """
    Loads gold tuples per instance id.

    Raises:
        EvaluationError: If the file is missing, unreadable or unlabelled.
    """
    if not Path(gold_path).is_file():
        raise EvaluationError(f"Gold file not found: {gold_path}")
    try:
        instances = load_instances(gold_path, task)
    except MvpError as e:
        raise EvaluationError(f"Cannot read gold file: {e.detail}")
    unlabelled = [i.id for i in instances if i.gold is None]
    if unlabelled:
        raise EvaluationError(f"Gold file has unlabelled instances: {unlabelled[:5]}")
    return {i.id: i.gold_set for i in instances}


def run_metadata(run_dir: Path) -> dict:
    """Reads the config.json of a run directory; empty when absent."""
    config_path = Path(run_dir) / "config.json"
    if not config_path.is_file():
        return {}
    try:
        return json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise EvaluationError(f"Invalid run configuration {config_path}: {e}")


def resolve_task(run_dir: Path, task: Optional[Task] = None) -> Task:
    """Returns `task`, or the task recorded in the run's config.json."""
    if task is not None:
        return task
    recorded = run_metadata(run_dir).get("task")
    if recorded is None:
        raise EvaluationError(f"Task unknown: {run_dir}/config.json is missing")
    return Task.of(recorded["kind"] if isinstance(recorded, dict) else recorded)


def recorded_config(run_dir: Path) -> Optional[RunConfig]:
    """
    Validates the config.json of a run directory.

    Returns None when the file is absent or no longer validates, for example
    after the data files of the run were moved.
    """
    data = run_metadata(run_dir)
    if not data:
        return None
    try:
        return RunConfig.model_validate(data)
    except (ValidationError, MvpError) as e:
        logger.warning(f"[Eval] ⚠️ {run_dir}/config.json does not validate; reporting its raw values: {e}")
        return None


def run_settings(run_dir: Path, task: Task) -> dict:
    """Strategy settings of a run with defaults resolved (m, dataset name, ...)."""
    config = recorded_config(run_dir)
    if config is None:
        raw = run_metadata(run_dir)
        return {key: raw.get(key) for key in ("strategy", "m", "k", "dataset", "guided", "prefix_grouping")}
    selection = config.selection()
    views = {
        Strategy.SINGLE_ORDER: 1,
        Strategy.SELF_CONSISTENCY: selection.sc_samples,
    }
    return {
        "strategy": config.strategy.value,
        "m": views.get(config.strategy, selection.resolved_m(task)),
        "k": config.k,
        "dataset": config.dataset_name,
        "guided": config.guided,
        "prefix_grouping": config.prefix_grouping,
    }


def report(run_dir: Path, gold_path: Path, task: Optional[Task] = None) -> RunReport:
    """
    Evaluates every seed of a run directory and writes report.json and report.txt.

    Args:
        run_dir (Path): Run directory with seed-<s>/predictions.jsonl files.
        gold_path (Path): Gold instances (JSONL).
        task (Optional[Task]): Task; read from the run's config.json when omitted.

    Returns:
        RunReport: Per-seed scores and their mean.

    Raises:
        EvaluationError: If gold or predictions are missing or empty.
    """
    run_dir = Path(run_dir)
    task = resolve_task(run_dir, task)
    settings = run_settings(run_dir, task)
    gold = load_gold(gold_path, task)

    seeds = seed_dirs(run_dir)
    if not seeds:
        raise EvaluationError(f"No seed-*/{PREDICTIONS_FILE} found in {run_dir}")

    result = RunReport(
        run_dir=str(run_dir),
        gold=str(gold_path),
        metadata={
            "task": task.kind.value,
            **settings,
            "uncached_ledger": "prefix recomputed per request",
        },
    )
    for seed, directory in seeds:
        predictions = load_predictions(directory / PREDICTIONS_FILE)
        metadata = {
            "seed": seed,
            "strategy": settings["strategy"] or predictions[0].strategy.value,
            "m": predictions[0].m,
            "k": settings["k"],
        }
        result.seeds[str(seed)] = evaluate(predictions, gold, metadata)
        ledger_path = directory / LEDGER_FILE
        if ledger_path.is_file():
            result.ledgers[str(seed)] = json.loads(ledger_path.read_text(encoding="utf-8"))

    for name in ("micro_precision", "micro_recall", "micro_f1", "macro_f1"):
        result.mean[name] = float(np.mean([getattr(r, name) for r in result.seeds.values()]))

    (run_dir / REPORT_JSON).write_text(
        json.dumps(result.model_dump(mode="json"), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    (run_dir / REPORT_TXT).write_text(format_table(result), encoding="utf-8")
    logger.info(f"[Eval] ✅ {run_dir}: micro-F1 {100 * result.mean['micro_f1']:.2f} over {len(seeds)} seed(s)")
    return result


def format_table(result: RunReport) -> str:
    """Renders a run report as a plain-text table (scores x 100, two decimals)."""
    meta = result.metadata
    header = (f"task={meta.get('task')} dataset={meta.get('dataset')} strategy={meta.get('strategy')} "
              f"m={meta.get('m')} k={meta.get('k')}")
    lines = [header, f"{'seed':<8}{'P':>8}{'R':>8}{'F1':>8}{'Macro-F1':>10}"]

    def row(label: str, p: float, r: float, f1: float, macro: float) -> str:
        return f"{label:<8}{100 * p:>8.2f}{100 * r:>8.2f}{100 * f1:>8.2f}{100 * macro:>10.2f}"

    for seed, rep in sorted(result.seeds.items(), key=lambda kv: int(kv[0])):
        lines.append(row(seed, rep.micro_precision, rep.micro_recall, rep.micro_f1, rep.macro_f1))
    if result.mean:
        mean = result.mean
        lines.append(row("mean", mean["micro_precision"], mean["micro_recall"], mean["micro_f1"], mean["macro_f1"]))
    return "\n".join(lines) + "\n"
