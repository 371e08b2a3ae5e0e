"""
===============================================================================
Project   : mvprompt
Module    : app/services/run_service.py
Created   : 2025-11-11
Author    : Florian
Purpose   : Orchestrates experiment runs: loads the run configuration and
            datasets, builds the backend, runs the strategy per seed and
            persists predictions, ledgers and reports. Also hosts the m-sweep
            and dataset lint commands.

@docstyle: google
@language: english
@voice: imperative
===============================================================================
"""

import json
import logging
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from pydantic import ValidationError

from app.core.errors import ConfigError, EmptyInputError, MvpError
from app.core.logging import get_run_logger
from app.core.schemas import CategorySet, Instance, RunConfig, ShotConfig, Task
from app.core.vocabulary import TokenizerVocabulary, build_vocabulary
from app.helpers.lexicon import lint_instance, tokenize
from app.helpers.permutation_helper import sample_shots
from app.services.backend_service import LanguageModelBackend
from app.services.dataset_service import load_categories, load_instances
from app.services.eval_service import (
    LEDGER_FILE,
    PREDICTIONS_FILE,
    MetricReport,
    RunReport,
    evaluate,
    load_gold,
    load_predictions,
    report,
    resolve_task,
    seed_dirs,
)
from app.services.multiview_service import (
    AggregatedPrediction,
    EffRouting,
    MultiViewEngine,
    prediction_to_json,
    sweep_m,
)
from app.services.oracle_backend import load_oracle
from app.services.prompt_service import PromptTemplate
from app.services.remote_backend import RemoteBackend
from app.services.scheduler import BatchScheduler, CostLedger

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
ROUTING_FILE = "routing.json"
SWEEP_FILE = "sweep.json"


# ------------------------------
#  CONFIGURATION
# ------------------------------

def load_run_config(path: Optional[Path], overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Loads a run configuration file and applies overrides.

    Args:
        path (Optional[Path]): JSON configuration file; None builds the config from overrides alone.
        overrides (Optional[Mapping[str, Any]]): Values replacing file entries; None values are ignored.

    Returns:
        RunConfig: The validated configuration.

    Raises:
        ConfigError: If the file is unreadable or the configuration is invalid.
    """
    data: dict[str, Any] = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read run configuration {path}: {e}")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "backend" and isinstance(value, Mapping):
            data["backend"] = {**data.get("backend", {}), **value}
        else:
            data[key] = value
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid run configuration: {e}")


def run_vocabulary(categories: CategorySet, instances: Iterable[Instance]) -> TokenizerVocabulary:
    """
    Builds the tokenizer of a run: byte tokens plus category and word merges.

    Words are taken from the boundary tokens of every sentence, so the
    vocabulary covers the phrases the grammar admits in few tokens.
    """
    merges: dict[str, None] = dict.fromkeys(categories.categories)
    for instance in instances:
        try:
            merges.update(dict.fromkeys(t.text for t in tokenize(instance.text)))
        except EmptyInputError:
            continue
    return build_vocabulary(merges)


def build_backend(config: RunConfig, vocabulary: TokenizerVocabulary,
                  instances: Sequence[Instance]) -> LanguageModelBackend:
    """
    Creates the backend named by the run configuration.

    The oracle decodes over the run vocabulary. A remote backend counts tokens
    with the served model's tokenizer, when one is configured.
    """
    if config.backend.kind == "oracle":
        fallback = {i.id: i.gold for i in instances if i.gold is not None}
        return load_oracle(config.backend.oracle_path, fallback, vocabulary=vocabulary,
                           max_context_tokens=config.max_context_tokens)
    return RemoteBackend(config.backend, max_context_tokens=config.max_context_tokens)


# ------------------------------
#  PERSISTENCE
# ------------------------------

def _write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def write_predictions(path: Path, predictions: Iterable[AggregatedPrediction]) -> Path:
    """Writes predictions as JSONL with sorted keys, one instance per line."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for prediction in predictions:
            fh.write(json.dumps(prediction_to_json(prediction), sort_keys=True, ensure_ascii=False) + "\n")
    return path


def _persist_seed(seed_dir: Path, predictions: Sequence[AggregatedPrediction], ledger: CostLedger,
                  routing: Optional[EffRouting]) -> None:
    write_predictions(seed_dir / PREDICTIONS_FILE, predictions)
    _write_json(seed_dir / LEDGER_FILE, ledger.model_dump(mode="json"))
    if routing is not None:
        _write_json(seed_dir / ROUTING_FILE, routing.to_json())


# ------------------------------
#  RUN
# ------------------------------

@dataclass
class RunSummary:
    """
    Outcome of `cmd_run`.

    Attributes:
        run_dir (Path): Output directory.
        seeds (list[int]): Seeds that were completed.
        ledgers (dict[int, CostLedger]): Cost ledger per seed.
        report (Optional[RunReport]): Evaluation report, when gold is available.
    """
    run_dir: Path
    seeds: list[int] = field(default_factory=list)
    ledgers: dict[int, CostLedger] = field(default_factory=dict)
    report: Optional[RunReport] = None


def cmd_run(config: RunConfig) -> RunSummary:
    """
    Runs an experiment.

    For each seed the demonstrations are sampled, all requests are scheduled
    and decoded, views are aggregated and the results are written to
    `<output_dir>/seed-<s>/`. The evaluation report follows when every
    instance carries gold tuples.

    Args:
        config (RunConfig): The run configuration.

    Returns:
        RunSummary: Output directory, ledgers and report.

    Raises:
        MvpError: Configuration, backend or evaluation errors. Errors raised
            while a seed runs are re-raised after its completed instances are written.
        KeyboardInterrupt: After the completed instances have been written.
    """
    run_dir = Path(config.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    run_logger = get_run_logger(run_dir)
    _write_json(run_dir / CONFIG_FILE, config.model_dump(mode="json"))

    task = config.task
    categories = load_categories(config.categories)
    instances = load_instances(config.instances, task)
    pool = load_instances(config.pool, task) if config.pool is not None else []
    template = PromptTemplate.load(config.template_dir)

    for instance in instances:
        for warning in lint_instance(instance, categories, task):
            logger.warning(f"[Run] ⚠️ {warning}")
            run_logger.info(f"lint: {warning}")

    vocabulary = run_vocabulary(categories, [*instances, *pool])
    backend = build_backend(config, vocabulary, instances)
    run_logger.info(f"start task={task.kind.value} strategy={config.strategy.value} "
                    f"instances={len(instances)} seeds={config.seeds} backend={backend.describe()}")
    logger.info(f"[Run] {config.strategy.value} on {config.dataset_name}: "
                f"{len(instances)} instances, seeds {config.seeds}, backend {backend.name}")

    summary = RunSummary(run_dir=run_dir)
    for seed in config.seeds:
        shots = sample_shots(ShotConfig(k=config.k, seed=seed, pool=tuple(pool)), config.k) if config.k else []
        scheduler = BatchScheduler(backend, grouping=config.prefix_grouping,
                                   max_in_flight=config.max_in_flight)
        engine = MultiViewEngine(task, categories, template, scheduler, selection=config.selection(),
                                 shots=shots, seed=seed, dataset=config.dataset_name,
                                 max_new_tokens=config.max_new_tokens)
        seed_dir = run_dir / f"seed-{seed}"
        try:
            predictions, routing = engine.run(instances)
        except (KeyboardInterrupt, MvpError) as e:
            order = {i.id: n for n, i in enumerate(instances)}
            partial = sorted(engine.salvage(), key=lambda p: order[p.instance_id])
            _persist_seed(seed_dir, partial, scheduler.ledger, None)
            reason = "interrupted" if isinstance(e, KeyboardInterrupt) else f"failed ({e.detail})"
            run_logger.info(f"seed {seed} {reason}: {len(partial)} of {len(instances)} instances kept")
            logger.warning(f"[Run] ⚠️ Seed {seed} {reason}; {len(partial)} completed instances written to {seed_dir}")
            raise

        _persist_seed(seed_dir, predictions, scheduler.ledger, routing)
        summary.seeds.append(seed)
        summary.ledgers[seed] = scheduler.ledger
        n_aborted = sum(1 for p in predictions if p.error is not None)
        run_logger.info(f"seed {seed} done: {len(predictions)} predictions, {n_aborted} aborted, "
                        f"ledger {scheduler.ledger.model_dump(mode='json')}")
        logger.info(f"[Run] ✅ Seed {seed}: {len(predictions)} predictions "
                    f"(prefill savings {100 * scheduler.ledger.savings_ratio:.1f}%)")

    if instances and all(i.gold is not None for i in instances):
        summary.report = report(run_dir, config.instances, task)
        run_logger.info(f"report: micro-F1 mean {summary.report.mean['micro_f1']:.4f}")
    else:
        logger.info("[Run] Instances carry no gold annotation; skipping the report")
    return summary


# ------------------------------
#  SWEEP / LINT
# ------------------------------

def cmd_sweep(run_dir: Path, gold_path: Path, m_values: Sequence[int],
              task: Optional[Task] = None) -> dict[int, dict[int, MetricReport]]:
    """
    Re-aggregates the stored views of a run for several m and scores each.

    Aborted instances have no views and count as empty predictions.

    Args:
        run_dir (Path): Run directory.
        gold_path (Path): Gold instances.
        m_values (Sequence[int]): Values of m.
        task (Optional[Task]): Task; read from config.json when omitted.

    Returns:
        dict[int, dict[int, MetricReport]]: Reports per m and seed. Also
            written to `sweep.json` in the run directory.

    Raises:
        EvaluationError: If gold or predictions are missing.
        ConfigError: If an m exceeds the stored views of an instance.
    """
    run_dir = Path(run_dir)
    task = resolve_task(run_dir, task)
    gold = load_gold(gold_path, task)
    seeds = seed_dirs(run_dir)
    if not seeds:
        raise ConfigError(f"No seed directories in {run_dir}")

    results: dict[int, dict[int, MetricReport]] = {m: {} for m in m_values}
    for seed, directory in seeds:
        stored = load_predictions(directory / PREDICTIONS_FILE)
        views = {p.instance_id: p.views for p in stored if p.views}
        for m, predictions in sweep_m(views, m_values).items():
            results[m][seed] = evaluate(predictions, gold, {"seed": seed, "m": m, "strategy": "mvp"})

    _write_json(run_dir / SWEEP_FILE, {
        str(m): {str(seed): rep.model_dump(mode="json", exclude={"per_instance"}) for seed, rep in by_seed.items()}
        for m, by_seed in results.items()
    })
    logger.info(f"[Run] ✅ Sweep over m={list(m_values)} written to {run_dir / SWEEP_FILE}")
    return results


def format_sweep(results: Mapping[int, Mapping[int, MetricReport]]) -> str:
    lines = [f"{'m':<6}{'P':>8}{'R':>8}{'F1':>8}{'Macro-F1':>10}"]
    for m in sorted(results):
        reports = list(results[m].values())
        n = len(reports) or 1
        p = sum(r.micro_precision for r in reports) / n
        r_ = sum(r.micro_recall for r in reports) / n
        f1 = sum(r.micro_f1 for r in reports) / n
        macro = sum(r.macro_f1 for r in reports) / n
        lines.append(f"{m:<6}{100 * p:>8.2f}{100 * r_:>8.2f}{100 * f1:>8.2f}{100 * macro:>10.2f}")
    return "\n".join(lines) + "\n"


def cmd_lint(instances_path: Path, categories_path: Path, task: Task) -> list[str]:
    """
    Checks a dataset against the grammar's assumptions.

    Returns:
        list[str]: One warning per gold element the constrained decoder could
            never produce (phrase outside the sentence, unknown category, ...).
    """
    categories = load_categories(categories_path)
    warnings = []
    for instance in load_instances(instances_path, task):
        warnings.extend(lint_instance(instance, categories, task))
    for warning in warnings:
        logger.warning(f"[Lint] ⚠️ {warning}")
    logger.info(f"[Lint] {len(warnings)} warning(s) in {instances_path}")
    return warnings
