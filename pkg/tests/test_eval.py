import json

import pytest

from app.core.errors import EvaluationError
from app.core.schemas import Instance, SentimentTuple, Strategy, Task
from app.services.dataset_service import write_instances
from app.services.eval_service import (
    MatchCounts,
    evaluate,
    format_table,
    instance_f1,
    load_predictions,
    macro_f1,
    match,
    micro_scores,
    report,
    resolve_task,
)
from app.services.multiview_service import ViewPrediction, aggregate, prediction_to_json


def _t(aspect: str, polarity: str = "positive", category: str = "food#quality") -> SentimentTuple:
    return SentimentTuple(aspect_term=aspect, aspect_category=category, polarity=polarity)


def _prediction(instance_id: str, tuples, strategy: Strategy = Strategy.SINGLE_ORDER):
    view = ViewPrediction(view_id="at-ac-p", permutation_id="at-ac-p", tuples=frozenset(tuples),
                          mean_entropy=0.0, mean_confidence=1.0, text="")
    return aggregate(instance_id, [view], 1, strategy)


def _write_run(run_dir, seeds: dict, task: str = "TASD", config: bool = True):
    run_dir.mkdir(parents=True, exist_ok=True)
    if config:
        (run_dir / "config.json").write_text(json.dumps({"task": {"kind": task}, "strategy": "single_order",
                                                         "k": 0, "dataset": "synthetic"}))
    for seed, predictions in seeds.items():
        seed_dir = run_dir / f"seed-{seed}"
        seed_dir.mkdir()
        (seed_dir / "predictions.jsonl").write_text(
            "".join(json.dumps(prediction_to_json(p), sort_keys=True) + "\n" for p in predictions)
        )
    return run_dir


@pytest.fixture
def gold_file(tmp_path):
    instances = [
        Instance(id="a", text="The pasta is fresh .", gold=(_t("pasta"),)),
        Instance(id="b", text="The sushi is bland and the staff is rude .",
                 gold=(_t("sushi", "negative"), _t("staff", "negative", "service#general"))),
    ]
    return write_instances(tmp_path / "gold.jsonl", instances)


# ------------------------------
#  METRICS
# ------------------------------

def test_match_is_exact():
    gold = [_t("pasta"), _t("sushi", "negative")]
    assert match(gold, [_t("pasta"), _t("sushi")]) == MatchCounts(1, 1, 1)
    assert match(gold, [_t("Pasta")]) == MatchCounts(0, 1, 2)
    assert match([], []) == MatchCounts()


def test_micro_scores():
    scores = micro_scores(MatchCounts(3, 1, 2))
    assert scores.precision == pytest.approx(0.75)
    assert scores.recall == pytest.approx(0.6)
    assert scores.f1 == pytest.approx(2 * 0.75 * 0.6 / 1.35)


def test_micro_scores_zero_division():
    scores = micro_scores(MatchCounts())
    assert (scores.precision, scores.recall, scores.f1) == (0.0, 0.0, 0.0)
    assert micro_scores(MatchCounts(0, 0, 4)).f1 == 0.0


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        MatchCounts(-1, 0, 0)


def test_instance_and_macro_f1():
    assert instance_f1([], []) == 1.0
    assert instance_f1([_t("pasta")], []) == 0.0
    pairs = [([_t("pasta")], [_t("pasta")]), ([_t("sushi")], []), ([], [])]
    assert macro_f1(pairs) == pytest.approx(2 / 3)
    assert macro_f1([]) == 0.0


def test_evaluate_pools_counts():
    gold = {"a": frozenset({_t("pasta")}), "b": frozenset({_t("sushi"), _t("staff")})}
    predictions = [_prediction("a", [_t("pasta")]), _prediction("b", [_t("sushi"), _t("decor")])]
    result = evaluate(predictions, gold, {"seed": 1})
    assert (result.true_positives, result.false_positives, result.false_negatives) == (2, 1, 1)
    assert result.micro_f1 == pytest.approx(2 / 3)
    assert result.macro_f1 == pytest.approx((1.0 + 0.5) / 2)
    assert [s.id for s in result.per_instance] == ["a", "b"]
    assert result.metadata == {"seed": 1}
    assert result.n_aborted == 0


def test_evaluate_missing_prediction_counts_as_empty():
    gold = {"a": frozenset({_t("pasta")}), "b": frozenset({_t("sushi")})}
    result = evaluate([_prediction("a", [_t("pasta")])], gold)
    assert result.false_negatives == 1
    assert result.per_instance[1].error == "missing prediction"
    assert result.n_aborted == 1


def test_evaluate_unknown_instance():
    with pytest.raises(EvaluationError):
        evaluate([_prediction("zzz", [])], {"a": frozenset()})


# ------------------------------
#  RUN DIRECTORIES
# ------------------------------

def test_report_over_seeds(tmp_path, gold_file):
    run_dir = _write_run(tmp_path / "run", {
        1: [_prediction("a", [_t("pasta")]),
            _prediction("b", [_t("sushi", "negative"), _t("staff", "negative", "service#general")])],
        2: [_prediction("a", [_t("pasta")]), _prediction("b", [])],
    })
    result = report(run_dir, gold_file)
    assert sorted(result.seeds) == ["1", "2"]
    assert result.seeds["1"].micro_f1 == 1.0
    assert result.seeds["2"].micro_precision == 1.0
    assert result.seeds["2"].micro_recall == pytest.approx(1 / 3)
    assert result.mean["micro_f1"] == pytest.approx((1.0 + 0.5) / 2)
    assert result.metadata["task"] == "TASD"

    saved = json.loads((run_dir / "report.json").read_text())
    assert saved["seeds"]["2"]["false_negatives"] == 2
    table = (run_dir / "report.txt").read_text()
    assert table.splitlines()[0].startswith("task=TASD dataset=synthetic strategy=single_order")
    assert "100.00" in table.splitlines()[2]
    assert table.splitlines()[-1].startswith("mean")


def test_format_table_scales_scores(tmp_path, gold_file):
    run_dir = _write_run(tmp_path / "run", {7: [_prediction("a", [_t("pasta")])]})
    lines = format_table(report(run_dir, gold_file)).splitlines()
    assert lines[2].split() == ["7", "100.00", "33.33", "50.00", "50.00"]


def test_report_needs_predictions(tmp_path, gold_file):
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    (run_dir / "config.json").write_text(json.dumps({"task": "TASD"}))
    with pytest.raises(EvaluationError):
        report(run_dir, gold_file)


def test_report_missing_gold(tmp_path):
    run_dir = _write_run(tmp_path / "run", {1: [_prediction("a", [])]})
    with pytest.raises(EvaluationError):
        report(run_dir, tmp_path / "missing.jsonl")


def test_report_unlabelled_gold(tmp_path):
    gold = write_instances(tmp_path / "gold.jsonl", [Instance(id="a", text="The pasta is fresh .")])
    run_dir = _write_run(tmp_path / "run", {1: [_prediction("a", [])]})
    with pytest.raises(EvaluationError):
        report(run_dir, gold)


def test_load_predictions_errors(tmp_path):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("\n")
    with pytest.raises(EvaluationError):
        load_predictions(empty)
    broken = tmp_path / "broken.jsonl"
    broken.write_text('{"id": "a"}\n')
    with pytest.raises(EvaluationError):
        load_predictions(broken)
    with pytest.raises(EvaluationError):
        load_predictions(tmp_path / "absent.jsonl")


def test_resolve_task(tmp_path):
    run_dir = _write_run(tmp_path / "run", {}, task="ASQP")
    assert resolve_task(run_dir) == Task.of("ASQP")
    assert resolve_task(run_dir, Task.of("TASD")) == Task.of("TASD")
    with pytest.raises(EvaluationError):
        resolve_task(tmp_path)
