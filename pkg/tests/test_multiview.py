import itertools
import json
import random

import pytest

from app.core.errors import ConfigError, TransportError
from app.core.schemas import CategorySet, SentimentTuple, Strategy, ViewSelectionConfig
from app.helpers.permutation_helper import all_permutations, default_permutation
from app.services.eval_service import evaluate
from app.services.multiview_service import (
    AggregatedPrediction,
    MultiViewEngine,
    ViewPrediction,
    aggregate,
    majority_vote,
    prediction_from_json,
    prediction_to_json,
    sample_seeds,
    select_top_m,
    sweep_m,
)
from app.services.oracle_backend import NoiseSpec, OracleBackend, OracleNoise
from app.services.prompt_service import PromptTemplate
from app.services.run_service import run_vocabulary
from app.services.scheduler import BatchScheduler
from tests.conftest import CATEGORIES, make_engine, make_instances

PASTA = SentimentTuple(aspect_term="pasta", aspect_category="food#quality", polarity="positive")
STAFF = SentimentTuple(aspect_term="staff", aspect_category="service#general", polarity="negative")


def _view(permutation_id: str, tuples=(), entropy: float = 0.0, confidence: float = 1.0,
          view_id: str = "") -> ViewPrediction:
    return ViewPrediction(view_id=view_id or permutation_id, permutation_id=permutation_id,
                          tuples=frozenset(tuples), mean_entropy=entropy, mean_confidence=confidence, text="")


def _gold(instances):
    return {i.id: frozenset(i.gold) for i in instances}


def _f1(predictions, instances) -> float:
    return evaluate(predictions, _gold(instances)).micro_f1


# ------------------------------
#  SELECTION / VOTING
# ------------------------------

def test_select_top_m_by_entropy(tasd):
    ids = [p.id for p in all_permutations(tasd)]
    views = [_view(pid, entropy=e) for pid, e in zip(ids, [0.5, 0.1, 0.9, 0.3, 0.2, 0.7])]
    assert [v.view_id for v in select_top_m(views, 3)] == [ids[1], ids[4], ids[3]]


def test_select_top_m_ties_follow_canonical_order(tasd):
    ids = [p.id for p in all_permutations(tasd)]
    views = [_view(pid) for pid in ids]
    random.Random(3).shuffle(views)
    assert [v.view_id for v in select_top_m(views, 4)] == ids[:4]


@pytest.mark.parametrize("m", [0, 7])
def test_select_top_m_out_of_range(tasd, m):
    views = [_view(p.id) for p in all_permutations(tasd)]
    with pytest.raises(ConfigError):
        select_top_m(views, m)


@pytest.mark.parametrize("m", range(1, 8))
def test_majority_vote_needs_more_than_half(m):
    for pattern in itertools.product((False, True), repeat=m):
        views = [_view(f"v{i}", (PASTA,) if has else ()) for i, has in enumerate(pattern)]
        expected = frozenset({PASTA}) if 2 * sum(pattern) > m else frozenset()
        assert majority_vote(views) == expected


def test_aggregate_counts_only_selected_views(tasd):
    ids = [p.id for p in all_permutations(tasd)]
    views = [
        _view(ids[0], (PASTA, STAFF), 0.1),
        _view(ids[1], (PASTA,), 0.2),
        _view(ids[2], (PASTA, STAFF), 0.3),
        _view(ids[3], (STAFF,), 0.9),
        _view(ids[4], (STAFF,), 0.9),
        _view(ids[5], (STAFF,), 0.9),
    ]
    prediction = aggregate("x", views, 3, Strategy.MVP)
    assert prediction.tuples == frozenset({PASTA, STAFF})
    assert prediction.vote_counts == {PASTA: 3, STAFF: 2}
    assert len(prediction.views) == 6 and len(prediction.selected_views) == 3

    everything = aggregate("x", views, 6, Strategy.MVP)
    assert everything.tuples == frozenset({STAFF})


def test_empty_views_vote_empty(tasd):
    views = [_view(p.id) for p in all_permutations(tasd)]
    assert aggregate("x", views, 5, Strategy.MVP).tuples == frozenset()


def test_sample_seeds():
    assert sample_seeds(3, 5) == [3000, 3001, 3002, 3003, 3004]


# ------------------------------
#  STRATEGIES ON THE ORACLE
# ------------------------------

def test_noiseless_mvp_recovers_gold(asqp):
    instances = make_instances(4, asqp, seed=1)
    engine = make_engine(instances, asqp)
    predictions, routing = engine.run(instances)
    assert routing is None
    assert [p.instance_id for p in predictions] == [i.id for i in instances]
    for prediction, instance in zip(predictions, instances):
        assert prediction.tuples == frozenset(instance.gold)
        assert len(prediction.views) == 24 and prediction.m == 17
        assert all(v.mean_entropy == 0.0 for v in prediction.views)
    assert _f1(predictions, instances) == 1.0


def test_high_entropy_corruption_is_voted_out(asqp):
    instances = make_instances(3, asqp, seed=2)
    corrupted_ids = [p.id for p in all_permutations(asqp)[-7:]]
    corrupt = NoiseSpec(corrupt_prob=1.0, kind="flip", spread_clean=0.0, spread_corrupt=0.3)
    noise = OracleNoise(permutations={pid: corrupt for pid in corrupted_ids})
    predictions = make_engine(instances, asqp, noise=noise).run_mvp(instances)
    for prediction in predictions:
        selected = {v.permutation_id for v in prediction.selected_views}
        assert selected.isdisjoint(corrupted_ids)
        assert all(v.mean_entropy > 0 for v in prediction.views if v.permutation_id in corrupted_ids)
    assert _f1(predictions, instances) == 1.0


def test_low_entropy_corruption_breaks_the_vote(asqp):
    instances = make_instances(3, asqp, seed=3, max_tuples=1)
    corrupted_ids = [p.id for p in all_permutations(asqp)[:9]]
    corrupt = NoiseSpec(corrupt_prob=1.0, kind="flip", spread_clean=0.0, spread_corrupt=0.05)
    uncertain = NoiseSpec(corrupt_prob=0.0, spread_clean=0.3, spread_corrupt=0.4)
    noise = OracleNoise(default=uncertain, permutations={pid: corrupt for pid in corrupted_ids})
    predictions = make_engine(instances, asqp, noise=noise).run_mvp(instances)
    for prediction, instance in zip(predictions, instances):
        assert set(corrupted_ids) <= {v.permutation_id for v in prediction.selected_views}
        assert prediction.vote_counts.get(instance.gold[0], 0) == 8
        assert instance.gold[0] not in prediction.tuples
    assert _f1(predictions, instances) == 0.0


def test_mvp_beats_single_order_under_noise(tasd):
    instances = make_instances(100, tasd, seed=4, max_tuples=1)
    noise = NoiseSpec(corrupt_prob=0.3, kind="flip", spread_clean=0.0, spread_corrupt=0.3)
    single = make_engine(instances, tasd, noise=noise, oracle_seed=11).run_single_order(instances)
    mvp = make_engine(instances, tasd, noise=noise, oracle_seed=11).run_mvp(instances)
    single_f1 = _f1(single, instances)
    mvp_f1 = _f1(mvp, instances)
    assert mvp_f1 > single_f1
    assert mvp_f1 > 0.85


@pytest.mark.slow
def test_mvp_beats_single_order_across_seeded_trials(tasd):
    noise = NoiseSpec(corrupt_prob=0.3, kind="flip", spread_clean=0.0, spread_corrupt=0.3)
    wins = 0
    for trial in range(20):
        instances = make_instances(50, tasd, seed=100 + trial, max_tuples=1)
        single = make_engine(instances, tasd, noise=noise, oracle_seed=trial).run_single_order(instances)
        mvp = make_engine(instances, tasd, noise=noise, oracle_seed=trial).run_mvp(instances)
        wins += _f1(mvp, instances) > _f1(single, instances)
    assert wins >= 18


def test_single_order_uses_natural_order(tasd):
    instances = make_instances(3, tasd, seed=5)
    predictions = make_engine(instances, tasd).run_single_order(instances)
    for prediction, instance in zip(predictions, instances):
        assert prediction.strategy == Strategy.SINGLE_ORDER
        assert prediction.m == 1
        assert [v.view_id for v in prediction.views] == [default_permutation(tasd).id]
        assert prediction.tuples == frozenset(instance.gold)


def test_self_consistency_samples(tasd):
    instances = make_instances(2, tasd, seed=6)
    engine = make_engine(instances, tasd, seed=3, strategy="self_consistency")
    predictions, _ = engine.run(instances)
    natural = default_permutation(tasd).id
    assert sorted(engine.scheduler.completed) == sorted(
        f"{i.id}|{natural}|s{s}" for i in instances for s in (3000, 3001, 3002, 3003, 3004)
    )
    for prediction, instance in zip(predictions, instances):
        assert prediction.strategy == Strategy.SELF_CONSISTENCY
        assert prediction.m == 5
        assert [v.view_id for v in prediction.views] == [f"{natural}#{j}" for j in range(5)]
        assert prediction.tuples == frozenset(instance.gold)


def test_m_larger_than_views_is_rejected(tasd):
    instances = make_instances(1, tasd)
    with pytest.raises(ConfigError):
        make_engine(instances, tasd, m=7).run_mvp(instances)


def test_runs_are_deterministic(tasd):
    instances = make_instances(6, tasd, seed=7)
    noise = NoiseSpec(corrupt_prob=0.4, kind="drop", spread_clean=0.1, spread_corrupt=0.3)
    first = make_engine(instances, tasd, noise=noise, oracle_seed=5).run_mvp(instances)
    second = make_engine(instances, tasd, noise=noise, oracle_seed=5, grouping=False).run_mvp(instances)
    assert [json.dumps(prediction_to_json(p), sort_keys=True) for p in first] == \
        [json.dumps(prediction_to_json(p), sort_keys=True) for p in second]


# ------------------------------
#  CONFIDENCE ROUTING
# ------------------------------

def _single(instance_id: str, confidence: float) -> AggregatedPrediction:
    view = _view("at-ac-p", confidence=confidence)
    return aggregate(instance_id, [view], 1, Strategy.SINGLE_ORDER)


def test_route_escalates_least_confident_quantile(tasd):
    engine = make_engine(make_instances(1, tasd), tasd)
    rng = random.Random(8)
    single = [_single(f"i{n:03d}", rng.random()) for n in range(400)]
    routing = engine.route(single, 0.25)
    assert len(routing.escalated) == 100
    threshold = max(routing.confidences[i] for i in routing.escalated)
    rest = set(routing.confidences) - set(routing.escalated)
    assert all(routing.confidences[i] >= threshold for i in rest)
    assert routing.to_json()["n_escalated"] == 100


def test_route_breaks_ties_by_id(tasd):
    engine = make_engine(make_instances(1, tasd), tasd)
    single = [_single(i, 0.5) for i in ("c", "a", "d", "b")]
    assert engine.route(single, 0.5).escalated == ("a", "b")
    assert engine.route(single, 0.0).escalated == ()


def test_mvp_eff_escalates_low_confidence(tasd):
    instances = make_instances(12, tasd, seed=9)
    natural = default_permutation(tasd).id
    unsure = NoiseSpec(spread_clean=0.3, spread_corrupt=0.4)
    noise = OracleNoise(views={f"{i.id}|{natural}": unsure for i in instances[:3]})
    engine = make_engine(instances, tasd, noise=noise, strategy="mvp_eff", eff_quantile=0.25)
    predictions, routing = engine.run(instances)
    assert set(routing.escalated) == {i.id for i in instances[:3]}
    assert [p.instance_id for p in predictions] == [i.id for i in instances]
    for prediction in predictions:
        escalated = prediction.instance_id in routing.escalated
        assert prediction.strategy == (Strategy.MVP if escalated else Strategy.SINGLE_ORDER)
        assert len(prediction.views) == (6 if escalated else 1)
    assert _f1(predictions, instances) == 1.0


def test_mvp_eff_full_quantile_matches_mvp(tasd):
    instances = make_instances(5, tasd, seed=10)
    noise = NoiseSpec(corrupt_prob=0.3, kind="flip", spread_clean=0.05, spread_corrupt=0.3)
    eff = make_engine(instances, tasd, noise=noise, eff_quantile=1.0).run_mvp_eff(instances)
    mvp = make_engine(instances, tasd, noise=noise).run_mvp(instances)
    assert [json.dumps(prediction_to_json(p), sort_keys=True) for p in eff] == \
        [json.dumps(prediction_to_json(p), sort_keys=True) for p in mvp]


def test_mvp_eff_zero_quantile_matches_single_order(tasd):
    instances = make_instances(5, tasd, seed=10)
    noise = NoiseSpec(corrupt_prob=0.3, kind="flip", spread_clean=0.05, spread_corrupt=0.3)
    eff = make_engine(instances, tasd, noise=noise, eff_quantile=0.0).run_mvp_eff(instances)
    single = make_engine(instances, tasd, noise=noise).run_single_order(instances)
    assert [prediction_to_json(p) for p in eff] == [prediction_to_json(p) for p in single]


# ------------------------------
#  UNCONSTRAINED DECODING
# ------------------------------

def test_unguided_decoding_drops_malformed_tuples(tasd):
    instances = make_instances(4, tasd, seed=12, max_tuples=1)
    noise = NoiseSpec(corrupt_prob=1.0, kind="malformed", spread_clean=0.0, spread_corrupt=0.2)

    guided = make_engine(instances, tasd, noise=noise).run_single_order(instances)
    assert _f1(guided, instances) == 1.0

    free = make_engine(instances, tasd, noise=noise, guided=False).run_single_order(instances)
    for prediction in free:
        assert prediction.error is None
        assert prediction.tuples == frozenset()
        assert prediction.views[0].text.endswith(")]")


def test_unguided_clean_output_parses(tasd):
    instances = make_instances(3, tasd, seed=13)
    predictions = make_engine(instances, tasd, guided=False).run_mvp(instances)
    assert _f1(predictions, instances) == 1.0
    assert all(r.schema is None for r in make_engine(instances, tasd, guided=False)
               .build_requests(instances, default_permutation(tasd)))


# ------------------------------
#  SWEEP / PERSISTENCE / SALVAGE
# ------------------------------

def test_sweep_m_reuses_views(tasd):
    instances = make_instances(8, tasd, seed=14, max_tuples=1)
    noise = NoiseSpec(corrupt_prob=0.3, kind="flip", spread_clean=0.0, spread_corrupt=0.3)
    predictions = make_engine(instances, tasd, noise=noise, m=5).run_mvp(instances)
    views = {p.instance_id: p.views for p in predictions}
    swept = sweep_m(views, [1, 3, 5])
    assert sorted(swept) == [1, 3, 5]
    assert [p.tuples for p in swept[5]] == [p.tuples for p in sorted(predictions, key=lambda p: p.instance_id)]
    assert all(p.m == 1 and len(p.selected_views) == 1 for p in swept[1])
    with pytest.raises(ConfigError):
        sweep_m(views, [7])


def test_prediction_json_round_trip(asqp, wine_instance):
    engine = make_engine([wine_instance], asqp, m=3)
    prediction = engine.run_mvp([wine_instance])[0]
    data = json.loads(json.dumps(prediction_to_json(prediction), sort_keys=True))
    assert data["tuples"] == [t.to_json() for t in sorted(wine_instance.gold, key=lambda t: t.sort_key())]
    assert len(data["views"]) == 24 and len(data["selected"]) == 3

    restored = prediction_from_json(data)
    assert restored.tuples == prediction.tuples
    assert restored.vote_counts == prediction.vote_counts
    assert [v.view_id for v in restored.selected_views] == [v.view_id for v in prediction.selected_views]
    assert all(v.record is None for v in restored.views)


class FlakyOracle(OracleBackend):
    def __init__(self, fail_on: str, error: BaseException, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.fail_on = fail_on
        self.error = error

    def generate(self, request):
        if request.instance_id == self.fail_on:
            raise self.error
        return super().generate(request)


def _flaky_engine(task, instances, error, strategy="mvp") -> MultiViewEngine:
    categories = CategorySet(categories=CATEGORIES)
    vocab = run_vocabulary(categories, instances)
    backend = FlakyOracle("x0002", error, {i.id: i.gold for i in instances}, OracleNoise(), vocabulary=vocab)
    scheduler = BatchScheduler(backend, tokenizer=vocab, max_in_flight=1)
    return MultiViewEngine(task, categories, PromptTemplate.load(), scheduler,
                           selection=ViewSelectionConfig(strategy=strategy))


def test_failed_view_aborts_only_its_instance(tasd):
    instances = make_instances(4, tasd, seed=15)
    engine = _flaky_engine(tasd, instances, TransportError("connection reset"))
    predictions, _ = engine.run(instances)
    assert [p.instance_id for p in predictions] == [i.id for i in instances]
    aborted = predictions[2]
    assert aborted.error == "6 view(s) failed: connection reset"
    assert aborted.tuples == frozenset() and aborted.views == ()
    for prediction, instance in zip(predictions, instances):
        if prediction is not aborted:
            assert prediction.error is None
            assert prediction.tuples == frozenset(instance.gold)
    assert len(engine.scheduler.failures) == 6


def test_unknown_instance_aborts_without_stopping_the_batch(tasd):
    instances = make_instances(3, tasd, seed=16)
    engine = make_engine(instances[:2], tasd)
    predictions = engine.run_mvp(instances)
    assert [p.error for p in predictions[:2]] == [None, None]
    assert [p.tuples for p in predictions[:2]] == [frozenset(i.gold) for i in instances[:2]]
    assert "no gold for instance 'x0002'" in predictions[2].error


def test_salvage_keeps_completed_instances(tasd):
    instances = make_instances(4, tasd, seed=15)
    engine = _flaky_engine(tasd, instances, KeyboardInterrupt(), strategy="single_order")
    with pytest.raises(KeyboardInterrupt):
        engine.run(instances)
    salvaged = engine.salvage()
    assert sorted(p.instance_id for p in salvaged) == ["x0000", "x0001"]
    assert all(p.tuples == frozenset(instances[int(p.instance_id[1:])].gold) for p in salvaged)


@pytest.mark.slow
def test_mvp_eff_escalates_a_quarter_of_a_large_run(tasd):
    instances = make_instances(400, tasd, seed=31, max_tuples=1)
    noise = NoiseSpec(corrupt_prob=0.2, kind="flip", spread_clean=0.05, spread_corrupt=0.3)
    engine = make_engine(instances, tasd, noise=noise, oracle_seed=3, eff_quantile=0.25)
    predictions, routing = engine.run_mvp_eff_with_routing(instances)
    assert len(routing.escalated) == 100
    assert [p.instance_id for p in predictions] == [i.id for i in instances]
    threshold = max(routing.confidences[i] for i in routing.escalated)
    assert all(c >= threshold for i, c in routing.confidences.items() if i not in routing.escalated)
    escalated = set(routing.escalated)
    for prediction in predictions:
        assert len(prediction.views) == (6 if prediction.instance_id in escalated else 1)
    single = make_engine(instances, tasd, noise=noise, oracle_seed=3).run_single_order(instances)
    assert _f1(predictions, instances) > _f1(single, instances)
