import pytest
from pydantic import ValidationError

from app.core.errors import ConfigError, InsufficientPoolError
from app.core.schemas import ElementKind, Instance, Permutation, SentimentTuple, ShotConfig, Task
from app.helpers.permutation_helper import (
    all_permutations,
    default_permutation,
    permutation_from_id,
    sample_shots,
    shot_sample_id,
)


def _pool(n: int) -> tuple[Instance, ...]:
    gold = (SentimentTuple(aspect_term="food", aspect_category="food#quality", polarity="positive"),)
    return tuple(Instance(id=f"p{i}", text=f"food number {i}", gold=gold) for i in range(n))


def test_task_elements():
    assert Task.of("tasd").arity == 3
    assert Task.of("ASQP").elements == (
        ElementKind.ASPECT_TERM, ElementKind.ASPECT_CATEGORY, ElementKind.OPINION_TERM, ElementKind.POLARITY,
    )


def test_permutation_counts_and_order():
    asqp = all_permutations(Task.of("ASQP"))
    assert len(asqp) == 24
    assert len({p.id for p in asqp}) == 24
    assert asqp[0].id == "ac-at-ot-p"
    assert [p.canonical_key for p in asqp] == sorted(p.canonical_key for p in asqp)
    assert len(all_permutations(Task.of("TASD"))) == 6


def test_default_permutation():
    assert default_permutation(Task.of("ASQP")).id == "at-ac-ot-p"
    assert default_permutation(Task.of("TASD")).id == "at-ac-p"


def test_permutation_must_be_bijection():
    with pytest.raises(ValidationError):
        Permutation(task=Task.of("TASD"), order=(ElementKind.ASPECT_TERM, ElementKind.ASPECT_TERM, ElementKind.POLARITY))
    with pytest.raises(ConfigError):
        permutation_from_id(Task.of("TASD"), "at-ot-p")
    assert permutation_from_id(Task.of("TASD"), "p-at-ac").order[0] == ElementKind.POLARITY


def test_tuple_field_presence():
    tasd, asqp = Task.of("TASD"), Task.of("ASQP")
    triple = SentimentTuple(aspect_term="food", aspect_category="food#quality", polarity="positive")
    quad = SentimentTuple(aspect_term="food", aspect_category="food#quality", opinion_term="tasty", polarity="positive")
    assert triple.fits(tasd) and not triple.fits(asqp)
    assert quad.fits(asqp) and not quad.fits(tasd)
    assert SentimentTuple.from_json(quad.to_json()) == quad


def test_tuple_equality_is_case_sensitive():
    a = SentimentTuple(aspect_term="Food", aspect_category="food#quality", polarity="positive")
    b = SentimentTuple(aspect_term="food", aspect_category="food#quality", polarity="positive")
    assert a != b


def test_zero_shot_is_empty():
    assert sample_shots(ShotConfig(k=0, seed=1, pool=_pool(5)), 0) == []


def test_shot_samples_are_nested():
    pool = _pool(120)
    config = ShotConfig(k=100, seed=3, pool=pool)
    ten = sample_shots(config, 10)
    fifty = sample_shots(config, 50)
    hundred = sample_shots(config, 100)
    assert fifty[:10] == ten
    assert hundred[:50] == fifty
    assert len({s.id for s in hundred}) == 100


def test_shot_samples_depend_on_seed():
    pool = _pool(50)
    assert sample_shots(ShotConfig(k=10, seed=1, pool=pool), 10) == sample_shots(ShotConfig(k=10, seed=1, pool=pool), 10)
    assert sample_shots(ShotConfig(k=10, seed=1, pool=pool), 10) != sample_shots(ShotConfig(k=10, seed=2, pool=pool), 10)


def test_pool_too_small():
    with pytest.raises(InsufficientPoolError):
        ShotConfig(k=10, seed=1, pool=_pool(3))
    with pytest.raises(InsufficientPoolError):
        sample_shots(ShotConfig(k=0, seed=1, pool=_pool(3)), 4)


def test_shot_sample_id():
    assert shot_sample_id(2, 50) == "seed2-k50"
