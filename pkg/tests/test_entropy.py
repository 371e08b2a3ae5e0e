import math

import numpy as np
import pytest

from app.core.errors import EmptyGenerationError, InvalidDistributionError
from app.helpers.entropy_helper import entropy, mean_confidence, mean_entropy
from app.services.backend_service import GenerationRecord, TokenDistribution


def test_random_distributions_match_direct_formula():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        size = int(rng.integers(1, 50))
        p = rng.random(size)
        p[rng.random(size) < 0.2] = 0.0
        if p.sum() == 0:
            p[0] = 1.0
        p = p / p.sum()
        dist = {i: float(v) for i, v in enumerate(p)}
        expected = -sum(v * math.log(v) for v in p if v > 0)
        assert abs(entropy(dist) - expected) < 1e-9


def test_one_hot_and_uniform():
    assert entropy({7: 1.0}) == 0.0
    assert entropy({0: 1.0, 1: 0.0, 2: 0.0}) == 0.0
    n = 4096
    assert entropy({i: 1.0 / n for i in range(n)}) == pytest.approx(math.log(n), abs=1e-9)


def test_base_two():
    assert entropy({0: 0.5, 1: 0.5}, base=2) == pytest.approx(1.0)


def test_truncated_support_is_renormalized():
    assert entropy({0: 0.25, 1: 0.25}) == pytest.approx(math.log(2))
    assert entropy(TokenDistribution({0: 0.3, 1: 0.3}, coverage=0.6)) == pytest.approx(math.log(2))


def test_ranking_is_base_independent():
    rng = np.random.default_rng(1)
    dists = []
    for _ in range(50):
        p = rng.random(10)
        dists.append({i: float(v) for i, v in enumerate(p / p.sum())})
    by_nats = sorted(range(len(dists)), key=lambda i: entropy(dists[i]))
    by_bits = sorted(range(len(dists)), key=lambda i: entropy(dists[i], base=2))
    assert by_nats == by_bits


@pytest.mark.parametrize("dist", [{}, {0: 0.0}, {0: -0.1, 1: 1.1}, {0: float("nan")}])
def test_invalid_distributions(dist):
    with pytest.raises(InvalidDistributionError):
        entropy(dist)


def test_token_distribution_validation():
    with pytest.raises(InvalidDistributionError):
        TokenDistribution({0: 0.7, 1: 0.7})
    with pytest.raises(InvalidDistributionError):
        TokenDistribution({0: 0.5}, coverage=1.5)


def test_record_means():
    dists = [TokenDistribution({0: 1.0}), TokenDistribution({0: 0.5, 1: 0.5})]
    record = GenerationRecord.from_steps([0, 1], ["a", "b"], "ab", dists, [1.0, 0.5])
    assert record.per_token_entropy == (0.0, pytest.approx(math.log(2)))
    assert mean_entropy(record) == pytest.approx(math.log(2) / 2)
    assert record.mean_entropy == pytest.approx(math.log(2) / 2)
    assert mean_confidence(record) == pytest.approx(0.75)


def test_empty_generation():
    with pytest.raises(EmptyGenerationError):
        GenerationRecord.from_steps([], [], "", [], [])
