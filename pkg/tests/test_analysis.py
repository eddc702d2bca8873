import math

import numpy as np
import pytest
import scipy.spatial.distance
import scipy.stats

from ropelab.analysis import (
    DistanceDistribution,
    aggregate_distance_distribution,
    attention_entropy,
    entropy,
    generation_entropy,
    js_divergence,
)
from ropelab.attention import AttentionRecord, last_row_distribution
from ropelab.model import ModelConfig, forward, generate, init_model, zero_model
from ropelab.rope import Rope, RopeConfig


def tiny_config(**overrides):
    defaults = dict(
        vocab_size=13,
        layer_count=2,
        head_count=2,
        head_dim=8,
        mlp_ratio=2,
        train_context_length=16,
        variant=Rope(RopeConfig(head_dim=8)),
        seed=5,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


def triangular_record(n, fill, layers=1, heads=1):
    """Record whose every attendable entry equals `fill` (causal, not
    row-normalized; the aggregation only requires causality)."""
    w = np.tril(np.full((n, n), fill))
    weights = np.broadcast_to(w, (layers, heads, n, n)).copy()
    return AttentionRecord(weights=weights, outputs=np.zeros((layers, heads, n, 0)))


def uniform_row_record(n):
    """Row-stochastic record with equal logits: row i uniform over i+1 slots."""
    w = np.tril(np.ones((n, n))) / np.arange(1, n + 1)[:, None]
    return AttentionRecord(weights=w[None, None], outputs=np.zeros((1, 1, n, 0)))


class TestEntropy:
    def test_one_hot_is_zero(self):
        assert entropy([0.0, 1.0, 0.0]) == 0.0

    def test_uniform_four(self):
        assert entropy([0.25] * 4) == pytest.approx(math.log(4), abs=1e-12)

    def test_hand_computed_mixture(self):
        assert entropy([0.5, 0.25, 0.25]) == pytest.approx(1.0397207708399179, abs=1e-12)

    def test_uniform_matches_log_n_up_to_64(self):
        for n in range(2, 65):
            assert entropy(np.full(n, 1.0 / n)) == pytest.approx(math.log(n), abs=1e-6)

    def test_matches_scipy_on_random_distributions(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            p = rng.dirichlet(np.ones(int(rng.integers(2, 20))))
            assert entropy(p) == pytest.approx(scipy.stats.entropy(p), abs=1e-9)

    def test_negative_entry_rejected(self):
        with pytest.raises(ValueError):
            entropy([-0.1, 1.1])

    def test_bad_normalization_rejected(self):
        with pytest.raises(ValueError):
            entropy([0.5, 0.6])

    def test_bounds_on_attention_rows(self):
        model = init_model(tiny_config())
        rng = np.random.default_rng(1)
        tokens = rng.integers(0, 13, size=9)
        _, record = forward(model, tokens)
        for l in range(record.layer_count):
            for h in range(record.head_count):
                e = entropy(last_row_distribution(record, l, h))
                assert 0.0 <= e <= math.log(record.sequence_length) + 1e-12


class TestAttentionEntropy:
    def test_single_token_context_is_zero(self):
        model = zero_model(tiny_config())
        report = attention_entropy(model, [1], max_new_tokens=1)
        assert report.per_step[0] == 0.0
        assert report.context_lengths == [1]

    def test_uniform_attention_gives_log_context(self):
        model = zero_model(tiny_config())
        for n in (4, 8, 12):
            report = attention_entropy(model, list(range(1, n + 1)), max_new_tokens=1)
            assert report.per_step[0] == pytest.approx(math.log(n), abs=1e-6)

    def test_matches_loop_oracle(self):
        model = init_model(tiny_config(seed=9))
        prompt = np.arange(1, 9) % 13
        report = attention_entropy(model, prompt, max_new_tokens=4)

        _, records = generate(model, prompt, 4, greedy=True)
        per_step = []
        for rec in records:
            values = []
            for l in range(rec.layer_count):
                for h in range(rec.head_count):
                    row = rec.weights[l, h, -1]
                    acc = 0.0
                    for p in row:
                        if p > 1e-12:
                            acc -= p * math.log(p)
                    values.append(acc)
            per_step.append(sum(values) / len(values))
        np.testing.assert_allclose(report.per_step, per_step, atol=1e-9)
        assert report.mean == pytest.approx(sum(per_step) / len(per_step), abs=1e-9)

    def test_empty_generation_rejected(self):
        model = zero_model(tiny_config())
        with pytest.raises(ValueError):
            attention_entropy(model, [1, 2], max_new_tokens=0)

    def test_per_layer_head_matrix(self):
        model = init_model(tiny_config())
        report = attention_entropy(model, [1, 2, 3], max_new_tokens=2)
        assert report.per_layer_head.shape == (2, 2)
        assert report.mean == pytest.approx(float(report.per_layer_head.mean()), abs=1e-9)


class TestAggregateDistanceDistribution:
    def test_single_token_record(self):
        dist = aggregate_distance_distribution([triangular_record(1, 1.0)])
        np.testing.assert_allclose(dist.mass, [1.0])

    def test_flat_triangle_weighted_by_prefix_counts(self):
        # Every attendable pair carries 1/3: three distance-0 slots, two at
        # distance 1, one at distance 2, normalizing to [1/2, 1/3, 1/6].
        dist = aggregate_distance_distribution([triangular_record(3, 1.0 / 3.0)])
        np.testing.assert_allclose(dist.mass, [0.5, 1 / 3, 1 / 6], atol=1e-12)

    def test_equal_logit_rows_loop_oracle(self):
        rec = uniform_row_record(3)
        acc = [0.0, 0.0, 0.0]
        for i in range(3):
            for j in range(i + 1):
                acc[i - j] += rec.weights[0, 0, i, j]
        expected = np.array(acc) / sum(acc)
        dist = aggregate_distance_distribution([rec])
        np.testing.assert_allclose(dist.mass, expected, atol=1e-12)
        np.testing.assert_allclose(dist.mass, [11 / 18, 5 / 18, 2 / 18], atol=1e-12)

    def test_duplicate_records_idempotent(self):
        rec = uniform_row_record(5)
        one = aggregate_distance_distribution([rec])
        two = aggregate_distance_distribution([rec, rec])
        np.testing.assert_allclose(one.mass, two.mass, atol=1e-12)
        assert two.sample_count == 2 * one.sample_count

    def test_split_halves_average_with_sample_weights(self):
        rng = np.random.default_rng(2)
        model = init_model(tiny_config(seed=3))
        records = []
        for _ in range(4):
            tokens = rng.integers(0, 13, size=int(rng.integers(3, 10)))
            _, rec = forward(model, tokens)
            records.append(rec)
        whole = aggregate_distance_distribution(records)
        first = aggregate_distance_distribution(records[:2])
        second = aggregate_distance_distribution(records[2:])
        size = whole.mass.size
        merged = (
            first.sample_count * np.pad(first.mass, (0, size - first.mass.size))
            + second.sample_count * np.pad(second.mass, (0, size - second.mass.size))
        ) / (first.sample_count + second.sample_count)
        np.testing.assert_allclose(whole.mass, merged, atol=1e-9)

    def test_bucketing(self):
        dist = aggregate_distance_distribution([uniform_row_record(4)], bucket_width=2)
        fine = aggregate_distance_distribution([uniform_row_record(4)])
        np.testing.assert_allclose(
            dist.mass, [fine.mass[0] + fine.mass[1], fine.mass[2] + fine.mass[3]], atol=1e-12
        )

    def test_absolute_position_axis(self):
        rec = uniform_row_record(3)
        dist = aggregate_distance_distribution([rec], by_absolute_position=True)
        expected = rec.weights[0, 0].sum(axis=0)
        np.testing.assert_allclose(dist.mass, expected / expected.sum(), atol=1e-12)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            aggregate_distance_distribution([])

    def test_non_causal_rejected(self):
        w = np.full((1, 1, 2, 2), 0.5)
        rec = AttentionRecord(weights=w, outputs=np.zeros((1, 1, 2, 0)))
        with pytest.raises(ValueError):
            aggregate_distance_distribution([rec])


class TestJsDivergence:
    def test_identical_is_zero(self):
        p = np.array([0.2, 0.3, 0.5])
        assert js_divergence(p, p) == 0.0

    def test_disjoint_support_is_ln2(self):
        assert js_divergence([1.0, 0.0], [0.0, 1.0]) == pytest.approx(math.log(2), abs=1e-12)

    def test_hand_value(self):
        # Oracle: scipy.spatial.distance.jensenshannon squared, natural log.
        expected = scipy.spatial.distance.jensenshannon([0.5, 0.5], [1.0, 0.0], base=math.e) ** 2
        got = js_divergence([0.5, 0.5], [1.0, 0.0])
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.21576155433883565, abs=1e-12)

    def test_symmetry_and_bounds_random_pairs(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            size = int(rng.integers(2, 24))
            p = rng.dirichlet(np.ones(size))
            q = rng.dirichlet(np.ones(size))
            forwardv = js_divergence(p, q)
            assert abs(forwardv - js_divergence(q, p)) < 1e-12
            assert -1e-15 <= forwardv <= math.log(2) + 1e-12
            assert js_divergence(p, p) == 0.0

    def test_matches_scipy_on_random_pairs(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            p = rng.dirichlet(np.ones(8))
            q = rng.dirichlet(np.ones(8))
            expected = scipy.spatial.distance.jensenshannon(p, q, base=math.e) ** 2
            assert js_divergence(p, q) == pytest.approx(expected, abs=1e-10)

    def test_shorter_distribution_zero_padded(self):
        long = DistanceDistribution(mass=np.array([0.5, 0.25, 0.25]), bucket_width=1, sample_count=1)
        short = DistanceDistribution(mass=np.array([0.5, 0.5]), bucket_width=1, sample_count=1)
        direct = js_divergence(np.array([0.5, 0.25, 0.25]), np.array([0.5, 0.5, 0.0]))
        assert js_divergence(long, short) == pytest.approx(direct, abs=1e-15)

    def test_bucket_width_mismatch_rejected(self):
        a = DistanceDistribution(mass=np.array([1.0]), bucket_width=1, sample_count=1)
        b = DistanceDistribution(mass=np.array([1.0]), bucket_width=2, sample_count=1)
        with pytest.raises(ValueError):
            js_divergence(a, b)

    def test_mixed_types_rejected(self):
        a = DistanceDistribution(mass=np.array([1.0]), bucket_width=1, sample_count=1)
        with pytest.raises(ValueError):
            js_divergence(a, [1.0])


def test_generation_entropy_rejects_empty():
    with pytest.raises(ValueError):
        generation_entropy([])
