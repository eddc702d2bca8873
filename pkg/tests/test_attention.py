import io
import math

import numpy as np
import pytest

from ropelab.attention import (
    AttentionInput,
    AttentionRecord,
    attend,
    causal_softmax,
    last_row_distribution,
    read_record_ndjson,
    write_record_ndjson,
)
from ropelab.rope import Ntk, Pi, Rope, RopeConfig, Yarn, logit_scale


def brute_force_attention(q, k, v, positions, variant):
    """Loop oracle: explicit per-pair rotation and per-row softmax."""
    heads, n, d = q.shape
    base_rates = [variant.config.base ** (-2.0 * j / d) for j in range(d // 2)]
    if isinstance(variant, Rope):
        rates, pos_scale = base_rates, 1.0
    elif isinstance(variant, Pi):
        rates, pos_scale = base_rates, 1.0 / variant.alpha
    elif isinstance(variant, Ntk):
        rates = [variant.new_base ** (-2.0 * j / d) for j in range(d // 2)]
        pos_scale = 1.0
    else:
        rates = []
        for j in range(d // 2):
            lam = 2.0 * math.pi / base_rates[j]
            w = min(1.0, max(0.0, (variant.ramp_high - lam) / (variant.ramp_high - variant.ramp_low)))
            rates.append((1.0 - w) * base_rates[j] / variant.alpha + w * base_rates[j])
        pos_scale = 1.0

    def rot(vec, m):
        out = [0.0] * d
        for j in range(d // 2):
            a = pos_scale * m * rates[j]
            c, s = math.cos(a), math.sin(a)
            out[2 * j] = vec[2 * j] * c - vec[2 * j + 1] * s
            out[2 * j + 1] = vec[2 * j + 1] * c + vec[2 * j] * s
        return out

    scale = logit_scale(variant)
    weights = np.zeros((heads, n, n))
    outputs = np.zeros((heads, n, d))
    for h in range(heads):
        rq = [rot(q[h, i], positions[i]) for i in range(n)]
        rk = [rot(k[h, i], positions[i]) for i in range(n)]
        for i in range(n):
            logits = []
            for j in range(i + 1):
                dot = sum(rq[i][t] * rk[j][t] for t in range(d))
                logits.append(scale * dot / math.sqrt(d))
            top = max(logits)
            exps = [math.exp(x - top) for x in logits]
            total = sum(exps)
            for j in range(i + 1):
                weights[h, i, j] = exps[j] / total
            for t in range(d):
                outputs[h, i, t] = sum(weights[h, i, j] * v[h, j, t] for j in range(i + 1))
    return weights, outputs


def random_input(rng, heads, n, d, scale=1.0):
    return AttentionInput(
        queries=scale * rng.normal(size=(heads, n, d)),
        keys=scale * rng.normal(size=(heads, n, d)),
        values=rng.normal(size=(heads, n, d)),
    )


class TestAttend:
    def test_single_token(self):
        rng = np.random.default_rng(0)
        inp = random_input(rng, 2, 1, 4)
        rec = attend(inp, Rope(RopeConfig(head_dim=4)))
        np.testing.assert_array_equal(rec.weights, np.ones((1, 2, 1, 1)))
        np.testing.assert_allclose(rec.outputs[0], inp.values)

    def test_equal_logits_give_uniform_prefix_rows(self):
        # Zero queries null out every logit regardless of rotation.
        rng = np.random.default_rng(1)
        inp = AttentionInput(
            queries=np.zeros((1, 3, 4)),
            keys=rng.normal(size=(1, 3, 4)),
            values=rng.normal(size=(1, 3, 4)),
        )
        rec = attend(inp, Rope(RopeConfig(head_dim=4)))
        np.testing.assert_allclose(rec.weights[0, 0, 2], [1 / 3, 1 / 3, 1 / 3], atol=1e-12)
        np.testing.assert_allclose(rec.weights[0, 0, 1], [0.5, 0.5, 0.0], atol=1e-12)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        cfg = RopeConfig(head_dim=8)
        variants = [
            Rope(cfg),
            Pi(cfg, alpha=4.0),
            Ntk(cfg, new_base=100000.0),
            Yarn(cfg, alpha=4.0, ramp_low=2.0, ramp_high=64.0, temperature=0.8),
        ]
        for variant in variants:
            inp = random_input(rng, 2, 4, 8)
            rec = attend(inp, variant)
            w, o = brute_force_attention(
                inp.queries, inp.keys, inp.values, inp.positions, variant
            )
            np.testing.assert_allclose(rec.weights[0], w, atol=1e-9)
            np.testing.assert_allclose(rec.outputs[0], o, atol=1e-9)

    def test_head_dim_mismatch(self):
        rng = np.random.default_rng(3)
        inp = random_input(rng, 1, 3, 4)
        with pytest.raises(ValueError):
            attend(inp, Rope(RopeConfig(head_dim=8)))

    def test_non_finite_input_rejected(self):
        q = np.zeros((1, 2, 4))
        q[0, 0, 0] = np.inf
        with pytest.raises(FloatingPointError):
            AttentionInput(queries=q, keys=np.zeros((1, 2, 4)), values=np.zeros((1, 2, 4)))


class TestInvariants:
    def test_rows_stochastic_and_causal(self):
        rng = np.random.default_rng(4)
        cfg = RopeConfig(head_dim=8)
        for _ in range(25):
            n = int(rng.integers(1, 17))
            heads = int(rng.integers(1, 5))
            rec = attend(random_input(rng, heads, n, 8), Rope(cfg))
            np.testing.assert_allclose(rec.weights.sum(axis=-1), 1.0, atol=1e-6)
            assert np.all(rec.weights >= 0.0) and np.all(rec.weights <= 1.0)
            assert np.array_equal(np.triu(rec.weights, k=1), np.zeros_like(rec.weights))

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        cfg = RopeConfig(head_dim=8)
        for variant in (Rope(cfg), Pi(cfg, alpha=4.0), Ntk(cfg, new_base=40000.0)):
            q = rng.normal(size=(2, 6, 8))
            k = rng.normal(size=(2, 6, 8))
            v = rng.normal(size=(2, 6, 8))
            base = attend(AttentionInput(q, k, v), variant)
            shifted = attend(
                AttentionInput(q, k, v, positions=np.arange(6) + 37), variant
            )
            np.testing.assert_allclose(base.weights, shifted.weights, atol=1e-9)

    def test_softmax_stable_at_huge_logits(self):
        rng = np.random.default_rng(6)
        # scale chosen so raw logits reach ~1e4
        inp = random_input(rng, 1, 8, 4, scale=100.0)
        raw = (inp.queries @ inp.keys.swapaxes(-1, -2)) / 2.0
        assert np.abs(raw).max() > 1e3
        rec = attend(inp, Rope(RopeConfig(head_dim=4)))
        assert np.all(np.isfinite(rec.weights))
        np.testing.assert_allclose(rec.weights.sum(axis=-1), 1.0, atol=1e-6)

    def test_neutral_parameters_match_plain(self):
        rng = np.random.default_rng(7)
        cfg = RopeConfig(head_dim=8, base=10000.0)
        inp = random_input(rng, 2, 7, 8)
        plain = attend(inp, Rope(cfg))
        unit_pi = attend(inp, Pi(cfg, alpha=1.0))
        same_base = attend(inp, Ntk(cfg, new_base=10000.0))
        np.testing.assert_allclose(plain.weights, unit_pi.weights, atol=1e-12)
        np.testing.assert_allclose(plain.weights, same_base.weights, atol=1e-12)

    def test_positions_must_increase(self):
        with pytest.raises(ValueError):
            AttentionInput(
                queries=np.zeros((1, 3, 4)),
                keys=np.zeros((1, 3, 4)),
                values=np.zeros((1, 3, 4)),
                positions=np.array([0, 0, 1]),
            )


class TestLastRow:
    def test_single_token(self):
        rng = np.random.default_rng(8)
        rec = attend(random_input(rng, 1, 1, 4), Rope(RopeConfig(head_dim=4)))
        np.testing.assert_array_equal(last_row_distribution(rec, 0, 0), [1.0])

    def test_uniform_case(self):
        inp = AttentionInput(
            queries=np.zeros((1, 4, 4)),
            keys=np.zeros((1, 4, 4)),
            values=np.zeros((1, 4, 4)),
        )
        rec = attend(inp, Rope(RopeConfig(head_dim=4)))
        np.testing.assert_allclose(last_row_distribution(rec, 0, 0), [0.25] * 4, atol=1e-12)

    def test_matches_oracle_final_row(self):
        rng = np.random.default_rng(9)
        inp = random_input(rng, 3, 5, 8)
        variant = Rope(RopeConfig(head_dim=8))
        rec = attend(inp, variant)
        w, _ = brute_force_attention(inp.queries, inp.keys, inp.values, inp.positions, variant)
        for h in range(3):
            np.testing.assert_allclose(last_row_distribution(rec, 0, h), w[h, -1], atol=1e-9)
        assert abs(last_row_distribution(rec, 0, 0).sum() - 1.0) < 1e-6

    def test_index_errors(self):
        rng = np.random.default_rng(10)
        rec = attend(random_input(rng, 2, 3, 4), Rope(RopeConfig(head_dim=4)))
        with pytest.raises(IndexError):
            last_row_distribution(rec, 1, 0)
        with pytest.raises(IndexError):
            last_row_distribution(rec, 0, 2)


def test_ndjson_round_trip():
    rng = np.random.default_rng(11)
    rec = attend(
        AttentionInput(
            queries=rng.normal(size=(2, 5, 4)),
            keys=rng.normal(size=(2, 5, 4)),
            values=rng.normal(size=(2, 5, 4)),
        ),
        Rope(RopeConfig(head_dim=4)),
    )
    buf = io.StringIO()
    write_record_ndjson(rec, buf)
    buf.seek(0)
    back = read_record_ndjson(buf)
    assert back.layer_count == 1 and back.head_count == 2
    np.testing.assert_allclose(back.weights, rec.weights, atol=0)


def test_causal_softmax_rejects_non_square():
    with pytest.raises(ValueError):
        causal_softmax(np.zeros((2, 3)))
