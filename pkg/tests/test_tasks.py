import numpy as np
import pytest

from ropelab.tasks import (
    QUERY_TOKEN,
    SyntheticTask,
    corpus_stream,
    sample_batch,
    sample_sequence,
)


def kv_task(**overrides):
    defaults = dict(
        kind="kv_retrieval", vocab_size=32, key_len=1, value_len=2,
        key_alphabet=8, value_alphabet=8,
    )
    defaults.update(overrides)
    return SyntheticTask(**defaults)


class TestValidation:
    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            SyntheticTask(kind="sorting", vocab_size=32)

    def test_vocab_without_filler_room(self):
        with pytest.raises(ValueError):
            SyntheticTask(kind="kv_retrieval", vocab_size=17, key_alphabet=8, value_alphabet=8)

    def test_unsupported_depth_policy(self):
        with pytest.raises(ValueError):
            kv_task(depth_policy="front_loaded")


class TestKvSequences:
    def test_exact_length_and_layout(self):
        task = kv_task()
        rng = np.random.default_rng(0)
        for length in (task.min_sequence_length, 17, 32, 100):
            seq = sample_sequence(task, rng, length)
            assert seq.shape == (length,)
            # query marker sits right after the haystack
            haystack_len = length - task.query_len - task.value_len
            assert seq[haystack_len] == QUERY_TOKEN
            key = seq[haystack_len + 1 : haystack_len + 1 + task.key_len]
            value = seq[-task.value_len :]
            assert np.all((key >= task.key_low) & (key < task.value_low))
            assert np.all((value >= task.value_low) & (value < task.filler_low))
            # the needle (key then value) appears inside the haystack
            needle = np.concatenate([key, value])
            found = [
                i
                for i in range(haystack_len - task.needle_len + 1)
                if np.array_equal(seq[i : i + task.needle_len], needle)
            ]
            assert found, "needle not present in haystack"

    def test_deterministic_under_seed(self):
        task = kv_task()
        a = sample_sequence(task, np.random.default_rng(7), 40)
        b = sample_sequence(task, np.random.default_rng(7), 40)
        np.testing.assert_array_equal(a, b)

    def test_too_short_rejected(self):
        task = kv_task()
        with pytest.raises(ValueError):
            sample_sequence(task, np.random.default_rng(0), task.min_sequence_length - 1)


class TestCopySequences:
    def test_exact_length_and_mirror(self):
        task = SyntheticTask(kind="copy", vocab_size=16)
        rng = np.random.default_rng(1)
        for length in (3, 9, 10, 33):
            seq = sample_sequence(task, rng, length)
            assert seq.shape == (length,)
            payload_len = (length - 1) // 2
            sep = length - payload_len - 1 - payload_len
            assert seq[sep + payload_len] == QUERY_TOKEN
            np.testing.assert_array_equal(
                seq[sep : sep + payload_len], seq[sep + payload_len + 1 :]
            )


def test_sample_batch_shape_and_determinism():
    task = kv_task()
    a = sample_batch(task, np.random.default_rng(3), 4, 24)
    b = sample_batch(task, np.random.default_rng(3), 4, 24)
    assert a.shape == (4, 24)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        sample_batch(task, np.random.default_rng(3), 0, 24)


def test_corpus_stream_length_and_range():
    task = kv_task()
    stream = corpus_stream(task, np.random.default_rng(4), 999)
    assert stream.shape == (999,)
    assert stream.min() >= 0 and stream.max() < task.vocab_size
