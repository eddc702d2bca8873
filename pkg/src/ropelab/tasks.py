"""Synthetic token tasks: key-value retrieval and copying.

Token ids are abstract.  The vocabulary of a retrieval task is carved into
a query marker (id 0), a key alphabet, a value alphabet, and filler; the
copy task uses id 0 as separator and everything else as payload.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SyntheticTask", "sample_sequence", "sample_batch", "corpus_stream"]

QUERY_TOKEN = 0


@dataclass(frozen=True)
class SyntheticTask:
    """Parameters of a synthetic sequence distribution.

    kind is "kv_retrieval" or "copy".  For retrieval, a needle of
    key_len + value_len tokens is buried in filler at a depth chosen by
    depth_policy, and the sequence ends with the query marker, the key, and
    the value again (the supervised answer).
    """

    kind: str
    vocab_size: int
    key_len: int = 1
    value_len: int = 2
    key_alphabet: int = 8
    value_alphabet: int = 8
    depth_policy: str = "uniform"

    def __post_init__(self):
        if self.kind not in ("kv_retrieval", "copy"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.depth_policy != "uniform":
            raise ValueError(f"unsupported depth_policy {self.depth_policy!r}")
        if self.kind == "kv_retrieval":
            if self.key_len < 1 or self.value_len < 1:
                raise ValueError("key_len and value_len must be >= 1")
            if self.key_alphabet < 2 or self.value_alphabet < 2:
                raise ValueError("alphabets must have at least 2 symbols")
            if self.filler_alphabet < 1:
                raise ValueError(
                    f"vocab_size {self.vocab_size} leaves no filler tokens"
                )
        else:
            if self.vocab_size < 4:
                raise ValueError(f"copy task needs vocab_size >= 4, got {self.vocab_size}")

    # Token-range layout for kv_retrieval: [QUERY | keys | values | filler].
    @property
    def key_low(self) -> int:
        return 1

    @property
    def value_low(self) -> int:
        return 1 + self.key_alphabet

    @property
    def filler_low(self) -> int:
        return 1 + self.key_alphabet + self.value_alphabet

    @property
    def filler_alphabet(self) -> int:
        return self.vocab_size - self.filler_low

    @property
    def needle_len(self) -> int:
        return self.key_len + self.value_len

    @property
    def query_len(self) -> int:
        return 1 + self.key_len

    @property
    def min_sequence_length(self) -> int:
        if self.kind == "copy":
            return 3
        # haystack must hold the needle plus two filler tokens
        return self.needle_len + 2 + self.query_len + self.value_len

    def draw_key(self, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(self.key_low, self.key_low + self.key_alphabet, self.key_len)

    def draw_value(self, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(self.value_low, self.value_low + self.value_alphabet, self.value_len)

    def draw_filler(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return rng.integers(self.filler_low, self.vocab_size, count)


def assemble_retrieval_sequence(
    task: SyntheticTask,
    key: np.ndarray,
    value: np.ndarray,
    filler: np.ndarray,
    offset: int,
) -> np.ndarray:
    """Haystack with the needle at `offset`, then query marker, key, value."""
    needle = np.concatenate([key, value])
    haystack = np.concatenate([filler[:offset], needle, filler[offset:]])
    query = np.concatenate([[QUERY_TOKEN], key])
    return np.concatenate([haystack, query, value]).astype(np.int64)


def _kv_sequence(task: SyntheticTask, rng: np.random.Generator, length: int) -> np.ndarray:
    if length < task.min_sequence_length:
        raise ValueError(
            f"length {length} below task minimum {task.min_sequence_length}"
        )
    haystack_len = length - task.query_len - task.value_len
    filler_len = haystack_len - task.needle_len
    key = task.draw_key(rng)
    value = task.draw_value(rng)
    filler = task.draw_filler(rng, filler_len)
    offset = int(rng.integers(0, filler_len + 1))
    return assemble_retrieval_sequence(task, key, value, filler, offset)


def _copy_sequence(task: SyntheticTask, rng: np.random.Generator, length: int) -> np.ndarray:
    if length < task.min_sequence_length:
        raise ValueError(
            f"length {length} below task minimum {task.min_sequence_length}"
        )
    payload_len = (length - 1) // 2
    lead_len = length - (2 * payload_len + 1)
    payload = rng.integers(1, task.vocab_size, payload_len)
    lead = rng.integers(1, task.vocab_size, lead_len)
    return np.concatenate([lead, payload, [QUERY_TOKEN], payload]).astype(np.int64)


def sample_sequence(task: SyntheticTask, rng: np.random.Generator, length: int) -> np.ndarray:
    """One training sequence of exactly `length` tokens."""
    if task.kind == "kv_retrieval":
        return _kv_sequence(task, rng, length)
    return _copy_sequence(task, rng, length)


def sample_batch(
    task: SyntheticTask, rng: np.random.Generator, batch_size: int, length: int
) -> np.ndarray:
    """(batch_size, length) int64 batch drawn sequentially from one stream."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    return np.stack([sample_sequence(task, rng, length) for _ in range(batch_size)])


def corpus_stream(task: SyntheticTask, rng: np.random.Generator, total: int) -> np.ndarray:
    """Token stream of `total` tokens built from concatenated task sequences."""
    if total < 1:
        raise ValueError(f"total must be >= 1, got {total}")
    chunk = max(task.min_sequence_length, 64)
    parts = []
    produced = 0
    while produced < total:
        seq = sample_sequence(task, rng, chunk)
        parts.append(seq)
        produced += len(seq)
    return np.concatenate(parts)[:total]
