"""Causal scaled-dot-product attention that materializes full weight matrices.

No fused or memory-efficient path: the weight matrices are the product here,
so every (layer, head) keeps its full n x n lower-triangular matrix, ready
for entropy and distance-distribution analysis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .rope import RotaryVariant, logit_scale, rotate_block

__all__ = [
    "AttentionInput",
    "AttentionRecord",
    "attend",
    "last_row_distribution",
    "causal_softmax",
    "write_record_ndjson",
    "read_record_ndjson",
]


@dataclass
class AttentionInput:
    """Per-head query/key/value stacks for one sequence.

    queries, keys, values: float64 arrays of shape (head_count, n, head_dim).
    positions: strictly increasing non-negative ints, default 0..n-1.
    """

    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    positions: np.ndarray | None = None

    def __post_init__(self):
        q = np.asarray(self.queries, dtype=np.float64)
        k = np.asarray(self.keys, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if q.ndim != 3:
            raise ValueError(f"queries must have shape (heads, n, head_dim), got {q.shape}")
        if k.shape != q.shape or v.shape != q.shape:
            raise ValueError(
                f"queries/keys/values shapes differ: {q.shape}, {k.shape}, {v.shape}"
            )
        for name, a in (("queries", q), ("keys", k), ("values", v)):
            if not np.all(np.isfinite(a)):
                raise FloatingPointError(f"{name} contain non-finite entries")
        if self.positions is None:
            pos = np.arange(q.shape[1])
        else:
            pos = np.asarray(self.positions)
            if pos.shape != (q.shape[1],):
                raise ValueError(f"positions must have shape ({q.shape[1]},), got {pos.shape}")
            if pos.size and pos[0] < 0:
                raise ValueError("positions must be non-negative")
            if np.any(np.diff(pos) <= 0):
                raise ValueError("positions must be strictly increasing")
        self.queries, self.keys, self.values, self.positions = q, k, v, pos

    @property
    def head_count(self) -> int:
        return self.queries.shape[0]

    @property
    def sequence_length(self) -> int:
        return self.queries.shape[1]

    @property
    def head_dim(self) -> int:
        return self.queries.shape[2]


@dataclass
class AttentionRecord:
    """Attention weights and per-head outputs of one forward pass.

    weights: (layer_count, head_count, n, n), each row lower-triangular and
    summing to 1.  outputs: (layer_count, head_count, n, head_dim).
    A bare attend() call produces a single-layer record; a model forward
    stacks one layer per block.
    """

    weights: np.ndarray
    outputs: np.ndarray = field(repr=False)

    @property
    def layer_count(self) -> int:
        return self.weights.shape[0]

    @property
    def head_count(self) -> int:
        return self.weights.shape[1]

    @property
    def sequence_length(self) -> int:
        return self.weights.shape[2]


def causal_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the causal prefix of the last two axes.

    Entries above the diagonal come out exactly zero; max-subtraction keeps
    the exponentials in range for logits up to 1e4 and beyond.
    """
    n = logits.shape[-1]
    if logits.shape[-2] != n:
        raise ValueError(f"expected square trailing axes, got {logits.shape}")
    mask = np.tril(np.ones((n, n), dtype=bool))
    # In-place passes: these tensors are the dominant memory cost at long n.
    weights = np.where(mask, logits, -np.inf)
    weights -= weights.max(axis=-1, keepdims=True)
    np.exp(weights, out=weights)  # exp(-inf) lands exactly on 0 above the diagonal
    weights /= weights.sum(axis=-1, keepdims=True)
    return weights


def attend(inp: AttentionInput, variant: RotaryVariant) -> AttentionRecord:
    """Causal attention with the variant's rotation applied to q and k.

    logits[i, j] = scale * dot(rot(q_i), rot(k_j)) / sqrt(head_dim) for
    j <= i, where scale is the variant's logit multiplier (1 except for a
    temperature-carrying variant).  Values are never rotated.
    """
    if inp.head_dim != variant.config.head_dim:
        raise ValueError(
            f"input head_dim {inp.head_dim} != variant head_dim {variant.config.head_dim}"
        )
    rq = rotate_block(variant, inp.queries, inp.positions)
    rk = rotate_block(variant, inp.keys, inp.positions)
    scale = logit_scale(variant) / np.sqrt(inp.head_dim)
    logits = scale * (rq @ rk.swapaxes(-1, -2))
    weights = causal_softmax(logits)
    outputs = weights @ inp.values
    return AttentionRecord(weights=weights[np.newaxis], outputs=outputs[np.newaxis])


def last_row_distribution(record: AttentionRecord, layer: int, head: int) -> np.ndarray:
    """Attention distribution of the final position for one (layer, head)."""
    if not 0 <= layer < record.layer_count:
        raise IndexError(f"layer {layer} outside [0, {record.layer_count})")
    if not 0 <= head < record.head_count:
        raise IndexError(f"head {head} outside [0, {record.head_count})")
    return record.weights[layer, head, -1].copy()


def write_record_ndjson(record: AttentionRecord, fp) -> None:
    """One JSON object per (layer, head): layer, head, n, row-major weights."""
    n = record.sequence_length
    for layer in range(record.layer_count):
        for head in range(record.head_count):
            obj = {
                "layer": layer,
                "head": head,
                "n": n,
                "weights": [float(w) for w in record.weights[layer, head].ravel()],
            }
            fp.write(json.dumps(obj) + "\n")


def read_record_ndjson(fp) -> AttentionRecord:
    """Rebuild an AttentionRecord from its NDJSON form."""
    entries = {}
    n = None
    for line in fp:
        line = line.strip()
        if not line:
            continue
        obj = json.loads(line)
        if n is None:
            n = obj["n"]
        elif obj["n"] != n:
            raise ValueError(f"inconsistent sequence lengths {n} and {obj['n']}")
        entries[(obj["layer"], obj["head"])] = np.array(
            obj["weights"], dtype=np.float64
        ).reshape(n, n)
    if not entries:
        raise ValueError("no attention entries found")
    layers = 1 + max(l for l, _ in entries)
    heads = 1 + max(h for _, h in entries)
    if len(entries) != layers * heads:
        raise ValueError("missing (layer, head) entries")
    weights = np.zeros((layers, heads, n, n))
    for (l, h), w in entries.items():
        weights[l, h] = w
    outputs = np.zeros((layers, heads, n, 0))
    return AttentionRecord(weights=weights, outputs=outputs)
