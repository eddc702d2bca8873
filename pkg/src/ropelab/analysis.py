"""Attention analysis: entropy of generation, distance profiles, divergence.

Three quantities, all in nats:

* per-generated-token attention entropy, averaged over layers and heads and
  then over steps;
* the distribution of attention mass over relative token distance,
  aggregated across rows, heads, layers, and examples;
* Jensen-Shannon divergence between two such distributions.

Probabilities below 1e-12 are treated as exact zeros so rounding dust never
produces infinities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import AttentionRecord, last_row_distribution
from .model import TinyModel, generate
from .rope import RotaryVariant

__all__ = [
    "PROB_FLOOR",
    "EntropyReport",
    "DistanceDistribution",
    "entropy",
    "generation_entropy",
    "attention_entropy",
    "aggregate_distance_distribution",
    "js_divergence",
    "write_entropy_csv",
    "write_distribution_csv",
    "write_js_csv",
]

PROB_FLOOR = 1e-12


def _validate_probs(p: np.ndarray, what: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError(f"{what} must be a non-empty vector, got shape {p.shape}")
    if np.any(p < 0):
        raise ValueError(f"{what} has negative entries")
    total = p.sum()
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"{what} sums to {total}, expected 1 within 1e-6")
    return p


def entropy(distribution) -> float:
    """Shannon entropy -sum p ln p in nats; zero entries contribute nothing."""
    p = _validate_probs(distribution, "distribution")
    q = p[p > PROB_FLOOR]
    return float(-(q * np.log(q)).sum())


@dataclass
class EntropyReport:
    """Mean attention entropy per generated token and overall.

    per_step[i] averages the entropy of every (layer, head) attention
    distribution at generation step i; mean averages per_step.
    per_layer_head[l, h] is the per-pair mean across steps.
    context_lengths[i] is the context size the step-i distributions span.
    """

    per_step: list[float]
    mean: float
    context_lengths: list[int]
    per_layer_head: np.ndarray | None = None


def generation_entropy(records: list[AttentionRecord]) -> EntropyReport:
    """EntropyReport from the per-step attention records of one generation."""
    if not records:
        raise ValueError("empty generation: no attention records")
    layers, heads = records[0].layer_count, records[0].head_count
    per_step = []
    sums = np.zeros((layers, heads))
    for rec in records:
        step_vals = np.empty((layers, heads))
        for l in range(layers):
            for h in range(heads):
                step_vals[l, h] = entropy(last_row_distribution(rec, l, h))
        sums += step_vals
        per_step.append(float(step_vals.mean()))
    return EntropyReport(
        per_step=per_step,
        mean=float(np.mean(per_step)),
        context_lengths=[rec.sequence_length for rec in records],
        per_layer_head=sums / len(records),
    )


def attention_entropy(
    model: TinyModel,
    prompt,
    max_new_tokens: int,
    variant: RotaryVariant | None = None,
) -> EntropyReport:
    """Generate greedily and report the attention entropy of each step."""
    if max_new_tokens < 1:
        raise ValueError("max_new_tokens must be >= 1 for an entropy report")
    _, records = generate(model, prompt, max_new_tokens, greedy=True, variant=variant)
    return generation_entropy(records)


@dataclass
class DistanceDistribution:
    """Attention mass as a function of relative token distance.

    mass[k] is the normalized weight landing on distances in bucket k,
    i.e. distances [k*bucket_width, (k+1)*bucket_width); distance 0 is a
    token attending to itself.  sample_count is the number of attention rows
    that went into the average.
    """

    mass: np.ndarray
    bucket_width: int
    sample_count: int


def aggregate_distance_distribution(
    records,
    bucket_width: int = 1,
    by_absolute_position: bool = False,
) -> DistanceDistribution:
    """Average attention mass per distance over rows, heads, layers, examples.

    With by_absolute_position=True the aggregation key is the attended
    position j instead of the distance i - j.
    """
    records = list(records)
    if not records:
        raise ValueError("need at least one attention record")
    if bucket_width < 1:
        raise ValueError(f"bucket_width must be >= 1, got {bucket_width}")
    max_n = max(rec.sequence_length for rec in records)
    acc = np.zeros(max_n)
    rows = 0
    for rec in records:
        n = rec.sequence_length
        if not np.allclose(np.triu(rec.weights, k=1), 0.0):
            raise ValueError("record is not causal")
        merged = rec.weights.sum(axis=(0, 1))  # (n, n) over layers and heads
        if by_absolute_position:
            acc[:n] += merged.sum(axis=0)
        else:
            for dist in range(n):
                acc[dist] += np.trace(merged, offset=-dist)
        rows += rec.layer_count * rec.head_count * n
    mean_mass = acc / rows
    buckets = -(-max_n // bucket_width)
    padded = np.zeros(buckets * bucket_width)
    padded[:max_n] = mean_mass
    bucketed = padded.reshape(buckets, bucket_width).sum(axis=1)
    total = bucketed.sum()
    if total <= 0:
        raise ValueError("aggregated mass is zero")
    return DistanceDistribution(
        mass=bucketed / total, bucket_width=bucket_width, sample_count=rows
    )


def _kl(p: np.ndarray, m: np.ndarray) -> float:
    live = p > PROB_FLOOR
    return float((p[live] * np.log(p[live] / m[live])).sum())


def js_divergence(p, q) -> float:
    """Jensen-Shannon divergence in nats: symmetric, 0 iff equal, at most ln 2.

    Accepts DistanceDistribution values (bucket widths must match; the
    shorter mass vector is zero-padded) or plain probability vectors.
    """
    if isinstance(p, DistanceDistribution) and isinstance(q, DistanceDistribution):
        if p.bucket_width != q.bucket_width:
            raise ValueError(
                f"bucket widths differ: {p.bucket_width} vs {q.bucket_width}"
            )
        pv, qv = p.mass, q.mass
    elif isinstance(p, DistanceDistribution) or isinstance(q, DistanceDistribution):
        raise ValueError("compare two DistanceDistributions or two plain vectors")
    else:
        pv, qv = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    size = max(pv.size, qv.size)
    pv = np.pad(pv, (0, size - pv.size))
    qv = np.pad(qv, (0, size - qv.size))
    pv = _validate_probs(pv, "first distribution")
    qv = _validate_probs(qv, "second distribution")
    mid = 0.5 * (pv + qv)
    return 0.5 * _kl(pv, mid) + 0.5 * _kl(qv, mid)


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_entropy_csv(report: EntropyReport, fp) -> None:
    fp.write("step,mean_entropy,context_length\n")
    for i, (value, ctx) in enumerate(zip(report.per_step, report.context_lengths)):
        fp.write(f"{i},{_fmt(value)},{ctx}\n")


def write_distribution_csv(dist: DistanceDistribution, fp) -> None:
    fp.write("bucket,mass\n")
    for bucket, mass in enumerate(dist.mass):
        fp.write(f"{bucket},{_fmt(mass)}\n")


def write_js_csv(rows: list[tuple[str, str, float]], fp) -> None:
    fp.write("name_a,name_b,js_nats\n")
    for name_a, name_b, value in rows:
        fp.write(f"{name_a},{name_b},{_fmt(value)}\n")
