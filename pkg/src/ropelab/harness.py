"""Benchmark protocols: needle retrieval grids and perplexity curves.

The needle grid places a key/value needle at controlled depths inside filler
of controlled length, asks for the value at the end, and annotates each
(length, depth) cell with pass/fail and the mean attention entropy of the
answer-generation steps.  The perplexity curve measures exp(mean next-token
negative log-likelihood) over fixed-length windows of a token stream.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .analysis import generation_entropy
from .attention import AttentionRecord
from .model import TinyModel, forward, generate
from .rope import RotaryVariant
from .seeding import derive_seed
from .tasks import QUERY_TOKEN, SyntheticTask, assemble_retrieval_sequence

__all__ = [
    "NeedleCase",
    "NeedleCell",
    "NeedleGrid",
    "PerplexityCurve",
    "VariantReport",
    "build_needle_case",
    "run_needle_case",
    "run_needle_grid",
    "run_ppl_curve",
    "compare_variants",
    "write_grid_csv",
    "write_curve_csv",
    "write_summary_ndjson",
]


@dataclass
class NeedleCase:
    """One retrieval instance: prompt tokens plus the expected value span.

    The needle (key followed by value) sits at
    round(depth_percent/100 * (haystack_length - needle_length)) inside the
    haystack; the query (marker + key) is appended after the haystack, so
    tokens has haystack_length + query length entries.
    """

    haystack_length: int
    depth_percent: float
    key: np.ndarray
    value: np.ndarray
    query: np.ndarray
    seed: int
    tokens: np.ndarray = field(repr=False)
    needle_offset: int = 0


def build_needle_case(
    task: SyntheticTask,
    haystack_length: int,
    depth_percent: float,
    seed: int,
) -> NeedleCase:
    """Deterministically build a retrieval case for (length, depth, seed)."""
    if task.kind != "kv_retrieval":
        raise ValueError(f"needle cases need a kv_retrieval task, got {task.kind!r}")
    if not 0.0 <= depth_percent <= 100.0:
        raise ValueError(f"depth_percent must be in [0, 100], got {depth_percent}")
    if haystack_length < task.needle_len + task.query_len + 2:
        raise ValueError(
            f"haystack_length {haystack_length} below minimum "
            f"{task.needle_len + task.query_len + 2}"
        )
    rng = np.random.default_rng(seed)
    key = task.draw_key(rng)
    value = task.draw_value(rng)
    filler = task.draw_filler(rng, haystack_length - task.needle_len)
    span = haystack_length - task.needle_len
    offset = int(math.floor(depth_percent / 100.0 * span + 0.5))
    offset = max(0, min(offset, span))
    full = assemble_retrieval_sequence(task, key, value, filler, offset)
    prompt = full[: haystack_length + task.query_len]
    return NeedleCase(
        haystack_length=haystack_length,
        depth_percent=depth_percent,
        key=key,
        value=value,
        query=np.concatenate([[QUERY_TOKEN], key]),
        seed=seed,
        tokens=prompt,
        needle_offset=offset,
    )


def run_needle_case(
    model: TinyModel,
    variant: RotaryVariant,
    case: NeedleCase,
) -> tuple[bool, float, list[AttentionRecord]]:
    """Greedy-generate the value span; pass only on an exact match."""
    out, records = generate(
        model, case.tokens, max_new_tokens=len(case.value), greedy=True, variant=variant
    )
    passed = bool(np.array_equal(out, case.value))
    mean_entropy = generation_entropy(records).mean
    return passed, mean_entropy, records


@dataclass
class NeedleCell:
    passed: bool
    mean_entropy: float
    cases_run: int
    case_passes: int = 0
    error: str | None = None


@dataclass
class NeedleGrid:
    lengths: list[int]
    depths: list[float]
    cells: dict[tuple[int, float], NeedleCell]

    def pass_rate(self, length: int | None = None) -> float:
        """Case-level pass fraction, optionally restricted to one length."""
        runs = passes = 0
        for (cell_len, _), cell in self.cells.items():
            if length is not None and cell_len != length:
                continue
            runs += cell.cases_run
            passes += cell.case_passes
        return passes / runs if runs else 0.0

    def mean_entropy(self, length: int | None = None) -> float:
        vals = [
            cell.mean_entropy
            for (cell_len, _), cell in self.cells.items()
            if (length is None or cell_len == length) and cell.error is None
        ]
        return float(np.mean(vals)) if vals else float("nan")


def _run_cell(model, variant, task, length, depth, cases_per_cell, seed):
    haystack_length = length - task.query_len - task.value_len
    passes = 0
    entropies = []
    try:
        for k in range(cases_per_cell):
            case_seed = derive_seed(seed, f"needle/{length}/{depth}/{k}")
            case = build_needle_case(task, haystack_length, depth, case_seed)
            passed, ent, _ = run_needle_case(model, variant, case)
            passes += int(passed)
            entropies.append(ent)
    except Exception as exc:  # annotate instead of failing the grid
        return NeedleCell(
            passed=False,
            mean_entropy=float("nan"),
            cases_run=len(entropies),
            case_passes=passes,
            error=f"{type(exc).__name__}: {exc}",
        )
    return NeedleCell(
        passed=passes * 2 > cases_per_cell,
        mean_entropy=float(np.mean(entropies)),
        cases_run=cases_per_cell,
        case_passes=passes,
    )


def run_needle_grid(
    model: TinyModel,
    variant: RotaryVariant,
    task: SyntheticTask,
    lengths,
    depths,
    cases_per_cell: int = 3,
    seed: int = 0,
    threads: int = 1,
) -> NeedleGrid:
    """Evaluate every (length, depth) cell; a cell passes on a seed majority.

    `lengths` count whole sequences (haystack + query + value).  Cells are
    independent, so they may be evaluated by a thread pool; results land in
    the grid by key, keeping output deterministic.
    """
    lengths = [int(x) for x in lengths]
    depths = [float(x) for x in depths]
    if not lengths or not depths:
        raise ValueError("lengths and depths must be non-empty")
    if cases_per_cell < 1:
        raise ValueError(f"cases_per_cell must be >= 1, got {cases_per_cell}")
    if max(lengths) + task.value_len > model.config.inference_cap:
        raise ValueError(
            f"max length {max(lengths)} exceeds inference cap {model.config.inference_cap}"
        )
    keys = [(length, depth) for length in lengths for depth in depths]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = {
                key: pool.submit(
                    _run_cell, model, variant, task, key[0], key[1], cases_per_cell, seed
                )
                for key in keys
            }
            cells = {key: fut.result() for key, fut in futures.items()}
    else:
        cells = {
            key: _run_cell(model, variant, task, key[0], key[1], cases_per_cell, seed)
            for key in keys
        }
    return NeedleGrid(lengths=lengths, depths=depths, cells=cells)


@dataclass
class PerplexityCurve:
    eval_lengths: list[int]
    ppl: list[float]


def run_ppl_curve(
    model: TinyModel,
    variant: RotaryVariant,
    corpus,
    eval_lengths,
    stride: int | None = None,
) -> PerplexityCurve:
    """exp(mean next-token NLL) over windows of each evaluation length.

    Windows are non-overlapping by default (stride == window length); the
    natural log stays inside the mean and is exponentiated exactly once.
    """
    corpus = np.asarray(corpus, dtype=np.int64)
    eval_lengths = [int(x) for x in eval_lengths]
    if not eval_lengths:
        raise ValueError("eval_lengths must be non-empty")
    if corpus.size <= max(eval_lengths):
        raise ValueError(
            f"corpus of {corpus.size} tokens too short for window {max(eval_lengths)}"
        )
    ppl = []
    for n in eval_lengths:
        step = n if stride is None or stride < 1 else stride
        nll_sum = 0.0
        count = 0
        for start in range(0, corpus.size - n + 1, step):
            window = corpus[start : start + n]
            logits, _ = forward(model, window, variant=variant)
            shifted = logits - logits.max(axis=-1, keepdims=True)
            log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
            targets = window[1:]
            nll_sum += float(-log_probs[np.arange(n - 1), targets].sum())
            count += n - 1
        ppl.append(math.exp(nll_sum / count))
    return PerplexityCurve(eval_lengths=eval_lengths, ppl=ppl)


@dataclass
class VariantReport:
    name: str
    grid: NeedleGrid
    curve: PerplexityCurve
    max_length_under_threshold: int | None
    ppl_threshold: float


def compare_variants(
    model: TinyModel,
    variants: dict[str, RotaryVariant],
    task: SyntheticTask,
    needle_lengths,
    depths,
    corpus,
    eval_lengths,
    ppl_threshold: float,
    cases_per_cell: int = 3,
    seed: int = 0,
    stride: int | None = None,
    threads: int = 1,
) -> list[VariantReport]:
    """One needle grid and perplexity curve per variant plus summary numbers."""
    for name, variant in variants.items():
        if variant.config.head_dim != model.config.head_dim:
            raise ValueError(
                f"variant {name!r} head_dim {variant.config.head_dim} "
                f"!= model head_dim {model.config.head_dim}"
            )
    reports = []
    for name, variant in variants.items():
        grid = run_needle_grid(
            model, variant, task, needle_lengths, depths,
            cases_per_cell=cases_per_cell, seed=seed, threads=threads,
        )
        curve = run_ppl_curve(model, variant, corpus, eval_lengths, stride=stride)
        under = [n for n, p in zip(curve.eval_lengths, curve.ppl) if p <= ppl_threshold]
        reports.append(
            VariantReport(
                name=name,
                grid=grid,
                curve=curve,
                max_length_under_threshold=max(under) if under else None,
                ppl_threshold=ppl_threshold,
            )
        )
    return reports


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_grid_csv(grid: NeedleGrid, fp) -> None:
    fp.write("length,depth_percent,pass,mean_entropy_nats,cases_run\n")
    for length in grid.lengths:
        for depth in grid.depths:
            cell = grid.cells[(length, depth)]
            fp.write(
                f"{length},{_fmt(depth)},{_fmt(cell.passed)},"
                f"{_fmt(cell.mean_entropy)},{cell.cases_run}\n"
            )


def write_curve_csv(curve: PerplexityCurve, fp) -> None:
    fp.write("eval_length,ppl\n")
    for n, p in zip(curve.eval_lengths, curve.ppl):
        fp.write(f"{n},{_fmt(p)}\n")


def write_summary_ndjson(reports: list[VariantReport], fp) -> None:
    """One JSON object per (variant, metric)."""
    import json

    for rep in reports:
        for n, p in zip(rep.curve.eval_lengths, rep.curve.ppl):
            fp.write(
                json.dumps(
                    {"variant": rep.name, "metric": "ppl", "eval_length": n, "value": p}
                )
                + "\n"
            )
        for length in rep.grid.lengths:
            fp.write(
                json.dumps(
                    {
                        "variant": rep.name,
                        "metric": "needle_pass_rate",
                        "length": length,
                        "value": rep.grid.pass_rate(length),
                    }
                )
                + "\n"
            )
            fp.write(
                json.dumps(
                    {
                        "variant": rep.name,
                        "metric": "needle_mean_entropy",
                        "length": length,
                        "value": rep.grid.mean_entropy(length),
                    }
                )
                + "\n"
            )
        fp.write(
            json.dumps(
                {
                    "variant": rep.name,
                    "metric": "max_length_ppl_under_threshold",
                    "threshold": rep.ppl_threshold,
                    "value": rep.max_length_under_threshold,
                }
            )
            + "\n"
        )
