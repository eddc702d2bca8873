"""Command-line entry point.

Subcommands: rope-dump, train, needle, ppl, analyze, compare.  Every run is
driven by a flat key = value config file plus the global flags --config,
--out, --seed, and --threads (ROPELAB_THREADS is the fallback for the last).
Artifacts land in the output directory together with a manifest.ndjson line
per artifact; a validation failure exits before anything is written.

Exit codes: 0 success, 2 invalid config or arguments, 3 missing file,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, harness, model as model_mod, tasks
from .attention import read_record_ndjson
from .config import (
    Config,
    ConfigError,
    build_model_config,
    build_rotary_variant,
    build_task,
    config_hash,
    load_config,
)
from .model import TrainingDiverged, load_checkpoint, save_checkpoint, train
from .rope import RopeConfig, effective_angle, theta, thetas
from .seeding import derive_seed

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_MISSING_FILE = 3
EXIT_NUMERIC = 4


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


class _Manifest:
    def __init__(self, out_dir: Path, command: str, cfg_hash: str):
        self.out_dir = out_dir
        self.command = command
        self.cfg_hash = cfg_hash
        self.entries: list[str] = []

    def path(self, name: str) -> Path:
        self.entries.append(name)
        return self.out_dir / name

    def write(self) -> None:
        with open(self.out_dir / "manifest.ndjson", "w") as fp:
            for name in self.entries:
                fp.write(
                    json.dumps(
                        {
                            "artifact": name,
                            "command": self.command,
                            "config_sha256": self.cfg_hash,
                        }
                    )
                    + "\n"
                )


def _open_run(args, command: str, cfg: Config | None) -> _Manifest:
    if args.out is None:
        raise ConfigError("an output directory is required (--out or config key 'out')")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    return _Manifest(out_dir, command, config_hash(cfg.entries) if cfg else "none")


def _load_run_config(args) -> Config:
    if args.config is None:
        raise ConfigError("this command requires --config")
    cfg = load_config(args.config)
    if args.out is None and cfg.has("out"):
        args.out = cfg.get_str("out")
    if args.seed is None:
        args.seed = cfg.get_int("seed", 0)
    return cfg


def _eval_variant(cfg: Config, args, section: str, model):
    name = cfg.get_str(f"{section}.variant", "") or None
    if name is None:
        return model.config.variant, "model"
    variant = build_rotary_variant(
        cfg, name, model.config.head_dim, model.config.train_context_length
    )
    return variant, name


def _require_checkpoint(cfg: Config):
    path = cfg.get_str("model.checkpoint")
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_rope_dump(args) -> int:
    entries = {}
    for key in ("alpha", "new_base", "ramp_low", "ramp_high", "temperature"):
        value = getattr(args, key)
        if value is not None:
            entries[f"variant.dump.{key}"] = str(value)
    entries["variant.dump.kind"] = args.variant
    entries["variant.dump.base"] = str(args.base)
    cfg = Config(entries)
    context = args.context_length or 8192
    variant = build_rotary_variant(cfg, "dump", args.head_dim, context)
    positions = [int(p) for p in args.positions.split(",")]
    pairs = (
        [int(j) for j in args.pairs.split(",")]
        if args.pairs
        else list(range(args.head_dim // 2))
    )
    lines = ["m,j,theta,angle"]
    for m in positions:
        for j in pairs:
            rate = theta(variant.config, j)
            angle = effective_angle(variant, m, j)
            lines.append(f"{m},{j},{_fmt(rate)},{_fmt(angle)}")
    print("\n".join(lines))
    if args.out is not None:
        manifest = _open_run(args, "rope-dump", cfg)
        with open(manifest.path("rope_dump.csv"), "w") as fp:
            fp.write("\n".join(lines) + "\n")
        manifest.write()
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    model_config = build_model_config(cfg, seed=args.seed)
    task = build_task(cfg, model_config.vocab_size)
    steps = cfg.get_int("train.steps", 0)
    token_budget = cfg.get_int("train.token_budget", 0) or None
    if steps < 1 and token_budget is None:
        raise ConfigError("train.steps must be >= 1 (or set train.token_budget)")
    learning_rate = cfg.get_float("train.learning_rate")
    batch_size = cfg.get_int("train.batch_size", 16)
    momentum = cfg.get_float("train.momentum", 0.0)
    manifest = _open_run(args, "train", cfg)

    trained, trace = train(
        model_config, task, steps, learning_rate, batch_size,
        momentum=momentum, token_budget=token_budget,
    )
    save_checkpoint(trained, manifest.path("checkpoint.tmdl"))
    with open(manifest.path("loss.csv"), "w") as fp:
        fp.write("step,loss\n")
        for i, value in enumerate(trace):
            fp.write(f"{i},{_fmt(value)}\n")
    manifest.write()
    print(f"trained {trained.param_count} parameters for {len(trace)} steps; "
          f"loss {trace[0]:.4f} -> {trace[-1]:.4f}")
    return EXIT_OK


def cmd_needle(args) -> int:
    cfg = _load_run_config(args)
    trained = _require_checkpoint(cfg)
    task = build_task(cfg, trained.config.vocab_size)
    variant, variant_name = _eval_variant(cfg, args, "needle", trained)
    lengths = cfg.get_int_list("needle.lengths")
    depths = cfg.get_float_list("needle.depths", "0, 25, 50, 75, 100")
    cases = cfg.get_int("needle.cases_per_cell", 3)
    manifest = _open_run(args, "needle", cfg)

    grid = harness.run_needle_grid(
        trained, variant, task, lengths, depths,
        cases_per_cell=cases, seed=derive_seed(args.seed, "needle"),
        threads=args.threads,
    )
    with open(manifest.path("needle_grid.csv"), "w") as fp:
        harness.write_grid_csv(grid, fp)
    manifest.write()
    print(f"needle grid ({variant_name}): {len(lengths)}x{len(depths)} cells, "
          f"pass rate {grid.pass_rate():.3f}")
    return EXIT_OK


def cmd_ppl(args) -> int:
    cfg = _load_run_config(args)
    trained = _require_checkpoint(cfg)
    task = build_task(cfg, trained.config.vocab_size)
    variant, variant_name = _eval_variant(cfg, args, "ppl", trained)
    eval_lengths = cfg.get_int_list("ppl.eval_lengths")
    corpus_tokens = cfg.get_int("ppl.corpus_tokens", 4 * max(eval_lengths) + 1)
    stride = cfg.get_int("ppl.stride", 0) or None
    manifest = _open_run(args, "ppl", cfg)

    rng = np.random.default_rng(derive_seed(args.seed, "corpus"))
    corpus = tasks.corpus_stream(task, rng, corpus_tokens)
    curve = harness.run_ppl_curve(trained, variant, corpus, eval_lengths, stride=stride)
    with open(manifest.path("ppl_curve.csv"), "w") as fp:
        harness.write_curve_csv(curve, fp)
    manifest.write()
    summary = ", ".join(f"{n}:{p:.3f}" for n, p in zip(curve.eval_lengths, curve.ppl))
    print(f"perplexity ({variant_name}): {summary}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _load_run_config(args)
    bucket_width = cfg.get_int("analyze.bucket_width", 1)
    has_ndjson = cfg.has("analyze.attention_ndjson")
    has_model = cfg.has("model.checkpoint") and (
        cfg.has("analyze.prompt_tokens") or cfg.has("analyze.prompt_task_length")
    )
    has_js = cfg.has("analyze.js_a") and cfg.has("analyze.js_b")
    if not (has_ndjson or has_model or has_js):
        raise ConfigError(
            "analyze needs analyze.attention_ndjson, or model.checkpoint with "
            "analyze.prompt_tokens / analyze.prompt_task_length, or analyze.js_a/js_b"
        )
    manifest = _open_run(args, "analyze", cfg)

    if has_ndjson:
        path = Path(cfg.get_str("analyze.attention_ndjson"))
        if not path.exists():
            raise FileNotFoundError(f"attention file not found: {path}")
        with open(path) as fp:
            record = read_record_ndjson(fp)
        dist = analysis.aggregate_distance_distribution([record], bucket_width)
        with open(manifest.path("distance_distribution.csv"), "w") as fp:
            analysis.write_distribution_csv(dist, fp)

    if has_model:
        trained = _require_checkpoint(cfg)
        task = build_task(cfg, trained.config.vocab_size)
        variant, _ = _eval_variant(cfg, args, "analyze", trained)
        if cfg.has("analyze.prompt_tokens"):
            prompt = np.array(cfg.get_int_list("analyze.prompt_tokens"))
        else:
            length = cfg.get_int("analyze.prompt_task_length")
            rng = np.random.default_rng(derive_seed(args.seed, "analyze-prompt"))
            prompt = tasks.sample_sequence(task, rng, length)
        max_new = cfg.get_int("analyze.max_new_tokens", 8)
        report = analysis.attention_entropy(trained, prompt, max_new, variant=variant)
        with open(manifest.path("entropy.csv"), "w") as fp:
            analysis.write_entropy_csv(report, fp)
        _, records = model_mod.generate(
            trained, prompt, max_new, greedy=True, variant=variant
        )
        dist = analysis.aggregate_distance_distribution(records, bucket_width)
        with open(manifest.path("generation_distance_distribution.csv"), "w") as fp:
            analysis.write_distribution_csv(dist, fp)

    if has_js:
        sides = {}
        for side in ("a", "b"):
            path = Path(cfg.get_str(f"analyze.js_{side}"))
            if not path.exists():
                raise FileNotFoundError(f"attention file not found: {path}")
            with open(path) as fp:
                record = read_record_ndjson(fp)
            sides[side] = analysis.aggregate_distance_distribution([record], bucket_width)
        value = analysis.js_divergence(sides["a"], sides["b"])
        with open(manifest.path("js.csv"), "w") as fp:
            analysis.write_js_csv(
                [(cfg.get_str("analyze.js_a"), cfg.get_str("analyze.js_b"), value)], fp
            )

    manifest.write()
    print("analysis artifacts written")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_run_config(args)
    trained = _require_checkpoint(cfg)
    task = build_task(cfg, trained.config.vocab_size)
    names = cfg.get_str_list("compare.variants")
    if not names:
        raise ConfigError("compare.variants must list at least one variant")
    variants = {
        name: build_rotary_variant(
            cfg, name, trained.config.head_dim, trained.config.train_context_length
        )
        for name in names
    }
    lengths = cfg.get_int_list("needle.lengths")
    depths = cfg.get_float_list("needle.depths", "0, 25, 50, 75, 100")
    cases = cfg.get_int("needle.cases_per_cell", 3)
    eval_lengths = cfg.get_int_list("ppl.eval_lengths")
    corpus_tokens = cfg.get_int("ppl.corpus_tokens", 4 * max(eval_lengths) + 1)
    stride = cfg.get_int("ppl.stride", 0) or None
    threshold = cfg.get_float("ppl.threshold", float(trained.config.vocab_size))
    manifest = _open_run(args, "compare", cfg)

    rng = np.random.default_rng(derive_seed(args.seed, "corpus"))
    corpus = tasks.corpus_stream(task, rng, corpus_tokens)
    reports = harness.compare_variants(
        trained, variants, task, lengths, depths, corpus, eval_lengths,
        ppl_threshold=threshold, cases_per_cell=cases,
        seed=derive_seed(args.seed, "needle"), stride=stride, threads=args.threads,
    )
    for rep in reports:
        with open(manifest.path(f"needle_grid_{rep.name}.csv"), "w") as fp:
            harness.write_grid_csv(rep.grid, fp)
        with open(manifest.path(f"ppl_curve_{rep.name}.csv"), "w") as fp:
            harness.write_curve_csv(rep.curve, fp)
    with open(manifest.path("summary.ndjson"), "w") as fp:
        harness.write_summary_ndjson(reports, fp)
    manifest.write()
    for rep in reports:
        print(f"{rep.name}: needle pass rate {rep.grid.pass_rate():.3f}, "
              f"ppl@max {rep.curve.ppl[-1]:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=str, default=None, help="config file path")
    shared.add_argument("--out", type=str, default=None, help="output directory")
    shared.add_argument("--seed", type=int, default=None, help="experiment seed")
    shared.add_argument(
        "--threads",
        type=int,
        default=int(os.environ.get("ROPELAB_THREADS", "1")),
        help="worker threads for grid cells (env ROPELAB_THREADS)",
    )

    parser = argparse.ArgumentParser(
        prog="ropelab",
        description="rotary position encoding laboratory",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    dump = sub.add_parser("rope-dump", parents=[shared], help="print rotation angles")
    dump.add_argument("--variant", choices=("rope", "pi", "ntk", "yarn"), default="rope")
    dump.add_argument("--head-dim", dest="head_dim", type=int, required=True)
    dump.add_argument("--base", type=float, default=10000.0)
    dump.add_argument("--positions", type=str, default="0,1,2")
    dump.add_argument("--pairs", type=str, default="")
    dump.add_argument("--alpha", type=float, default=None)
    dump.add_argument("--new-base", dest="new_base", type=float, default=None)
    dump.add_argument("--ramp-low", dest="ramp_low", type=float, default=None)
    dump.add_argument("--ramp-high", dest="ramp_high", type=float, default=None)
    dump.add_argument("--temperature", type=float, default=None)
    dump.add_argument("--context-length", dest="context_length", type=int, default=None)
    dump.set_defaults(func=cmd_rope_dump)

    for name, func, text in (
        ("train", cmd_train, "train a model on the configured task"),
        ("needle", cmd_needle, "run the needle retrieval grid"),
        ("ppl", cmd_ppl, "run the perplexity curve"),
        ("analyze", cmd_analyze, "entropy / distance / divergence reports"),
        ("compare", cmd_compare, "run grids and curves for several variants"),
    ):
        p = sub.add_parser(name, parents=[shared], help=text)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code not in (0, None) else EXIT_OK
    if args.seed is None and args.command == "rope-dump":
        args.seed = 0
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except (ConfigError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ArithmeticError, TrainingDiverged) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
