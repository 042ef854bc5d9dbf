"""Command-line front end.

Exit codes: 0 success, 1 bad usage, 2 bad data, 3 numeric failure. Runs that
reach 0 or 3 leave a manifest next to their outputs recording config, input
and output content digests, and wall time, so any artifact can be traced to
the exact invocation that made it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .bench import (
    SplitSizes,
    build_benchmark,
    generate_synthetic,
    ingest_retrieval_file,
    load_bench_dir,
    write_bench_dir,
    write_records,
)
from .errors import DataError, NumericError, UsageError
from .evaluation import (
    ablation_suite,
    evaluate,
    evaluate_model,
    export_prompts,
    export_representations,
    read_predictions,
    write_eval_report,
    write_predictions,
)
from .metrics import round_half_up
from .model import gradient_check, load_checkpoint, save_checkpoint
from .training import (
    MODES,
    ORDER_POLICIES,
    TrainConfig,
    config_from_dict,
    train,
    write_step_log,
)

GRADCHECK_TOLERANCE = 1e-4


@dataclass
class RunContext:
    """What the manifest will say about this invocation."""

    subcommand: str = ""
    config: dict = field(default_factory=dict)
    master_seed: int | None = None
    inputs: list[Path] = field(default_factory=list)
    outputs: list[Path] = field(default_factory=list)
    manifest_path: Path | None = None


def file_digest(path: Path) -> str:
    digest = hashlib.blake2b(digest_size=8)
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _atomic_write_json(obj: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(ctx: RunContext, duration: float) -> None:
    manifest = {
        "tool_version": __version__,
        "subcommand": ctx.subcommand,
        "config": ctx.config,
        "master_seed": ctx.master_seed,
        "input_digests": {str(p): file_digest(p) for p in ctx.inputs if p.exists()},
        "output_digests": {str(p): file_digest(p) for p in ctx.outputs if p.exists()},
        "duration_seconds": duration,
    }
    assert ctx.manifest_path is not None
    _atomic_write_json(manifest, ctx.manifest_path)


def default_manifest_path(primary_output: Path) -> Path:
    return primary_output.parent / (primary_output.stem + ".manifest.json")


# ---------------------------------------------------------------------------
# Shared argument plumbing

_CONFIG_FLAGS = (
    ("--mode", str, f"training regime ({', '.join(MODES)})"),
    ("--w-reg", float, "spread-penalty weight"),
    ("--w-ada", float, "adaptive-objective weight"),
    ("--w-cls", float, "classification weight"),
    ("--lr", float, "learning rate"),
    ("--epochs", int, "training passes over the data"),
    ("--grad-clip-norm", float, "global gradient-norm cap"),
    ("--seed", int, "master seed"),
    ("--order-policy", str, f"context order in noisy prompts ({', '.join(ORDER_POLICIES)})"),
    ("--embed-dim", int, "embedding width"),
    ("--hidden-dim", int, "hidden width"),
    ("--min-freq", int, "vocabulary frequency floor"),
)


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON file of training settings")
    for flag, typ, help_text in _CONFIG_FLAGS:
        parser.add_argument(flag, type=typ, default=None, help=help_text)


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    """defaults <- config file <- explicit flags."""
    cfg = TrainConfig()
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file not found: {args.config}")
        try:
            body = json.loads(args.config.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc.msg})") from exc
        if not isinstance(body, dict):
            raise UsageError(f"{args.config}: config must be a JSON object")
        cfg = config_from_dict(body, base=cfg)
    overrides = {
        name: getattr(args, name)
        for name in TrainConfig.field_names()
        if getattr(args, name, None) is not None
    }
    return config_from_dict(overrides, base=cfg)


def _bench_input_paths(bench_dir: Path, splits: list[str]) -> list[Path]:
    paths = []
    for name in splits:
        for p in (bench_dir / f"{name}.jsonl", bench_dir / "records" / f"{name}.jsonl"):
            if p.exists():
                paths.append(p)
    meta = bench_dir / "meta.json"
    if meta.exists():
        paths.append(meta)
    return paths


# ---------------------------------------------------------------------------
# Handlers


def handle_synth(args: argparse.Namespace, ctx: RunContext) -> None:
    ctx.config = {
        "n_queries": args.n_queries,
        "n_entities": args.n_entities,
        "seed": args.seed,
    }
    ctx.master_seed = args.seed
    ctx.manifest_path = args.manifest or default_manifest_path(args.out)
    try:
        records = generate_synthetic(args.n_queries, args.n_entities, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    write_records(records, args.out)
    ctx.outputs.append(args.out)
    print(f"wrote {len(records)} synthetic queries to {args.out}")


def handle_build_bench(args: argparse.Namespace, ctx: RunContext) -> None:
    sizes = SplitSizes(train=args.train_size, validation=args.val_size, test=args.test_size)
    ctx.config = {
        "inputs": [str(p) for p in args.inputs],
        "sizes": {"train": sizes.train, "validation": sizes.validation, "test": sizes.test},
        "seed": args.seed,
        "workers": args.workers,
    }
    ctx.master_seed = args.seed
    ctx.manifest_path = args.manifest or args.out_dir / "manifest.json"
    records = []
    for path in args.inputs:
        ctx.inputs.append(path)
        records.extend(ingest_retrieval_file(path))
    splits, split_records = build_benchmark(records, sizes, args.seed, workers=args.workers)
    written = write_bench_dir(args.out_dir, splits, split_records, master_seed=args.seed)
    ctx.outputs.extend(written)
    for name, split in splits.items():
        print(f"{name}: {len(split.examples)} examples")
    print(f"benchmark written to {args.out_dir}")


def handle_train(args: argparse.Namespace, ctx: RunContext) -> None:
    config = resolve_config(args)
    ctx.config = config.to_json_dict()
    ctx.master_seed = config.seed
    ctx.manifest_path = args.manifest or Path(str(args.out) + ".manifest.json")
    bench = load_bench_dir(args.bench)
    ctx.inputs.extend(_bench_input_paths(args.bench, [args.split]))
    examples = bench.split(args.split).examples
    records = bench.records_for(args.split)

    steps_path = Path(str(args.out) + ".steps.jsonl")
    stats_path = Path(str(args.out) + ".stats.json")
    ctx.outputs.extend([args.out, steps_path, stats_path])

    result = train(examples, config, records=records)
    save_checkpoint(args.out, result.params, result.vocab, config.seed)
    write_step_log(result.steps, steps_path)
    _atomic_write_json(result.stats.to_json_dict(), stats_path)

    last = result.steps[-1]
    print(
        f"trained mode={config.mode} epochs={config.epochs} on {len(examples)} examples "
        f"({len(result.steps)} steps)"
    )
    print(f"final step: l_raat={last.l_raat:.4f} grad_norm={last.grad_norm:.4f}")
    print(f"update selection counts: {json.dumps(result.stats.to_json_dict())}")
    print(f"checkpoint: {args.out}")


def handle_eval(args: argparse.Namespace, ctx: RunContext) -> None:
    ctx.config = {
        "split": args.split,
        "max_len": args.max_len,
        "order_policy": args.order_policy,
    }
    ctx.manifest_path = args.manifest or Path(str(args.out) + ".manifest.json")
    bench = load_bench_dir(args.bench)
    ctx.inputs.extend(_bench_input_paths(args.bench, [args.split]))
    examples = bench.split(args.split).examples

    params = vocab = None
    seed = args.seed
    if args.checkpoint is not None:
        ctx.inputs.append(args.checkpoint)
        params, vocab, ckpt_seed = load_checkpoint(args.checkpoint)
        if seed is None:
            seed = ckpt_seed
    if seed is None:
        seed = bench.master_seed
    ctx.master_seed = seed
    ctx.config["seed"] = seed

    if args.export_prompts is not None:
        n = export_prompts(examples, args.export_prompts, args.order_policy, seed)
        ctx.outputs.append(args.export_prompts)
        print(f"exported {n} prompts to {args.export_prompts}")

    if args.predictions_in is not None:
        ctx.inputs.append(args.predictions_in)
        backend = read_predictions(args.predictions_in)
        report = evaluate(backend, examples)
    else:
        if params is None:
            raise UsageError("eval needs --checkpoint unless --predictions-in is given")
        report = evaluate_model(
            params,
            vocab,
            examples,
            order_policy=args.order_policy,
            seed=seed,
            max_len=args.max_len,
        )

    tsv_path = args.tsv if args.tsv is not None else Path(str(args.out) + ".tsv")
    write_eval_report(report, args.out, tsv_path)
    ctx.outputs.extend([args.out, tsv_path])
    if args.predictions_out is not None:
        write_predictions(report, args.predictions_out, args.order_policy, seed)
        ctx.outputs.append(args.predictions_out)
    if args.export_representations is not None:
        if params is None:
            raise UsageError("--export-representations needs --checkpoint")
        n = export_representations(
            params, vocab, examples, args.export_representations, args.order_policy, seed
        )
        ctx.outputs.append(args.export_representations)
        print(f"exported {n} hidden-state rows to {args.export_representations}")

    sys.stdout.write(report.table.to_tsv())
    if report.cls_accuracy is not None:
        print(f"classification accuracy: {round_half_up(100.0 * report.cls_accuracy):.2f}%")
    print(f"report: {args.out}")


def handle_ablate(args: argparse.Namespace, ctx: RunContext) -> None:
    config = resolve_config(args)
    ctx.config = config.to_json_dict()
    ctx.master_seed = config.seed
    ctx.manifest_path = args.manifest or Path(str(args.out) + ".manifest.json")
    bench = load_bench_dir(args.bench)
    ctx.inputs.extend(_bench_input_paths(args.bench, [args.train_split, args.eval_split]))
    result = ablation_suite(
        bench.split(args.train_split).examples,
        bench.split(args.eval_split).examples,
        config,
        max_len=args.max_len,
    )
    _atomic_write_json(result.to_json_dict(), args.out)
    ctx.outputs.append(args.out)
    for mode, report in result.reports.items():
        print(
            f"{mode}: avg F1 {round_half_up(report.table.avg_f1):.2f} "
            f"avg EM {round_half_up(report.table.avg_em):.2f}"
        )
    print(f"ablation report: {args.out}")


def handle_gradcheck(args: argparse.Namespace, ctx: RunContext) -> None:
    ctx.config = {
        "seed": args.seed,
        "eps": args.eps,
        "embed_dim": args.embed_dim,
        "hidden_dim": args.hidden_dim,
    }
    ctx.master_seed = args.seed
    ctx.manifest_path = args.manifest
    err = gradient_check(
        seed=args.seed,
        embed_dim=args.embed_dim,
        hidden_dim=args.hidden_dim,
        eps=args.eps,
    )
    print(f"max relative gradient error: {err:.3e} (tolerance {GRADCHECK_TOLERANCE:.0e})")
    if err >= GRADCHECK_TOLERANCE:
        raise NumericError(
            f"gradient check failed: {err:.3e} >= {GRADCHECK_TOLERANCE:.0e}"
        )
    print("gradient check passed")


def _quantile_means(values: list[float], buckets: int = 4) -> list[float]:
    if not values:
        return []
    edges = [round(i * len(values) / buckets) for i in range(buckets + 1)]
    out = []
    for lo, hi in zip(edges, edges[1:]):
        chunk = values[lo:hi] or values[lo:lo + 1]
        out.append(sum(chunk) / len(chunk))
    return out


def handle_analyze(args: argparse.Namespace, ctx: RunContext) -> None:
    ctx.config = {"steps": str(args.steps)}
    ctx.manifest_path = args.manifest or default_manifest_path(args.out)
    if not args.steps.exists():
        raise DataError(f"step log not found: {args.steps}")
    ctx.inputs.append(args.steps)
    records = []
    with args.steps.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(
                    f"{args.steps}: line {lineno}: invalid JSON ({exc.msg})"
                ) from exc
            for key in ("step", "mode", "max_kind", "l_raat", "grad_norm"):
                if key not in obj:
                    raise DataError(f"{args.steps}: line {lineno}: missing field {key}")
            records.append(obj)
    if not records:
        raise DataError(f"{args.steps}: no step records")

    selection: dict[str, int] = {}
    for rec in records:
        selection[rec["max_kind"]] = selection.get(rec["max_kind"], 0) + 1
    l_raat = [float(r["l_raat"]) for r in records]
    norms = [float(r["grad_norm"]) for r in records]
    summary = {
        "n_steps": len(records),
        "modes": sorted({r["mode"] for r in records}),
        "selection_counts": dict(sorted(selection.items())),
        "l_raat_quartile_means": _quantile_means(l_raat),
        "l_raat_first": l_raat[0],
        "l_raat_last": l_raat[-1],
        "grad_norm_mean": sum(norms) / len(norms),
        "grad_norm_max": max(norms),
    }
    _atomic_write_json(summary, args.out)
    ctx.outputs.append(args.out)
    print(f"steps: {summary['n_steps']}  selection: {json.dumps(summary['selection_counts'])}")
    quartiles = " -> ".join(f"{v:.3f}" for v in summary["l_raat_quartile_means"])
    print(f"l_raat quartile means: {quartiles}")
    print(f"analysis: {args.out}")


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="raat",
        description="Noise-robust QA laboratory: build benchmarks, train, evaluate.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("synth", help="generate a synthetic retrieval corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-queries", type=int, default=200)
    p.add_argument("--n-entities", type=int, default=60)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", type=Path, default=None)
    p.set_defaults(handler=handle_synth)

    p = sub.add_parser("build-bench", help="build noise-augmented benchmark splits")
    p.add_argument("--inputs", type=Path, nargs="+", required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-size", type=int, default=1500)
    p.add_argument("--val-size", type=int, default=300)
    p.add_argument("--test-size", type=int, default=1000)
    p.add_argument("--workers", type=int, default=None,
                   help="builder threads (default: RAAT_THREADS or 1; 0 = all cores)")
    p.add_argument("--manifest", type=Path, default=None)
    p.set_defaults(handler=handle_build_bench)

    p = sub.add_parser("train", help="train one regime and write a checkpoint")
    p.add_argument("--bench", type=Path, required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", type=Path, required=True)
    add_config_flags(p)
    p.add_argument("--manifest", type=Path, default=None)
    p.set_defaults(handler=handle_train)

    p = sub.add_parser("eval", help="score a model or imported predictions")
    p.add_argument("--bench", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--tsv", type=Path, default=None)
    p.add_argument("--max-len", type=int, default=8)
    p.add_argument("--order-policy", default="noise_first", choices=ORDER_POLICIES)
    p.add_argument("--seed", type=int, default=None,
                   help="prompt-assembly seed (default: checkpoint seed)")
    p.add_argument("--export-prompts", type=Path, default=None)
    p.add_argument("--predictions-in", type=Path, default=None)
    p.add_argument("--predictions-out", type=Path, default=None)
    p.add_argument("--export-representations", type=Path, default=None)
    p.add_argument("--manifest", type=Path, default=None)
    p.set_defaults(handler=handle_eval)

    p = sub.add_parser("ablate", help="train objective ablations from a shared init")
    p.add_argument("--bench", type=Path, required=True)
    p.add_argument("--train-split", default="train")
    p.add_argument("--eval-split", default="validation")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--max-len", type=int, default=8)
    add_config_flags(p)
    p.add_argument("--manifest", type=Path, default=None)
    p.set_defaults(handler=handle_ablate)

    p = sub.add_parser("gradcheck", help="verify analytic gradients numerically")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--embed-dim", type=int, default=4)
    p.add_argument("--hidden-dim", type=int, default=4)
    p.add_argument("--manifest", type=Path, default=None)
    p.set_defaults(handler=handle_gradcheck)

    p = sub.add_parser("analyze", help="summarize a training step log")
    p.add_argument("--steps", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--manifest", type=Path, default=None)
    p.set_defaults(handler=handle_analyze)

    return parser


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage problems; --help/--version exit 0.
        return 0 if exc.code == 0 else 1

    ctx = RunContext(subcommand=args.subcommand)
    start = time.perf_counter()
    code = 0
    try:
        args.handler(args, ctx)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = 3
    if ctx.manifest_path is not None:
        write_manifest(ctx, duration=time.perf_counter() - start)
    return code


def main(argv: list[str] | None = None) -> None:
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
