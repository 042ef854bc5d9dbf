"""Evaluation harness: four prompt conditions, scoring, and export hooks.

Every example is scored under the bare golden prompt and under golden plus
each of the three noise kinds. Predictions can come from the built-in model
or from a file (so external systems can answer the exported prompts), and
the hidden state the classifier reads can be dumped for probing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .bench import CONDITION_KINDS, CONDITION_ORDER, BenchmarkExample, NoiseKind
from .errors import DataError
from .metrics import ConditionTable, ScoredPrediction, aggregate, round_half_up, score_prediction
from .model import ModelParams, Vocab, build_vocab, init_params, prompt_hidden
from .training import (
    TrainConfig,
    assemble_prompt,
    classification_accuracy,
    condition_prompt,
    encode_prompt,
    predict_answer,
    train,
    vocab_corpus,
)

PROMPTS_FORMAT_VERSION = 1


@dataclass
class ModelBackend:
    """Greedy decoding from in-memory weights."""

    params: ModelParams
    vocab: Vocab
    order_policy: str = "noise_first"
    seed: int = 0
    max_len: int = 8

    def predictions(
        self, examples: Sequence[BenchmarkExample], condition: str
    ) -> dict[str, str]:
        return {
            e.id: predict_answer(
                self.params,
                self.vocab,
                e,
                condition,
                order_policy=self.order_policy,
                seed=self.seed,
                max_len=self.max_len,
            )
            for e in examples
        }


@dataclass
class FileBackend:
    """Predictions read back from a file keyed by (condition, example id)."""

    table: dict[tuple[str, str], str]

    def predictions(
        self, examples: Sequence[BenchmarkExample], condition: str
    ) -> dict[str, str]:
        missing = [e.id for e in examples if (condition, e.id) not in self.table]
        if missing:
            shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
            raise DataError(
                f"predictions file lacks {len(missing)} '{condition}' entries: {shown}"
            )
        return {e.id: self.table[(condition, e.id)] for e in examples}


@dataclass
class EvalReport:
    table: ConditionTable
    scored: dict[str, list[ScoredPrediction]]
    n_examples: int
    cls_accuracy: float | None = None

    def to_json_dict(self) -> dict:
        out = {
            "conditions": self.table.to_json_dict(),
            "n_examples": self.n_examples,
        }
        if self.cls_accuracy is not None:
            out["classification_accuracy"] = round_half_up(100.0 * self.cls_accuracy)
        return out


def evaluate(
    backend,
    examples: Sequence[BenchmarkExample],
    conditions: Sequence[str] = CONDITION_ORDER,
) -> EvalReport:
    if not examples:
        raise DataError("cannot evaluate on an empty example list")
    bad = [c for c in conditions if c not in CONDITION_KINDS]
    if bad:
        raise DataError(f"unknown evaluation condition(s): {', '.join(bad)}")
    scored: dict[str, list[ScoredPrediction]] = {}
    for condition in conditions:
        preds = backend.predictions(examples, condition)
        scored[condition] = [
            score_prediction(e.id, preds[e.id], e.answers) for e in examples
        ]
    table = aggregate(scored, labels=conditions)
    return EvalReport(table=table, scored=scored, n_examples=len(examples))


def evaluate_model(
    params: ModelParams,
    vocab: Vocab,
    examples: Sequence[BenchmarkExample],
    order_policy: str = "noise_first",
    seed: int = 0,
    max_len: int = 8,
    conditions: Sequence[str] = CONDITION_ORDER,
    with_cls: bool = True,
) -> EvalReport:
    backend = ModelBackend(params, vocab, order_policy, seed, max_len)
    report = evaluate(backend, examples, conditions)
    if with_cls:
        report.cls_accuracy = classification_accuracy(
            params, vocab, examples, order_policy=order_policy, seed=seed
        )
    return report


# ---------------------------------------------------------------------------
# Prompt export / prediction import


def export_prompts(
    examples: Sequence[BenchmarkExample],
    path: str | Path,
    order_policy: str = "noise_first",
    seed: int = 0,
    conditions: Sequence[str] = CONDITION_ORDER,
) -> int:
    """One header line, then one {example_id, condition, prompt} per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        header = {
            "format_version": PROMPTS_FORMAT_VERSION,
            "order_policy": order_policy,
            "seed": seed,
            "conditions": list(conditions),
        }
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for condition in conditions:
            for e in examples:
                row = {
                    "example_id": e.id,
                    "condition": condition,
                    "prompt": condition_prompt(e, condition, order_policy, seed),
                }
                fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False,
                                    separators=(",", ":")) + "\n")
                count += 1
    return count


def read_predictions(path: str | Path) -> FileBackend:
    """Parse prediction rows; lines without example_id (headers) are skipped."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"predictions file not found: {path}")
    table: dict[tuple[str, str], str] = {}
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict) or "example_id" not in obj:
                continue
            for key in ("condition", "prediction"):
                if key not in obj:
                    raise DataError(f"{path}: line {lineno}: missing field {key}")
            key = (str(obj["condition"]), str(obj["example_id"]))
            if key in table:
                raise DataError(
                    f"{path}: line {lineno}: duplicate prediction for "
                    f"{key[1]} under {key[0]}"
                )
            table[key] = str(obj["prediction"])
    if not table:
        raise DataError(f"{path}: no prediction rows found")
    return FileBackend(table=table)


def write_predictions(
    report: EvalReport, path: str | Path, order_policy: str = "noise_first", seed: int = 0
) -> None:
    """Dump per-example predictions with their scores, importable later."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        header = {
            "format_version": PROMPTS_FORMAT_VERSION,
            "order_policy": order_policy,
            "seed": seed,
        }
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for condition in report.table.labels:
            for s in report.scored[condition]:
                row = {
                    "example_id": s.example_id,
                    "condition": condition,
                    "prediction": s.prediction,
                    "em": s.em,
                    "f1": s.f1,
                }
                fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False,
                                    separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# Representation export


def export_representations(
    params: ModelParams,
    vocab: Vocab,
    examples: Sequence[BenchmarkExample],
    path: str | Path,
    order_policy: str = "noise_first",
    seed: int = 0,
) -> int:
    """Final-input-position hidden states, one row per (example, kind)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for e in examples:
            for kind in NoiseKind:
                prompt = assemble_prompt(e, kind, order_policy, seed)
                vec = prompt_hidden(params, encode_prompt(vocab, prompt))
                row = {
                    "example_id": e.id,
                    "kind": int(kind),
                    "vector": [float(v) for v in vec],
                }
                fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
                count += 1
    return count


# ---------------------------------------------------------------------------
# Ablations


@dataclass
class AblationResult:
    reports: dict[str, EvalReport]
    stats: dict[str, dict[str, int]] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        out: dict = {}
        for mode, report in self.reports.items():
            out[mode] = report.to_json_dict()
            if mode in self.stats:
                out[mode]["selection_counts"] = self.stats[mode]
        return out


def ablation_suite(
    train_examples: Sequence[BenchmarkExample],
    eval_examples: Sequence[BenchmarkExample],
    base_config: TrainConfig,
    modes: Sequence[str] = ("raat", "raat_no_cls", "raat_no_reg"),
    max_len: int = 8,
) -> AblationResult:
    """Train each ablation from one shared init/vocab and evaluate all alike."""
    vocab = build_vocab(vocab_corpus(list(train_examples)), min_freq=base_config.min_freq)
    init = init_params(
        len(vocab), base_config.embed_dim, base_config.hidden_dim, base_config.seed
    )
    reports: dict[str, EvalReport] = {}
    stats: dict[str, dict[str, int]] = {}
    for mode in modes:
        config = replace(base_config, mode=mode)
        result = train(train_examples, config, vocab=vocab, params=init.copy())
        reports[mode] = evaluate_model(
            result.params,
            result.vocab,
            eval_examples,
            order_policy=config.order_policy,
            seed=config.seed,
            max_len=max_len,
            with_cls=mode != "raat_no_cls",
        )
        stats[mode] = result.stats.to_json_dict()
    return AblationResult(reports=reports, stats=stats)


def write_eval_report(
    report: EvalReport, json_path: str | Path, tsv_path: str | Path | None = None
) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(
        json.dumps(report.to_json_dict(), sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    if tsv_path is not None:
        tsv_path = Path(tsv_path)
        tsv_path.parent.mkdir(parents=True, exist_ok=True)
        tsv_path.write_text(report.table.to_tsv(), encoding="utf-8")
