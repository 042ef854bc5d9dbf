"""Answer normalization and EM/F1 scoring with max-over-alias aggregation.

Normalization follows the standard open-domain QA recipe: lowercase, strip
ASCII punctuation, drop standalone articles, squeeze whitespace. F1 uses
multiset token overlap. Both scores take the max over gold aliases.
"""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Mapping, Sequence

# ASCII punctuation only, for bit-exact cross-platform behaviour:
# !"#$%&'()*+,-./:;<=>?@[\]^_`{|}~
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")


def normalize_answer(text: str) -> str:
    """Lowercase, remove punctuation, drop articles, collapse whitespace."""
    text = text.lower().translate(_PUNCT_TABLE)
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


def _require_golds(golds: Sequence[str]) -> None:
    if not golds:
        raise ValueError("golds must be non-empty")


def exact_match(prediction: str, golds: Sequence[str]) -> int:
    """1 iff the normalized prediction equals some normalized gold alias."""
    _require_golds(golds)
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in golds))


def _f1_single(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens and not gold_tokens:
        return 1.0
    overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1_score(prediction: str, golds: Sequence[str]) -> float:
    """Max over gold aliases of the multiset token-overlap F1."""
    _require_golds(golds)
    pred_tokens = normalize_answer(prediction).split()
    return max(_f1_single(pred_tokens, normalize_answer(g).split()) for g in golds)


@dataclass
class ScoredPrediction:
    """One scored model output. em=1 implies f1=1."""

    example_id: str
    prediction: str
    em: int
    f1: float


def score_prediction(example_id: str, prediction: str, golds: Sequence[str]) -> ScoredPrediction:
    return ScoredPrediction(
        example_id=example_id,
        prediction=prediction,
        em=exact_match(prediction, golds),
        f1=f1_score(prediction, golds),
    )


def round_half_up(value: float, places: int = 2) -> float:
    """Round half away from zero, as printed in result tables."""
    quantum = Decimal(1).scaleb(-places)
    return float(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))


@dataclass
class ConditionTable:
    """Mean F1/EM (percent) per evaluation condition plus the condition average.

    Cell values are kept unrounded; rounding happens only at display time.
    The average is the arithmetic mean of the unrounded condition means.
    """

    labels: tuple[str, ...]
    f1: dict[str, float]
    em: dict[str, float]
    avg_f1: float
    avg_em: float

    def to_json_dict(self) -> dict:
        out: dict = {}
        for label in self.labels:
            out[label] = {
                "f1": round_half_up(self.f1[label]),
                "em": round_half_up(self.em[label]),
            }
        out["avg"] = {"f1": round_half_up(self.avg_f1), "em": round_half_up(self.avg_em)}
        return out

    def to_tsv(self) -> str:
        lines = ["condition\tF1\tEM"]
        for label in self.labels:
            lines.append(
                f"{label}\t{round_half_up(self.f1[label]):.2f}\t{round_half_up(self.em[label]):.2f}"
            )
        lines.append(f"avg\t{round_half_up(self.avg_f1):.2f}\t{round_half_up(self.avg_em):.2f}")
        return "\n".join(lines) + "\n"


def aggregate(
    scored: Mapping[str, Sequence[ScoredPrediction]],
    labels: Sequence[str] | None = None,
) -> ConditionTable:
    """Per-condition percent means plus their average over conditions."""
    if labels is None:
        labels = tuple(scored.keys())
    f1_means: dict[str, float] = {}
    em_means: dict[str, float] = {}
    for label in labels:
        items = scored.get(label, [])
        if not items:
            raise ValueError(f"condition '{label}' has no scored predictions")
        f1_means[label] = 100.0 * sum(s.f1 for s in items) / len(items)
        em_means[label] = 100.0 * sum(s.em for s in items) / len(items)
    avg_f1 = sum(f1_means[label] for label in labels) / len(labels)
    avg_em = sum(em_means[label] for label in labels) / len(labels)
    return ConditionTable(tuple(labels), f1_means, em_means, avg_f1, avg_em)


def write_score_report(table: ConditionTable, json_path: Path, tsv_path: Path) -> None:
    """Write the JSON report and its TSV mirror."""
    json_path = Path(json_path)
    tsv_path = Path(tsv_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    tsv_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(
        json.dumps(table.to_json_dict(), sort_keys=True, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )
    tsv_path.write_text(table.to_tsv(), encoding="utf-8")
