"""Training regimes for the noise-robust QA model.

The adaptive regime forwards each example under all four context kinds,
steps hardest on the worst-case kind while a spread penalty pulls the
easiest kind toward it, and trains a context-kind classifier alongside.
Four reference regimes (golden-only, a random-append recipe, raw retrieval,
and train-on-everything) share the same model, data, and update budget so
comparisons isolate the objective.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .bench import CONDITION_KINDS, BenchmarkExample, NoiseKind, QueryRecord
from .errors import DataError, NumericError, UsageError
from .model import (
    BOS_ID,
    EOS_ID,
    SEP_ID,
    ModelParams,
    Vocab,
    accumulate_gradients,
    build_vocab,
    classify,
    forward_sample,
    generate,
    init_params,
)
from .seeding import rng

MODES = (
    "raat",
    "raat_no_cls",
    "raat_no_reg",
    "golden",
    "retrobust",
    "retrieved",
    "multiple",
)
ADAPTIVE_MODES = ("raat", "raat_no_cls", "raat_no_reg")
ORDER_POLICIES = ("noise_first", "golden_first", "shuffled")
SEP_TEXT = "[SEP]"


@dataclass
class TrainConfig:
    mode: str = "raat"
    w_reg: float = 0.1
    w_ada: float = 2.0
    w_cls: float = 1.0
    lr: float = 0.1
    epochs: int = 2
    grad_clip_norm: float | None = 1.0
    seed: int = 0
    order_policy: str = "noise_first"
    embed_dim: int = 32
    hidden_dim: int = 64
    min_freq: int = 1

    def validate(self) -> None:
        if self.mode not in MODES:
            raise UsageError(f"mode must be one of {', '.join(MODES)}; got '{self.mode}'")
        if self.order_policy not in ORDER_POLICIES:
            raise UsageError(
                f"order_policy must be one of {', '.join(ORDER_POLICIES)}; "
                f"got '{self.order_policy}'"
            )
        if self.lr <= 0:
            raise UsageError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise UsageError(f"epochs must be >= 1, got {self.epochs}")
        for name in ("w_reg", "w_ada", "w_cls"):
            if getattr(self, name) < 0:
                raise UsageError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise UsageError(
                f"grad_clip_norm must be positive or null, got {self.grad_clip_norm}"
            )
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise UsageError("embed_dim and hidden_dim must be >= 1")
        if self.min_freq < 1:
            raise UsageError(f"min_freq must be >= 1, got {self.min_freq}")

    def effective_weights(self) -> tuple[float, float, float]:
        """(w_ada, w_reg, w_cls) after ablation zeroing for the mode."""
        w_cls = 0.0 if self.mode == "raat_no_cls" else self.w_cls
        w_reg = 0.0 if self.mode == "raat_no_reg" else self.w_reg
        return self.w_ada, w_reg, w_cls

    @staticmethod
    def field_names() -> tuple[str, ...]:
        return tuple(f.name for f in fields(TrainConfig))

    def to_json_dict(self) -> dict:
        return {name: getattr(self, name) for name in self.field_names()}


def config_from_dict(obj: Mapping[str, object], base: TrainConfig | None = None) -> TrainConfig:
    valid = TrainConfig.field_names()
    unknown = sorted(set(obj) - set(valid))
    if unknown:
        raise UsageError(
            f"unknown config keys: {', '.join(unknown)} (valid: {', '.join(valid)})"
        )
    cfg = replace(base or TrainConfig(), **dict(obj))
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# Prompts and encoding


def assemble_prompt(
    example: BenchmarkExample,
    kind: NoiseKind,
    order_policy: str = "noise_first",
    seed: int = 0,
) -> str:
    """Context(s) and question joined by the separator literal.

    The golden kind is the bare golden prompt; the noise kinds add the noise
    passage either before or after the golden one, per the order policy.
    """
    golden = example.golden.text
    if kind is NoiseKind.GOLDEN:
        return f"{golden} {SEP_TEXT} {example.question}"
    noise = example.context(kind).text
    if order_policy == "noise_first":
        noise_first = True
    elif order_policy == "golden_first":
        noise_first = False
    elif order_policy == "shuffled":
        coin = rng(seed, example.id, "order", int(kind)).integers(2)
        noise_first = coin == 0
    else:
        raise UsageError(f"unknown order_policy '{order_policy}'")
    first, second = (noise, golden) if noise_first else (golden, noise)
    return f"{first} {SEP_TEXT} {second} {SEP_TEXT} {example.question}"


def condition_prompt(
    example: BenchmarkExample,
    condition: str,
    order_policy: str = "noise_first",
    seed: int = 0,
) -> str:
    if condition not in CONDITION_KINDS:
        raise UsageError(
            f"condition must be one of {', '.join(CONDITION_KINDS)}; got '{condition}'"
        )
    return assemble_prompt(example, CONDITION_KINDS[condition], order_policy, seed)


def encode_prompt(vocab: Vocab, prompt: str) -> list[int]:
    """Begin marker, prompt tokens, and a trailing separator that both marks
    'answer now' and anchors the kind classifier."""
    return [BOS_ID] + vocab.encode(prompt) + [SEP_ID]


def encode_answer(vocab: Vocab, answer: str) -> list[int]:
    ids = vocab.encode(answer)
    if not ids:
        raise DataError(f"answer {answer!r} tokenizes to nothing")
    return ids + [EOS_ID]


def predict_answer(
    params: ModelParams,
    vocab: Vocab,
    example: BenchmarkExample,
    condition: str,
    order_policy: str = "noise_first",
    seed: int = 0,
    max_len: int = 8,
) -> str:
    prompt = condition_prompt(example, condition, order_policy, seed)
    return vocab.decode(generate(params, encode_prompt(vocab, prompt), max_len=max_len))


# ---------------------------------------------------------------------------
# Loss combination


@dataclass
class LossBreakdown:
    gen_losses: dict[NoiseKind, float]
    max_kind: NoiseKind
    min_kind: NoiseKind
    l_reg: float
    l_ada: float
    l_cls: float
    l_raat: float


def combine_losses(
    gen_losses: Mapping[NoiseKind, float],
    l_cls: float,
    w_ada: float,
    w_reg: float,
    w_cls: float,
) -> LossBreakdown:
    """Worst-case generation loss, squared max-min spread, and the total.

    Ties on max/min resolve to the lowest kind label so logs are stable.
    """
    kinds = list(NoiseKind)
    max_kind = min_kind = kinds[0]
    for kind in kinds[1:]:
        if gen_losses[kind] > gen_losses[max_kind]:
            max_kind = kind
        if gen_losses[kind] < gen_losses[min_kind]:
            min_kind = kind
    l_max = gen_losses[max_kind]
    l_min = gen_losses[min_kind]
    l_reg = (l_max - l_min) ** 2
    l_ada = l_max + w_reg * l_reg
    l_raat = w_ada * l_ada + w_cls * l_cls
    return LossBreakdown(
        gen_losses=dict(gen_losses),
        max_kind=max_kind,
        min_kind=min_kind,
        l_reg=l_reg,
        l_ada=l_ada,
        l_cls=l_cls,
        l_raat=l_raat,
    )


# ---------------------------------------------------------------------------
# Step records and selection stats


@dataclass
class StepRecord:
    step: int
    example_id: str
    mode: str
    gen_losses: dict[str, float | None]
    max_kind: str
    min_kind: str
    l_reg: float
    l_ada: float
    l_cls: float | None
    l_raat: float
    grad_norm: float

    def to_json_dict(self) -> dict:
        return {
            "step": self.step,
            "example_id": self.example_id,
            "mode": self.mode,
            "gen_losses": self.gen_losses,
            "max_kind": self.max_kind,
            "min_kind": self.min_kind,
            "l_reg": self.l_reg,
            "l_ada": self.l_ada,
            "l_cls": self.l_cls,
            "l_raat": self.l_raat,
            "grad_norm": self.grad_norm,
        }


def write_step_log(records: Sequence[StepRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_dict(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


@dataclass
class SelectionStats:
    """How often each context kind drove an update."""

    counts: dict[NoiseKind, int] = field(
        default_factory=lambda: {kind: 0 for kind in NoiseKind}
    )

    def bump(self, kind: NoiseKind, by: int = 1) -> None:
        self.counts[kind] += by

    def total(self) -> int:
        return sum(self.counts.values())

    def to_json_dict(self) -> dict:
        return {kind.wire_name: self.counts[kind] for kind in NoiseKind}


# ---------------------------------------------------------------------------
# Parameter updates


def _check_finite(value: float, what: str, example_id: str) -> None:
    if not np.isfinite(value):
        raise NumericError(f"{what} became non-finite on example {example_id}")


def _apply_update(
    params: ModelParams, grads: ModelParams, config: TrainConfig, example_id: str
) -> float:
    """Clip globally, descend, and return the pre-clip gradient norm."""
    norm = grads.l2_norm()
    _check_finite(norm, "gradient norm", example_id)
    clip = config.grad_clip_norm
    if clip is not None and norm > clip:
        grads.scale(clip / norm)
    params.add_scaled(grads, -config.lr)
    if not params.allfinite():
        raise NumericError(f"parameters became non-finite on example {example_id}")
    return norm


def raat_step(
    params: ModelParams,
    vocab: Vocab,
    example: BenchmarkExample,
    config: TrainConfig,
    step: int,
    stats: SelectionStats | None = None,
) -> StepRecord:
    """One adaptive update: forward all four kinds, weight the worst hardest.

    The per-kind generation weights are the exact derivative of
    w_ada * (L_max + w_reg * (L_max - L_min)^2) through the selected max/min,
    and every kind shares an equal slice of the classification weight.
    """
    w_ada, w_reg, w_cls = config.effective_weights()
    answer_ids = encode_answer(vocab, example.answers[0])

    samples = {}
    gen_losses: dict[NoiseKind, float] = {}
    for kind in NoiseKind:
        prompt = assemble_prompt(example, kind, config.order_policy, config.seed)
        sample = forward_sample(
            params, encode_prompt(vocab, prompt), answer_ids, int(kind) - 1
        )
        _check_finite(sample.gen_loss, f"{kind.wire_name} generation loss", example.id)
        _check_finite(sample.cls_loss, f"{kind.wire_name} classification loss", example.id)
        samples[kind] = sample
        gen_losses[kind] = sample.gen_loss

    l_cls = sum(s.cls_loss for s in samples.values()) / len(samples)
    breakdown = combine_losses(gen_losses, l_cls, w_ada, w_reg, w_cls)

    spread = breakdown.gen_losses[breakdown.max_kind] - breakdown.gen_losses[breakdown.min_kind]
    gen_weights = {kind: 0.0 for kind in NoiseKind}
    gen_weights[breakdown.max_kind] += w_ada * (1.0 + 2.0 * w_reg * spread)
    gen_weights[breakdown.min_kind] += -w_ada * 2.0 * w_reg * spread

    grads = params.zeros_like()
    for kind, sample in samples.items():
        accumulate_gradients(
            params, sample, grads, w_gen=gen_weights[kind], w_cls=w_cls / len(samples)
        )
    grad_norm = _apply_update(params, grads, config, example.id)

    if stats is not None:
        stats.bump(breakdown.max_kind)
    return StepRecord(
        step=step,
        example_id=example.id,
        mode=config.mode,
        gen_losses={kind.wire_name: gen_losses[kind] for kind in NoiseKind},
        max_kind=breakdown.max_kind.wire_name,
        min_kind=breakdown.min_kind.wire_name,
        l_reg=breakdown.l_reg,
        l_ada=breakdown.l_ada,
        l_cls=breakdown.l_cls,
        l_raat=breakdown.l_raat,
        grad_norm=grad_norm,
    )


def _passage_kind(passage) -> NoiseKind:
    """Attribute a raw passage: answer-bearing counts as golden, else relevant."""
    return NoiseKind.GOLDEN if passage.has_answer else NoiseKind.RELEVANT


def _single_prompt_update(
    params: ModelParams,
    vocab: Vocab,
    example: BenchmarkExample,
    prompt: str,
    config: TrainConfig,
) -> tuple[float, float]:
    answer_ids = encode_answer(vocab, example.answers[0])
    sample = forward_sample(params, encode_prompt(vocab, prompt), answer_ids, 0)
    _check_finite(sample.gen_loss, "generation loss", example.id)
    grads = params.zeros_like()
    accumulate_gradients(params, sample, grads, w_gen=1.0, w_cls=0.0)
    return sample.gen_loss, _apply_update(params, grads, config, example.id)


def _noisy_prompt(example: BenchmarkExample, noise_text: str, config: TrainConfig) -> str:
    if config.order_policy == "golden_first":
        first, second = example.golden.text, noise_text
    else:
        # The shuffled policy is a per-kind coin for the fixed taxonomy; for
        # free-form passages fall back to noise-first.
        first, second = noise_text, example.golden.text
    return f"{first} {SEP_TEXT} {second} {SEP_TEXT} {example.question}"


def baseline_step(
    params: ModelParams,
    vocab: Vocab,
    example: BenchmarkExample,
    config: TrainConfig,
    step: int,
    epoch: int,
    record: QueryRecord | None,
    stats: SelectionStats | None = None,
) -> StepRecord:
    """One update for the non-adaptive regimes (generation loss only)."""
    mode = config.mode
    gen_losses: dict[str, float | None] = {kind.wire_name: None for kind in NoiseKind}

    if mode == "golden":
        prompt = assemble_prompt(example, NoiseKind.GOLDEN, config.order_policy, config.seed)
        loss, grad_norm = _single_prompt_update(params, vocab, example, prompt, config)
        gen_losses[NoiseKind.GOLDEN.wire_name] = loss
        trained = [NoiseKind.GOLDEN]

    elif mode == "retrobust":
        if record is None:
            raise DataError(
                f"mode retrobust needs the source retrieval record for example {example.id}"
            )
        branch = int(rng(config.seed, example.id, "retrobust", epoch).integers(3))
        if branch == 0:
            passage = record.passages[0]
            attributed = _passage_kind(passage)
        elif branch == 1:
            passage = record.passages[-1]
            attributed = _passage_kind(passage)
        else:
            passage = example.irrelevant_noise
            attributed = NoiseKind.IRRELEVANT
        prompt = _noisy_prompt(example, passage.text, config)
        loss, grad_norm = _single_prompt_update(params, vocab, example, prompt, config)
        gen_losses[attributed.wire_name] = loss
        trained = [attributed]

    elif mode == "retrieved":
        if record is None:
            raise DataError(
                f"mode retrieved needs the source retrieval record for example {example.id}"
            )
        if len(record.passages) < 2:
            raise DataError(f"example {example.id}: retrieved mode needs >= 2 passages")
        top_two = record.passages[:2]
        prompt = (
            f"{top_two[0].text} {SEP_TEXT} {top_two[1].text} {SEP_TEXT} {example.question}"
        )
        loss, grad_norm = _single_prompt_update(params, vocab, example, prompt, config)
        trained = [_passage_kind(p) for p in top_two]
        gen_losses[trained[0].wire_name] = loss

    elif mode == "multiple":
        norms: list[float] = []
        for kind in NoiseKind:
            prompt = assemble_prompt(example, kind, config.order_policy, config.seed)
            loss, norm = _single_prompt_update(params, vocab, example, prompt, config)
            norms.append(norm)
            gen_losses[kind.wire_name] = loss
        grad_norm = float(np.mean(norms))
        trained = list(NoiseKind)

    else:
        raise UsageError(f"mode '{mode}' is not a baseline mode")

    if stats is not None:
        for kind in trained:
            stats.bump(kind)
    measured = {k: gen_losses[k.wire_name] for k in NoiseKind if gen_losses[k.wire_name] is not None}
    max_kind = max(measured, key=lambda k: (measured[k], -int(k)))
    min_kind = min(measured, key=lambda k: (measured[k], int(k)))
    l_ada = float(np.mean(list(measured.values())))
    return StepRecord(
        step=step,
        example_id=example.id,
        mode=mode,
        gen_losses=gen_losses,
        max_kind=max_kind.wire_name,
        min_kind=min_kind.wire_name,
        l_reg=0.0,
        l_ada=l_ada,
        l_cls=None,
        l_raat=l_ada,
        grad_norm=grad_norm,
    )


# ---------------------------------------------------------------------------
# The training loop


def vocab_corpus(examples: Sequence[BenchmarkExample]) -> list[str]:
    texts: list[str] = []
    for e in examples:
        texts.append(e.question)
        texts.extend(e.answers)
        for kind in NoiseKind:
            texts.append(e.context(kind).text)
    return texts


@dataclass
class TrainResult:
    params: ModelParams
    vocab: Vocab
    config: TrainConfig
    steps: list[StepRecord]
    stats: SelectionStats


def check_examples(X: Sequence) -> list[BenchmarkExample]:
    if not isinstance(X, (list, tuple)):
        raise DataError("training data must be a list of benchmark examples")
    if not X:
        raise DataError("training data is empty")
    for i, item in enumerate(X):
        if not isinstance(item, BenchmarkExample):
            raise DataError(f"training item {i} is {type(item).__name__}, not a benchmark example")
    return list(X)


def train(
    examples: Sequence[BenchmarkExample],
    config: TrainConfig,
    records: Mapping[str, QueryRecord] | None = None,
    vocab: Vocab | None = None,
    params: ModelParams | None = None,
    progress: Callable[[StepRecord], None] | None = None,
) -> TrainResult:
    """Run the configured regime over the examples for config.epochs passes.

    The per-epoch visit order is a seeded shuffle; vocab and initial weights
    may be passed in so ablations share an identical starting point.
    """
    examples = check_examples(examples)
    config.validate()
    if config.mode in ("retrobust", "retrieved"):
        if records is None:
            raise DataError(f"mode {config.mode} needs the source retrieval records")
        missing = [e.id for e in examples if e.id not in records]
        if missing:
            raise DataError(
                f"mode {config.mode}: no retrieval record for example(s) "
                + ", ".join(missing[:5])
            )
    if vocab is None:
        vocab = build_vocab(vocab_corpus(examples), min_freq=config.min_freq)
    if params is None:
        params = init_params(len(vocab), config.embed_dim, config.hidden_dim, config.seed)
    elif params.vocab_size != len(vocab):
        raise DataError("provided params do not match the vocab size")

    adaptive = config.mode in ADAPTIVE_MODES
    stats = SelectionStats()
    steps: list[StepRecord] = []
    step = 0
    for epoch in range(config.epochs):
        order = rng(config.seed, "epoch-order", epoch).permutation(len(examples))
        for idx in order:
            example = examples[int(idx)]
            if adaptive:
                rec = raat_step(params, vocab, example, config, step, stats)
            else:
                rec = baseline_step(
                    params,
                    vocab,
                    example,
                    config,
                    step,
                    epoch,
                    records.get(example.id) if records else None,
                    stats,
                )
            steps.append(rec)
            if progress is not None:
                progress(rec)
            step += 1
    return TrainResult(params=params, vocab=vocab, config=config, steps=steps, stats=stats)


def classification_accuracy(
    params: ModelParams,
    vocab: Vocab,
    examples: Sequence[BenchmarkExample],
    order_policy: str = "noise_first",
    seed: int = 0,
) -> float:
    """Fraction of (example, kind) prompts whose kind the head identifies."""
    if not examples:
        raise DataError("cannot score classification accuracy on no examples")
    hits = 0
    for example in examples:
        for kind in NoiseKind:
            prompt = assemble_prompt(example, kind, order_policy, seed)
            logits = classify(params, encode_prompt(vocab, prompt))
            hits += int(np.argmax(logits)) == int(kind) - 1
    return hits / (len(examples) * len(NoiseKind))


# ---------------------------------------------------------------------------
# Estimator wrapper


class RaatTrainer(BaseEstimator):
    """Scikit-learn style wrapper over the training loop.

    ``fit`` takes a list of benchmark examples, ``predict`` greedy-decodes
    answers under a chosen evaluation condition. Hyperparameters mirror
    TrainConfig so ``get_params``/``set_params``/``clone`` drive ablations.
    """

    def __init__(
        self,
        mode: str = "raat",
        w_reg: float = 0.1,
        w_ada: float = 2.0,
        w_cls: float = 1.0,
        lr: float = 0.1,
        epochs: int = 2,
        grad_clip_norm: float | None = 1.0,
        seed: int = 0,
        order_policy: str = "noise_first",
        embed_dim: int = 32,
        hidden_dim: int = 64,
        min_freq: int = 1,
    ):
        self.mode = mode
        self.w_reg = w_reg
        self.w_ada = w_ada
        self.w_cls = w_cls
        self.lr = lr
        self.epochs = epochs
        self.grad_clip_norm = grad_clip_norm
        self.seed = seed
        self.order_policy = order_policy
        self.embed_dim = embed_dim
        self.hidden_dim = hidden_dim
        self.min_freq = min_freq

    def _config(self) -> TrainConfig:
        return config_from_dict(self.get_params())

    def fit(self, X, y=None, records: Mapping[str, QueryRecord] | None = None):
        result = train(X, self._config(), records=records)
        self.model_ = result.params
        self.vocab_ = result.vocab
        self.config_ = result.config
        self.steps_ = result.steps
        self.stats_ = result.stats
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise DataError("this trainer has not been fitted yet")

    def predict(self, X, condition: str = "golden_only", max_len: int = 8) -> list[str]:
        self._check_fitted()
        return [
            predict_answer(
                self.model_,
                self.vocab_,
                example,
                condition,
                order_policy=self.config_.order_policy,
                seed=self.config_.seed,
                max_len=max_len,
            )
            for example in check_examples(X)
        ]

    def classification_accuracy(self, X) -> float:
        self._check_fitted()
        return classification_accuracy(
            self.model_,
            self.vocab_,
            check_examples(X),
            order_policy=self.config_.order_policy,
            seed=self.config_.seed,
        )
