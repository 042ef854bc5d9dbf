"""Desk-scale laboratory for noise-robust retrieval-augmented QA.

Builds benchmarks whose every question carries a golden context plus three
controlled noise contexts, trains a tiny exactly-differentiated language
model under an adaptive worst-case objective (and four reference regimes),
and scores everything with standard answer-overlap metrics.
"""

from .bench import (
    CONDITION_KINDS,
    CONDITION_ORDER,
    Bench,
    BenchmarkExample,
    BenchmarkSplit,
    NoiseKind,
    Passage,
    Provenance,
    QueryRecord,
    SplitSizes,
    build_benchmark,
    contains_answer,
    generate_synthetic,
    ingest_retrieval_file,
    load_bench_dir,
)
from .errors import DataError, NumericError, UsageError
from .evaluation import EvalReport, evaluate, evaluate_model, export_prompts
from .metrics import (
    ConditionTable,
    ScoredPrediction,
    exact_match,
    f1_score,
    normalize_answer,
)
from .model import (
    ModelParams,
    Vocab,
    build_vocab,
    gradient_check,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    LossBreakdown,
    RaatTrainer,
    SelectionStats,
    StepRecord,
    TrainConfig,
    TrainResult,
    assemble_prompt,
    classification_accuracy,
    combine_losses,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Bench",
    "BenchmarkExample",
    "BenchmarkSplit",
    "CONDITION_KINDS",
    "CONDITION_ORDER",
    "ConditionTable",
    "DataError",
    "EvalReport",
    "LossBreakdown",
    "ModelParams",
    "NoiseKind",
    "NumericError",
    "Passage",
    "Provenance",
    "QueryRecord",
    "RaatTrainer",
    "ScoredPrediction",
    "SelectionStats",
    "SplitSizes",
    "StepRecord",
    "TrainConfig",
    "TrainResult",
    "UsageError",
    "Vocab",
    "assemble_prompt",
    "build_benchmark",
    "build_vocab",
    "classification_accuracy",
    "combine_losses",
    "contains_answer",
    "evaluate",
    "evaluate_model",
    "exact_match",
    "export_prompts",
    "f1_score",
    "generate_synthetic",
    "gradient_check",
    "ingest_retrieval_file",
    "init_params",
    "load_bench_dir",
    "load_checkpoint",
    "normalize_answer",
    "save_checkpoint",
    "train",
    "__version__",
]
