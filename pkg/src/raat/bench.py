"""Benchmark construction for noise-robust retrieval-augmented QA.

Takes QA queries with ranked retrieved passages and manufactures, per query,
a golden context plus three noise contexts: a superficially relevant passage
without the answer, a random passage from another query, and a copy of a
golden passage with its answer entity swapped for a wrong one. Also ships a
fully synthetic QA generator so the whole pipeline can run hermetically.
"""

from __future__ import annotations

import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DataError
from .metrics import normalize_answer
from .seeding import rng

DATASET_TAGS = ("NQ", "TriviaQA", "WebQ", "SYNTH")
SPLIT_NAMES = ("train", "validation", "test")


class NoiseKind(IntEnum):
    """The four augmentation kinds, with frozen integer labels."""

    GOLDEN = 1
    RELEVANT = 2
    IRRELEVANT = 3
    COUNTERFACTUAL = 4

    @property
    def wire_name(self) -> str:
        return self.name.lower()


# Evaluation condition names, in report display order: the bare golden prompt,
# then golden plus each noise kind (irrelevant, relevant, counterfactual).
CONDITION_ORDER = ("golden_only", "golden_ci", "golden_cr", "golden_cc")
CONDITION_KINDS = {
    "golden_only": NoiseKind.GOLDEN,
    "golden_ci": NoiseKind.IRRELEVANT,
    "golden_cr": NoiseKind.RELEVANT,
    "golden_cc": NoiseKind.COUNTERFACTUAL,
}


def _norm_tokens(text: str) -> list[str]:
    return normalize_answer(text).split()


def _is_sublist(needle: list[str], haystack: list[str]) -> bool:
    if not needle:
        return False
    n = len(needle)
    return any(haystack[i : i + n] == needle for i in range(len(haystack) - n + 1))


def contains_answer(text: str, answers: Sequence[str]) -> bool:
    """True iff some gold alias occurs in the text after normalization.

    Both sides are normalized and the match is on contiguous token sequences,
    so punctuation and articles never mask or fake a hit.
    """
    tokens = _norm_tokens(text)
    return any(_is_sublist(_norm_tokens(a), tokens) for a in answers)


@dataclass
class Passage:
    """One retrieved passage. rank 1 is the retriever's top hit."""

    text: str
    rank: int
    has_answer: bool
    source_query_id: str


@dataclass
class QueryRecord:
    """A question, its gold answer aliases, and its ranked retrieved passages."""

    id: str
    question: str
    answers: list[str]
    passages: list[Passage]
    dataset_tag: str

    def golden_count(self) -> int:
        return sum(1 for p in self.passages if p.has_answer)


@dataclass
class Provenance:
    seed: int
    irrelevant_source: str
    counterfactual_entity: str


@dataclass
class BenchmarkExample:
    """One query packaged with its golden context and three noise contexts."""

    id: str
    question: str
    answers: list[str]
    golden: Passage
    relevant_noise: Passage
    irrelevant_noise: Passage
    counterfactual_noise: Passage
    provenance: Provenance

    def context(self, kind: NoiseKind) -> Passage:
        return {
            NoiseKind.GOLDEN: self.golden,
            NoiseKind.RELEVANT: self.relevant_noise,
            NoiseKind.IRRELEVANT: self.irrelevant_noise,
            NoiseKind.COUNTERFACTUAL: self.counterfactual_noise,
        }[kind]

    def validate(self) -> None:
        if not contains_answer(self.golden.text, self.answers):
            raise DataError(f"example {self.id}: golden context lacks the answer")
        if contains_answer(self.relevant_noise.text, self.answers):
            raise DataError(f"example {self.id}: relevant noise contains the answer")
        if self.irrelevant_noise.source_query_id == self.id:
            raise DataError(f"example {self.id}: irrelevant noise drawn from the same query")
        if self.provenance.counterfactual_entity not in self.counterfactual_noise.text:
            raise DataError(f"example {self.id}: counterfactual noise lacks its substitute entity")
        if contains_answer(self.counterfactual_noise.text, self.answers):
            raise DataError(f"example {self.id}: counterfactual noise still contains a gold alias")


@dataclass
class BenchmarkSplit:
    name: str
    examples: list[BenchmarkExample]
    master_seed: int

    def validate(self) -> None:
        ids = [e.id for e in self.examples]
        if len(set(ids)) != len(ids):
            raise DataError(f"split {self.name}: duplicate example ids")


@dataclass
class SplitSizes:
    """Requested example counts per dataset tag."""

    train: int = 1500
    validation: int = 300
    test: int = 1000


# ---------------------------------------------------------------------------
# Ingestion


def _parse_record(obj: dict, lineno: int, where: str) -> QueryRecord:
    def fail(msg: str) -> DataError:
        return DataError(f"{where}line {lineno}: {msg}")

    for key in ("id", "question", "answers", "dataset", "passages"):
        if key not in obj:
            raise fail(f"missing field {key}")
    if not isinstance(obj["answers"], list) or not obj["answers"]:
        raise fail("field answers must be a non-empty list")
    answers = [str(a) for a in obj["answers"]]
    if any(not normalize_answer(a) for a in answers):
        raise fail("an answer normalizes to the empty string")
    tag = obj["dataset"]
    if tag not in DATASET_TAGS:
        raise fail(f"unknown dataset tag '{tag}'")
    if not isinstance(obj["passages"], list) or not obj["passages"]:
        raise fail("field passages must be a non-empty list")

    qid = str(obj["id"])
    passages: list[Passage] = []
    seen_ranks: set[int] = set()
    for p in obj["passages"]:
        if not isinstance(p, dict):
            raise fail("each passage must be an object")
        for key in ("text", "rank", "has_answer"):
            if key not in p:
                raise fail(f"passage missing field {key}")
        rank = p["rank"]
        if not isinstance(rank, int) or rank < 1:
            raise fail(f"passage rank must be an integer >= 1, got {rank!r}")
        if rank in seen_ranks:
            raise fail(f"duplicate passage rank {rank}")
        seen_ranks.add(rank)
        text = str(p["text"])
        passages.append(
            Passage(
                text=text,
                rank=rank,
                # Stored flags are advisory; recompute from the answers.
                has_answer=contains_answer(text, answers),
                source_query_id=qid,
            )
        )
    passages.sort(key=lambda p: p.rank)
    return QueryRecord(
        id=qid,
        question=str(obj["question"]),
        answers=answers,
        passages=passages,
        dataset_tag=tag,
    )


def parse_records(lines: Iterable[str], where: str = "") -> list[QueryRecord]:
    records: list[QueryRecord] = []
    seen_ids: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{where}line {lineno}: invalid JSON ({exc.msg})") from exc
        record = _parse_record(obj, lineno, where)
        if record.id in seen_ids:
            raise DataError(f"{where}line {lineno}: duplicate query id '{record.id}'")
        seen_ids.add(record.id)
        records.append(record)
    return records


def ingest_retrieval_file(path: str | Path) -> list[QueryRecord]:
    """Read one-JSON-object-per-line retrieval records, validating each line."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        return parse_records(fh, where=f"{path}: ")


def write_records(records: Sequence[QueryRecord], path: str | Path) -> None:
    """Write records back out in the ingestion schema."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            obj = {
                "id": r.id,
                "question": r.question,
                "answers": r.answers,
                "dataset": r.dataset_tag,
                "passages": [
                    {"text": p.text, "rank": p.rank, "has_answer": p.has_answer}
                    for p in r.passages
                ],
            }
            fh.write(json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


# ---------------------------------------------------------------------------
# Per-query construction ops


def filter_queries(records: Sequence[QueryRecord]) -> list[QueryRecord]:
    """Keep queries with at least two golden passages, preserving order."""
    return [r for r in records if r.golden_count() >= 2]


def select_golden(record: QueryRecord) -> Passage:
    """The answer-bearing passage with the smallest retriever rank."""
    for p in record.passages:
        if p.has_answer:
            return p
    raise DataError(f"query {record.id}: no golden passage")


def select_relevant_noise(record: QueryRecord) -> Passage:
    """The smallest-rank passage that lacks the answer (rank proxies pertinence)."""
    for p in record.passages:
        if not p.has_answer:
            return p
    raise DataError(f"query {record.id}: no relevant-noise candidate")


def select_irrelevant_noise(
    record: QueryRecord, corpus: Sequence[QueryRecord], seed: int
) -> Passage:
    """A uniformly drawn passage from the other queries' retrievals.

    Deterministic in (seed, record.id), independent of corpus iteration order
    beyond the corpus list itself.
    """
    pool = [p for r in corpus if r.id != record.id for p in r.passages]
    if not pool:
        raise DataError(f"query {record.id}: no other query to draw irrelevant noise from")
    gen = rng(seed, record.id, "irrelevant")
    return pool[int(gen.integers(len(pool)))]


def make_counterfactual(
    record: QueryRecord, entity_pool: Sequence[str], seed: int
) -> tuple[Passage, str]:
    """Copy one golden passage with every gold-alias occurrence replaced.

    The substitute entity is drawn from ``entity_pool``, rejecting entries
    that normalize to a gold alias (or to nothing). Replacement is plain
    case-insensitive string substitution of every occurrence. Returns the
    new passage and the substitute used.
    """
    goldens = [p for p in record.passages if p.has_answer]
    if len(goldens) < 2:
        raise DataError(f"query {record.id}: needs >= 2 golden passages for a counterfactual")
    candidates = [
        e
        for e in entity_pool
        if normalize_answer(e) and not contains_answer(e, record.answers)
    ]
    if not candidates:
        raise DataError(f"query {record.id}: entity pool exhausted of non-alias entities")
    gen = rng(seed, record.id, "counterfactual")
    source = goldens[int(gen.integers(len(goldens)))]
    substitute = candidates[int(gen.integers(len(candidates)))]

    text = source.text
    replaced = False
    for alias in sorted(record.answers, key=len, reverse=True):
        pattern = re.compile(re.escape(alias), re.IGNORECASE)
        text, count = pattern.subn(substitute.replace("\\", "\\\\"), text)
        replaced = replaced or count > 0
    if not replaced:
        raise DataError(f"query {record.id}: golden passage lacks answer span")
    if contains_answer(text, record.answers):
        raise DataError(f"query {record.id}: substitution left a gold alias in the text")
    return (
        Passage(text=text, rank=source.rank, has_answer=False, source_query_id=record.id),
        substitute,
    )


def _expand_record(
    record: QueryRecord,
    split_corpus: Sequence[QueryRecord],
    entity_pool: Sequence[str],
    master_seed: int,
) -> BenchmarkExample:
    golden = select_golden(record)
    relevant = select_relevant_noise(record)
    irrelevant = select_irrelevant_noise(record, split_corpus, master_seed)
    counterfactual, entity = make_counterfactual(record, entity_pool, master_seed)
    example = BenchmarkExample(
        id=record.id,
        question=record.question,
        answers=list(record.answers),
        golden=golden,
        relevant_noise=relevant,
        irrelevant_noise=irrelevant,
        counterfactual_noise=counterfactual,
        provenance=Provenance(
            seed=master_seed,
            irrelevant_source=irrelevant.source_query_id,
            counterfactual_entity=entity,
        ),
    )
    example.validate()
    return example


def resolve_workers(workers: int | None = None) -> int:
    """Worker count: explicit argument, else RAAT_THREADS (0 = auto), else 1."""
    if workers is None:
        raw = os.environ.get("RAAT_THREADS", "1")
        try:
            workers = int(raw)
        except ValueError:
            raise DataError(f"RAAT_THREADS must be an integer, got {raw!r}")
    if workers == 0:
        workers = os.cpu_count() or 1
    return max(1, workers)


def build_benchmark(
    records: Sequence[QueryRecord],
    sizes: SplitSizes,
    master_seed: int,
    workers: int | None = None,
) -> tuple[dict[str, BenchmarkSplit], dict[str, list[QueryRecord]]]:
    """Sample per-tag splits and expand each query into a BenchmarkExample.

    Splits are disjoint by construction: within each dataset tag the filtered
    records are shuffled once (seeded by tag) and partitioned into
    train / validation / test. Counterfactual substitutes come from the gold
    answers of the other queries in the same tag and split. Returns the
    splits plus the sampled source records per split.
    """
    filtered = filter_queries(records)
    by_tag: dict[str, list[QueryRecord]] = {}
    for r in filtered:
        by_tag.setdefault(r.dataset_tag, []).append(r)

    per_split_records: dict[str, list[QueryRecord]] = {name: [] for name in SPLIT_NAMES}
    wanted = {"train": sizes.train, "validation": sizes.validation, "test": sizes.test}
    for tag in (t for t in DATASET_TAGS if t in by_tag):
        tag_records = by_tag[tag]
        need = sizes.train + sizes.validation + sizes.test
        if need > len(tag_records):
            raise DataError(
                f"dataset {tag}: requested {need} examples but only "
                f"{len(tag_records)} filtered records are available"
            )
        order = rng(master_seed, tag, "split").permutation(len(tag_records))
        cursor = 0
        for name in SPLIT_NAMES:
            take = wanted[name]
            idx = order[cursor : cursor + take]
            per_split_records[name].extend(tag_records[i] for i in idx)
            cursor += take

    n_workers = resolve_workers(workers)
    splits: dict[str, BenchmarkSplit] = {}
    for name in SPLIT_NAMES:
        split_corpus = per_split_records[name]
        pools: dict[str, list[str]] = {}
        for record in split_corpus:
            pools[record.id] = [
                a
                for other in split_corpus
                if other.id != record.id and other.dataset_tag == record.dataset_tag
                for a in other.answers
            ]

        def expand(record: QueryRecord) -> BenchmarkExample:
            return _expand_record(record, split_corpus, pools[record.id], master_seed)

        if n_workers > 1 and len(split_corpus) > 1:
            with ThreadPoolExecutor(max_workers=n_workers) as pool:
                examples = list(pool.map(expand, split_corpus))
        else:
            examples = [expand(r) for r in split_corpus]
        split = BenchmarkSplit(name=name, examples=examples, master_seed=master_seed)
        split.validate()
        splits[name] = split

    all_ids = [e.id for s in splits.values() for e in s.examples]
    if len(set(all_ids)) != len(all_ids):
        raise DataError("example ids overlap across splits")
    return splits, per_split_records


# ---------------------------------------------------------------------------
# Synthetic corpus

_FILLER_WORDS = ("archive", "note", "sits", "near", "in", "the", "old", "index")


def generate_synthetic(n_queries: int, n_entities: int, seed: int) -> list[QueryRecord]:
    """A hermetic stand-in corpus of single-token-answer QA queries.

    Each query q<i> is linked to one entity a<j>; its ten passages hold two
    golden phrasings, two on-topic distractors that mention only b-entities,
    and six filler passages about other queries. Deterministic given seed.
    """
    if n_queries < 1:
        raise ValueError("n_queries must be >= 1")
    if n_entities < 4:
        raise ValueError("n_entities must be >= 4")

    records: list[QueryRecord] = []
    for i in range(n_queries):
        qid = f"synth-{i:05d}"
        gen = rng(seed, qid, "record")
        topic = f"q{i}"
        answer = f"a{int(gen.integers(n_entities))}"

        def distractor() -> str:
            return f"b{int(gen.integers(n_entities))}"

        def other_topic() -> str:
            if n_queries == 1:
                return topic
            m = int(gen.integers(n_queries - 1))
            if m >= i:
                m += 1
            return f"q{m}"

        on_topic = [
            f"{topic} is linked to {answer} indeed {answer}",
            f"the record for {topic} lists {answer} again {answer}",
            f"{topic} also mentions {distractor()} and {distractor()} but gives no direct "
            f"link for {topic} since {distractor()} and {distractor()} keep coming up "
            f"in loose notes about {distractor()}",
            f"{topic} also mentions {distractor()} among several unrelated notes on file "
            f"next to {distractor()} and {distractor()} though none of {distractor()} "
            f"or {distractor()} settle it",
        ]
        fillers = [
            f"archive note {other_topic()} sits near {distractor()} and {distractor()} "
            f"in the old index while {other_topic()} stays filed under {distractor()} "
            f"beside {distractor()} and a stray mention of {distractor()}"
            for _ in range(6)
        ]
        # On-topic passages outrank fillers, as a retriever would order them.
        top = gen.permutation(len(on_topic)) + 1
        bottom = gen.permutation(len(fillers)) + 1 + len(on_topic)
        texts = on_topic + fillers
        ranks = list(top) + list(bottom)
        answers = [answer]
        passages = [
            Passage(
                text=text,
                rank=int(rank),
                has_answer=contains_answer(text, answers),
                source_query_id=qid,
            )
            for text, rank in zip(texts, ranks)
        ]
        passages.sort(key=lambda p: p.rank)
        records.append(
            QueryRecord(
                id=qid,
                question=f"what is linked to {topic}",
                answers=answers,
                passages=passages,
                dataset_tag="SYNTH",
            )
        )
    return records


# ---------------------------------------------------------------------------
# Benchmark serialization

_EXAMPLE_KEYS = ("id", "question", "answers", "golden", "noise", "provenance")


def example_to_obj(example: BenchmarkExample) -> dict:
    return {
        "id": example.id,
        "question": example.question,
        "answers": example.answers,
        "golden": example.golden.text,
        "noise": {
            "relevant": example.relevant_noise.text,
            "irrelevant": example.irrelevant_noise.text,
            "counterfactual": example.counterfactual_noise.text,
        },
        "provenance": {
            "seed": example.provenance.seed,
            "irrelevant_source": example.provenance.irrelevant_source,
            "counterfactual_entity": example.provenance.counterfactual_entity,
        },
    }


def example_from_obj(obj: dict, lineno: int, where: str) -> BenchmarkExample:
    def fail(msg: str) -> DataError:
        return DataError(f"{where}line {lineno}: {msg}")

    for key in _EXAMPLE_KEYS:
        if key not in obj:
            raise fail(f"missing field {key}")
    if not isinstance(obj["noise"], dict):
        raise fail("field noise must be an object")
    if not isinstance(obj["provenance"], dict):
        raise fail("field provenance must be an object")
    for key in ("relevant", "irrelevant", "counterfactual"):
        if key not in obj["noise"]:
            raise fail(f"missing noise field {key}")
    for key in ("seed", "irrelevant_source", "counterfactual_entity"):
        if key not in obj["provenance"]:
            raise fail(f"missing provenance field {key}")

    eid = str(obj["id"])
    answers = [str(a) for a in obj["answers"]]
    if not answers:
        raise fail("field answers must be a non-empty list")
    prov = Provenance(
        seed=int(obj["provenance"]["seed"]),
        irrelevant_source=str(obj["provenance"]["irrelevant_source"]),
        counterfactual_entity=str(obj["provenance"]["counterfactual_entity"]),
    )

    def passage(text: str, source: str) -> Passage:
        return Passage(
            text=text,
            rank=1,
            has_answer=contains_answer(text, answers),
            source_query_id=source,
        )

    example = BenchmarkExample(
        id=eid,
        question=str(obj["question"]),
        answers=answers,
        golden=passage(str(obj["golden"]), eid),
        relevant_noise=passage(str(obj["noise"]["relevant"]), eid),
        irrelevant_noise=passage(str(obj["noise"]["irrelevant"]), prov.irrelevant_source),
        counterfactual_noise=passage(str(obj["noise"]["counterfactual"]), eid),
        provenance=prov,
    )
    try:
        example.validate()
    except DataError as exc:
        raise fail(str(exc)) from exc
    return example


def write_split(split: BenchmarkSplit, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for example in split.examples:
            fh.write(
                json.dumps(
                    example_to_obj(example), sort_keys=True, ensure_ascii=False,
                    separators=(",", ":"),
                )
            )
            fh.write("\n")


def load_split(path: str | Path, name: str = "", master_seed: int | None = None) -> BenchmarkSplit:
    """Parse one benchmark JSONL file, re-validating every example."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"benchmark file not found: {path}")
    examples: list[BenchmarkExample] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc
            examples.append(example_from_obj(obj, lineno, where=f"{path}: "))
    if master_seed is None:
        master_seed = examples[0].provenance.seed if examples else 0
    split = BenchmarkSplit(name=name or path.stem, examples=examples, master_seed=master_seed)
    split.validate()
    return split


@dataclass
class Bench:
    """A benchmark directory in memory: splits plus their source records."""

    splits: dict[str, BenchmarkSplit]
    records: dict[str, dict[str, QueryRecord]] = field(default_factory=dict)
    master_seed: int = 0

    def split(self, name: str) -> BenchmarkSplit:
        if name not in self.splits:
            raise DataError(f"benchmark has no '{name}' split")
        return self.splits[name]

    def records_for(self, name: str) -> dict[str, QueryRecord] | None:
        return self.records.get(name)


def write_bench_dir(
    out_dir: str | Path,
    splits: Mapping[str, BenchmarkSplit],
    records: Mapping[str, Sequence[QueryRecord]] | None = None,
    master_seed: int = 0,
) -> list[Path]:
    """Write split files, the sampled source records, and a meta file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for name, split in splits.items():
        path = out_dir / f"{name}.jsonl"
        write_split(split, path)
        written.append(path)
        if records is not None and name in records:
            rec_path = out_dir / "records" / f"{name}.jsonl"
            write_records(records[name], rec_path)
            written.append(rec_path)
    meta = {
        "master_seed": master_seed,
        "sizes": {name: len(split.examples) for name, split in splits.items()},
    }
    meta_path = out_dir / "meta.json"
    meta_path.write_text(
        json.dumps(meta, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    written.append(meta_path)
    return written


def load_bench_dir(bench_dir: str | Path) -> Bench:
    bench_dir = Path(bench_dir)
    if not bench_dir.is_dir():
        raise DataError(f"benchmark directory not found: {bench_dir}")
    meta_path = bench_dir / "meta.json"
    master_seed = 0
    if meta_path.exists():
        try:
            master_seed = int(json.loads(meta_path.read_text(encoding="utf-8"))["master_seed"])
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise DataError(f"{meta_path}: malformed meta file") from exc
    splits: dict[str, BenchmarkSplit] = {}
    records: dict[str, dict[str, QueryRecord]] = {}
    for name in SPLIT_NAMES:
        path = bench_dir / f"{name}.jsonl"
        if path.exists():
            splits[name] = load_split(path, name=name, master_seed=master_seed)
        rec_path = bench_dir / "records" / f"{name}.jsonl"
        if rec_path.exists():
            records[name] = {r.id: r for r in ingest_retrieval_file(rec_path)}
    if not splits:
        raise DataError(f"no split files found in {bench_dir}")
    all_ids = [e.id for s in splits.values() for e in s.examples]
    if len(set(all_ids)) != len(all_ids):
        raise DataError(f"{bench_dir}: example ids overlap across splits")
    return Bench(splits=splits, records=records, master_seed=master_seed)
