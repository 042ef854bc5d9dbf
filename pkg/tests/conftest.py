import pytest

from raat.bench import SplitSizes, build_benchmark, generate_synthetic


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic(60, 20, seed=7)


@pytest.fixture(scope="session")
def small_bench(small_corpus):
    """30/10/15 splits plus the per-split source records, keyed by id."""
    splits, records = build_benchmark(
        small_corpus, SplitSizes(train=30, validation=10, test=15), master_seed=7
    )
    record_maps = {name: {r.id: r for r in recs} for name, recs in records.items()}
    return splits, record_maps


@pytest.fixture(scope="session")
def train_examples(small_bench):
    return small_bench[0]["train"].examples


@pytest.fixture(scope="session")
def test_examples(small_bench):
    return small_bench[0]["test"].examples


@pytest.fixture(scope="session")
def train_records(small_bench):
    return small_bench[1]["train"]
