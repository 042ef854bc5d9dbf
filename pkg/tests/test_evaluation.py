import json

import pytest

from raat.bench import CONDITION_ORDER, NoiseKind
from raat.errors import DataError
from raat.evaluation import (
    EvalReport,
    FileBackend,
    ModelBackend,
    ablation_suite,
    evaluate,
    evaluate_model,
    export_prompts,
    export_representations,
    read_predictions,
    write_eval_report,
    write_predictions,
)
from raat.training import TrainConfig, condition_prompt, train


@pytest.fixture(scope="module")
def trained(train_examples):
    config = TrainConfig(mode="raat", epochs=2, embed_dim=6, hidden_dim=8, lr=0.1, seed=0)
    return train(train_examples, config)


class TestEvaluate:
    def test_condition_order_default(self, trained, test_examples):
        report = evaluate_model(trained.params, trained.vocab, test_examples)
        assert tuple(report.table.labels) == CONDITION_ORDER
        assert report.n_examples == len(test_examples)
        assert report.cls_accuracy is not None

    def test_deterministic(self, trained, test_examples):
        a = evaluate_model(trained.params, trained.vocab, test_examples)
        b = evaluate_model(trained.params, trained.vocab, test_examples)
        assert a.table.to_json_dict() == b.table.to_json_dict()
        assert a.cls_accuracy == b.cls_accuracy

    def test_with_cls_off(self, trained, test_examples):
        report = evaluate_model(trained.params, trained.vocab, test_examples, with_cls=False)
        assert report.cls_accuracy is None
        assert "classification_accuracy" not in report.to_json_dict()

    def test_cls_percent_rounds_half_up(self, trained, test_examples):
        report = evaluate_model(trained.params, trained.vocab, test_examples[:1])
        report.cls_accuracy = 0.56625
        assert report.to_json_dict()["classification_accuracy"] == 56.63

    def test_empty_examples(self, trained):
        backend = ModelBackend(trained.params, trained.vocab)
        with pytest.raises(DataError, match="empty"):
            evaluate(backend, [])

    def test_unknown_condition(self, trained, test_examples):
        backend = ModelBackend(trained.params, trained.vocab)
        with pytest.raises(DataError, match="golden_cz"):
            evaluate(backend, test_examples, conditions=["golden_only", "golden_cz"])

    def test_perfect_file_backend_scores_100(self, test_examples):
        table = {
            (c, e.id): e.answers[0] for c in CONDITION_ORDER for e in test_examples
        }
        report = evaluate(FileBackend(table), test_examples)
        assert report.table.avg_em == 100.0
        assert report.table.avg_f1 == 100.0

    def test_file_backend_missing_ids(self, test_examples):
        table = {("golden_only", test_examples[0].id): "x"}
        with pytest.raises(DataError, match="lacks"):
            evaluate(FileBackend(table), test_examples, conditions=["golden_only"])


class TestPromptExport:
    def test_header_and_rows(self, test_examples, tmp_path):
        path = tmp_path / "prompts.jsonl"
        n = export_prompts(test_examples, path, order_policy="golden_first", seed=3)
        lines = path.read_text().splitlines()
        assert n == 4 * len(test_examples)
        assert len(lines) == n + 1
        header = json.loads(lines[0])
        assert header == {
            "format_version": 1,
            "order_policy": "golden_first",
            "seed": 3,
            "conditions": list(CONDITION_ORDER),
        }
        row = json.loads(lines[1])
        e = test_examples[0]
        assert row["example_id"] == e.id
        assert row["condition"] == "golden_only"
        assert row["prompt"] == condition_prompt(e, "golden_only", "golden_first", 3)

    def test_every_condition_present(self, test_examples, tmp_path):
        path = tmp_path / "prompts.jsonl"
        export_prompts(test_examples, path)
        rows = [json.loads(l) for l in path.read_text().splitlines()[1:]]
        by_condition = {c: 0 for c in CONDITION_ORDER}
        for r in rows:
            by_condition[r["condition"]] += 1
        assert set(by_condition.values()) == {len(test_examples)}


class TestPredictionRoundTrip:
    def test_export_fill_import_matches_model(self, trained, test_examples, tmp_path):
        report = evaluate_model(trained.params, trained.vocab, test_examples)
        pred_path = tmp_path / "preds.jsonl"
        write_predictions(report, pred_path)
        backend = read_predictions(pred_path)
        replayed = evaluate(backend, test_examples)
        assert replayed.table.to_json_dict() == report.table.to_json_dict()

    def test_header_line_skipped(self, tmp_path):
        path = tmp_path / "p.jsonl"
        rows = [
            {"format_version": 1, "seed": 0},
            {"example_id": "q1", "condition": "golden_only", "prediction": "x"},
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        backend = read_predictions(path)
        assert backend.table == {("golden_only", "q1"): "x"}

    def test_missing_field(self, tmp_path):
        path = tmp_path / "p.jsonl"
        path.write_text(json.dumps({"example_id": "q1", "condition": "golden_only"}) + "\n")
        with pytest.raises(DataError, match="line 1: missing field prediction"):
            read_predictions(path)

    def test_duplicate_row(self, tmp_path):
        path = tmp_path / "p.jsonl"
        row = {"example_id": "q1", "condition": "golden_only", "prediction": "x"}
        path.write_text(json.dumps(row) + "\n" + json.dumps(row) + "\n")
        with pytest.raises(DataError, match="line 2: duplicate"):
            read_predictions(path)

    def test_no_rows(self, tmp_path):
        path = tmp_path / "p.jsonl"
        path.write_text(json.dumps({"format_version": 1}) + "\n")
        with pytest.raises(DataError, match="no prediction rows"):
            read_predictions(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "p.jsonl"
        path.write_text("{nope\n")
        with pytest.raises(DataError, match="line 1: invalid JSON"):
            read_predictions(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            read_predictions(tmp_path / "absent.jsonl")


class TestRepresentations:
    def test_rows_shape_and_kinds(self, trained, test_examples, tmp_path):
        path = tmp_path / "reps.jsonl"
        n = export_representations(trained.params, trained.vocab, test_examples[:5], path)
        rows = [json.loads(l) for l in path.read_text().splitlines()]
        assert n == len(rows) == 5 * 4
        assert {r["kind"] for r in rows} == {1, 2, 3, 4}
        assert all(len(r["vector"]) == trained.params.w1.shape[0] for r in rows)

    def test_deterministic_bytes(self, trained, test_examples, tmp_path):
        paths = [tmp_path / "a.jsonl", tmp_path / "b.jsonl"]
        for p in paths:
            export_representations(trained.params, trained.vocab, test_examples[:3], p)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_vectors_vary_by_kind(self, trained, test_examples, tmp_path):
        path = tmp_path / "reps.jsonl"
        export_representations(trained.params, trained.vocab, test_examples[:1], path)
        rows = [json.loads(l) for l in path.read_text().splitlines()]
        vectors = {NoiseKind(r["kind"]): tuple(r["vector"]) for r in rows}
        assert len(set(vectors.values())) > 1


class TestAblationSuite:
    def test_modes_and_cls_flag(self, train_examples, test_examples):
        config = TrainConfig(epochs=1, embed_dim=6, hidden_dim=8, lr=0.1, seed=0)
        result = ablation_suite(train_examples, test_examples, config)
        assert list(result.reports) == ["raat", "raat_no_cls", "raat_no_reg"]
        assert result.reports["raat"].cls_accuracy is not None
        assert result.reports["raat_no_reg"].cls_accuracy is not None
        assert result.reports["raat_no_cls"].cls_accuracy is None
        for mode, counts in result.stats.items():
            assert sum(counts.values()) == len(train_examples)

    def test_deterministic(self, train_examples, test_examples):
        config = TrainConfig(epochs=1, embed_dim=6, hidden_dim=8, lr=0.1, seed=1)
        a = ablation_suite(train_examples, test_examples, config)
        b = ablation_suite(train_examples, test_examples, config)
        assert a.to_json_dict() == b.to_json_dict()

    def test_json_dict_carries_counts(self, train_examples, test_examples):
        config = TrainConfig(epochs=1, embed_dim=6, hidden_dim=8, lr=0.1, seed=0)
        result = ablation_suite(train_examples[:6], test_examples[:4], config)
        obj = result.to_json_dict()
        for mode in ("raat", "raat_no_cls", "raat_no_reg"):
            assert "selection_counts" in obj[mode]
            assert "conditions" in obj[mode]


class TestReportFiles:
    def test_json_and_tsv_written(self, trained, test_examples, tmp_path):
        report = evaluate_model(trained.params, trained.vocab, test_examples)
        json_path = tmp_path / "out" / "report.json"
        tsv_path = tmp_path / "out" / "report.tsv"
        write_eval_report(report, json_path, tsv_path)
        obj = json.loads(json_path.read_text())
        assert set(obj) == {"conditions", "n_examples", "classification_accuracy"}
        lines = tsv_path.read_text().splitlines()
        assert lines[0].split("\t")[0] == "condition"
        assert len(lines) == 1 + 4 + 1  # header, conditions, average row
