import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raat.metrics import (
    ConditionTable,
    aggregate,
    exact_match,
    f1_score,
    normalize_answer,
    round_half_up,
    score_prediction,
    write_score_report,
)

from .reference_scorer import reference_em, reference_f1, reference_normalize

TEXTS = st.text(
    alphabet=st.characters(min_codepoint=32, max_codepoint=126), max_size=40
)


class TestNormalize:
    @pytest.mark.parametrize(
        "raw,expected",
        [
            ("The Cat", "cat"),
            ("a  dog!!", "dog"),
            ("an apple; a day", "apple day"),
            ("Athens", "athens"),  # leading 'a' of a word is not an article
            ("U.S.A.", "usa"),
            ("  spaced   out  ", "spaced out"),
            ("", ""),
            ("the a an", ""),
        ],
    )
    def test_cases(self, raw, expected):
        assert normalize_answer(raw) == expected

    @given(TEXTS)
    def test_idempotent(self, text):
        once = normalize_answer(text)
        assert normalize_answer(once) == once

    @given(TEXTS)
    def test_matches_reference(self, text):
        assert normalize_answer(text) == reference_normalize(text)


class TestExactMatch:
    def test_alias_hit(self):
        assert exact_match("the Paris", ["Paris!", "City of Light"]) == 1

    def test_miss(self):
        assert exact_match("london", ["Paris"]) == 0

    def test_empty_both(self):
        assert exact_match("", ["the"]) == 1  # both normalize to ""

    def test_requires_golds(self):
        with pytest.raises(ValueError):
            exact_match("x", [])


class TestF1:
    def test_hand_computed_two_thirds(self):
        # pred {paris, france} vs gold {paris}: p=1/2, r=1, f1=2/3
        assert math.isclose(f1_score("Paris France", ["Paris"]), 2 / 3)

    def test_multiset_counts(self):
        # pred {x,x,y} vs gold {x,y,y}: overlap 2, p=2/3, r=2/3
        assert math.isclose(f1_score("x x y", ["x y y"]), 2 / 3)

    def test_best_alias_wins(self):
        assert f1_score("brooklyn bridge", ["golden gate", "the Brooklyn Bridge"]) == 1.0

    def test_both_empty(self):
        assert f1_score("an", ["a"]) == 1.0

    def test_one_empty(self):
        assert f1_score("", ["paris"]) == 0.0
        assert f1_score("paris", ["the"]) == 0.0

    @given(TEXTS, st.lists(TEXTS, min_size=1, max_size=3))
    @settings(deadline=None)
    def test_matches_reference(self, pred, golds):
        assert math.isclose(
            f1_score(pred, golds), reference_f1(pred, golds), abs_tol=1e-12
        )
        assert exact_match(pred, golds) == reference_em(pred, golds)

    @given(TEXTS, st.lists(TEXTS, min_size=1, max_size=3))
    @settings(deadline=None)
    def test_bounds_and_em_implies_f1(self, pred, golds):
        f1 = f1_score(pred, golds)
        assert 0.0 <= f1 <= 1.0
        if exact_match(pred, golds) == 1:
            assert f1 == 1.0


class TestRounding:
    @pytest.mark.parametrize(
        "value,places,expected",
        [
            (0.125, 2, 0.13),
            (2.675, 2, 2.68),
            (-0.125, 2, -0.13),
            (86.345, 2, 86.35),
            (1.0, 2, 1.0),
        ],
    )
    def test_half_away_from_zero(self, value, places, expected):
        assert round_half_up(value, places) == expected


class TestAggregate:
    def _scored(self, label_to_f1em):
        return {
            label: [
                score_prediction(f"e{i}", p, [g])
                for i, (p, g) in enumerate(pairs)
            ]
            for label, pairs in label_to_f1em.items()
        }

    def test_percent_means_and_average(self):
        scored = self._scored(
            {
                "golden_only": [("x", "x"), ("y", "y")],  # EM 100
                "golden_ci": [("x", "x"), ("z", "y")],    # EM 50
            }
        )
        table = aggregate(scored, labels=("golden_only", "golden_ci"))
        assert table.em["golden_only"] == 100.0
        assert table.em["golden_ci"] == 50.0
        assert table.avg_em == 75.0
        assert table.labels == ("golden_only", "golden_ci")

    def test_empty_condition_is_an_error(self):
        with pytest.raises(ValueError, match="golden_cc"):
            aggregate({"golden_cc": []}, labels=("golden_cc",))

    def test_display_rounding_does_not_touch_storage(self):
        scored = self._scored({"c": [("paris france", "paris"), ("q", "q")]})
        table = aggregate(scored, labels=("c",))
        assert math.isclose(table.f1["c"], 100 * (2 / 3 + 1) / 2)
        assert table.to_json_dict()["c"]["f1"] == round_half_up(table.f1["c"])

    def test_report_files(self, tmp_path):
        scored = self._scored({"c": [("x", "x")]})
        table = aggregate(scored, labels=("c",))
        write_score_report(table, tmp_path / "r.json", tmp_path / "r.tsv")
        tsv = (tmp_path / "r.tsv").read_text()
        assert tsv.splitlines()[0] == "condition\tF1\tEM"
        assert "avg\t100.00\t100.00" in tsv


class TestConditionTableShape:
    def test_tsv_and_json_agree(self):
        table = ConditionTable(
            labels=("a", "b"),
            f1={"a": 10.0, "b": 20.0},
            em={"a": 5.0, "b": 15.0},
            avg_f1=15.0,
            avg_em=10.0,
        )
        js = table.to_json_dict()
        assert js["avg"] == {"f1": 15.0, "em": 10.0}
        assert "a\t10.00\t5.00" in table.to_tsv()
