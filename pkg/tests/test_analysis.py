"""Analysis helpers: heuristic labels, splits, attention aggregation."""

import json

import pytest

from conftest import make_example, make_passage
from evidgen.analysis import (
    attention_report,
    format_table,
    heuristic_evidentiality_labels,
    label_accuracy,
    positive_f1,
    save_json_report,
    split_easy_hard,
)
from evidgen.corpus import EvidentialityLabel, ValidationError
from evidgen.model import AttentionSummary


def _label(ex, rank, label):
    return EvidentialityLabel(ex, rank, label, "gold")


# ---------------------------------------------------------------------------
# heuristic labeling


def test_heuristic_matches_normalized_answer_in_text():
    example = make_example(query="find k1", golds=("The V1!",),
                           texts=("w1 v1 w2", "w1 w2"))
    labels = heuristic_evidentiality_labels([example])
    assert [(l.passage_rank, l.label) for l in labels] == [
        (1, "positive"), (2, "negative")]
    assert all(l.provenance == "silver" for l in labels)


def test_heuristic_ignores_titles():
    example = make_example(golds=("t1",), texts=("w1 w2", "w2 w3"))
    labels = heuristic_evidentiality_labels([example])  # "t1" only in titles
    assert all(l.label == "negative" for l in labels)


def test_heuristic_answer_may_span_tokens():
    example = make_example(golds=("v1 w1",), texts=("k1 v1 w1", "w1 v1 k1"))
    labels = heuristic_evidentiality_labels([example])
    assert [l.label for l in labels] == ["positive", "negative"]


def test_heuristic_empty_normalized_gold_never_matches():
    example = make_example(golds=("the",), texts=("k1 v1", "w1 w2"))
    labels = heuristic_evidentiality_labels([example])
    assert [l.label for l in labels] == ["negative", "negative"]


# ---------------------------------------------------------------------------
# label scoring


def test_label_accuracy_counts_matches():
    truth = [_label("e0", 1, "positive"), _label("e0", 2, "negative"),
             _label("e1", 1, "negative"), _label("e1", 2, "negative")]
    predicted = [_label("e0", 1, "positive"), _label("e0", 2, "positive"),
                 _label("e1", 1, "negative"), _label("e1", 2, "negative")]
    assert label_accuracy(predicted, truth) == 0.75


def test_label_accuracy_rejects_unknown_pairs():
    truth = [_label("e0", 1, "positive")]
    with pytest.raises(ValidationError):
        label_accuracy([_label("e0", 2, "positive")], truth)
    with pytest.raises(ValidationError):
        label_accuracy([], truth)


def test_positive_f1_hand_computed():
    truth = [_label("e0", r, "positive" if r <= 2 else "negative")
             for r in range(1, 6)]
    # predict ranks 2 and 3 positive: tp=1 fp=1 fn=1 -> p=r=f1=0.5
    predicted = [_label("e0", r, "positive" if r in (2, 3) else "negative")
                 for r in range(1, 6)]
    assert positive_f1(predicted, truth) == 0.5


def test_positive_f1_no_positives_anywhere_is_zero():
    truth = [_label("e0", 1, "negative")]
    assert positive_f1([_label("e0", 1, "negative")], truth) == 0.0


# ---------------------------------------------------------------------------
# easy/hard split


def _split_fixture():
    a = make_example(ex_id="e0", golds=("v1",))
    b = make_example(ex_id="e1", golds=("v2",))
    c = make_example(ex_id="e2", golds=("v3",))
    return [a, b, c]


def test_split_easy_hard_requires_both_correct():
    examples = _split_fixture()
    first = {"e0": "v1", "e1": "v2", "e2": "wrong"}
    second = {"e0": "v1", "e1": "wrong", "e2": "v3"}
    easy, hard = split_easy_hard(examples, first, second)
    assert easy == ["e0"]
    assert hard == ["e1", "e2"]


def test_split_easy_hard_names_missing_ids():
    examples = _split_fixture()
    complete = {"e0": "v1", "e1": "v2", "e2": "v3"}
    with pytest.raises(ValidationError, match="e2"):
        split_easy_hard(examples, {"e0": "v1", "e1": "v2"}, complete)
    with pytest.raises(ValidationError, match="e9"):
        split_easy_hard(examples, complete, {**complete, "e9": "v9"})


# ---------------------------------------------------------------------------
# attention aggregation


def test_attention_report_hand_counts():
    summaries = [
        AttentionSummary([0.7, 0.2, 0.1], [1, 2, 3]),
        AttentionSummary([0.1, 0.85, 0.05], [1, 2, 3]),
        AttentionSummary([0.05, 0.05, 0.9], [11, 2, 12]),
    ]
    report = attention_report(summaries, bins=10)
    assert report["n_examples"] == 3
    assert report["argmax_rank_counts"] == {"1": 1, "2": 1, "12": 1}
    assert report["fraction_argmax_beyond_rank_10"] == pytest.approx(1 / 3)
    hist = report["mass_histogram"]
    assert hist["bin_edges"] == pytest.approx([i / 10 for i in range(11)])
    assert sum(hist["counts"]) == 9
    # nine masses: 0.7->bin6, 0.2->bin2, 0.1->bin1, 0.85->bin8, 0.05->bin0 (x3),
    # 0.9->bin9, 0.1->bin1
    assert hist["counts"] == [3, 2, 1, 0, 0, 0, 1, 0, 1, 1]


def test_attention_report_rank_keys_sort_numerically():
    summaries = [AttentionSummary([1.0], [r]) for r in (10, 2, 1, 11)]
    report = attention_report(summaries)
    assert list(report["argmax_rank_counts"]) == ["1", "2", "10", "11"]


def test_attention_report_rejects_empty():
    with pytest.raises(ValidationError):
        attention_report([])


# ---------------------------------------------------------------------------
# rendering


def test_format_table_alignment_and_floats():
    rows = [{"variant": "full", "dev": 0.51}, {"variant": "- silver", "dev": 0.4}]
    text = format_table(rows, ["variant", "dev"])
    lines = text.splitlines()
    assert lines[0] == "variant   dev   "
    assert lines[1] == "--------  ------"
    assert lines[2] == "full      0.5100"
    assert lines[3] == "- silver  0.4000"
    assert text.endswith("\n")


def test_format_table_missing_cells_render_empty():
    text = format_table([{"a": 1}], ["a", "b"])
    assert text.splitlines()[2].rstrip() == "1"


def test_save_json_report_round_trips_sorted(tmp_path):
    path = tmp_path / "report.json"
    save_json_report({"b": 1, "a": {"z": 2, "y": 3}}, path)
    raw = path.read_text()
    assert raw.endswith("\n")
    assert raw.index('"a"') < raw.index('"b"')
    assert json.loads(raw) == {"b": 1, "a": {"z": 2, "y": 3}}
