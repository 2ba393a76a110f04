import json
import math

import pytest

from deer.bench import (
    AlignmentError,
    BenchItem,
    MetricsReport,
    UnsupportedTaskError,
    average_reports,
    compute_metrics,
    extract_boxed,
    format_table,
    grade,
    load_dataset,
    load_records,
    normalize_answer,
    split_rounds,
)

from oracles import GOLDEN_EXPECTED, GRADING_TABLE, golden_fixture


@pytest.mark.parametrize("gold,pred,kind,expected", GRADING_TABLE)
def test_grading_table(gold, pred, kind, expected):
    assert grade(BenchItem("x", "", gold, kind), pred) is expected


@pytest.mark.parametrize("text,expected", [
    ("so \\boxed{\\frac{1}{2}}.", "\\frac{1}{2}"),
    ("\\boxed{1} then \\boxed{2}", "2"),
    ("\\boxed{{a}{b}}", "{a}{b}"),
    ("no box", ""),
    ("\\boxed{unclosed", ""),
    ("\\boxed{3} and \\boxed{4", "3"),
])
def test_extract_boxed(text, expected):
    assert extract_boxed(text) == expected


def test_normalize_idempotent():
    for gold, pred, kind, _ in GRADING_TABLE:
        once = normalize_answer(pred, kind)
        assert normalize_answer(once, kind) == once


def test_missing_answer_is_wrong():
    assert not grade(BenchItem("x", "", "1", "math"), None)
    assert not grade(BenchItem("x", "", "1", "math"), "")


def test_code_not_graded():
    with pytest.raises(UnsupportedTaskError):
        grade(BenchItem("x", "", "print(1)", "code"), "print(1)")


def test_golden_metrics():
    items, records, baseline = golden_fixture()
    m = compute_metrics(records, items, baseline)
    for k, v in GOLDEN_EXPECTED.items():
        assert getattr(m, k) == (pytest.approx(v) if isinstance(v, float) else v), k
    assert m.accuracy_se == pytest.approx(math.sqrt(0.7 * 0.3 / 10))
    assert m.n_items == m.graded_items == 10


def test_record_order_irrelevant():
    items, records, baseline = golden_fixture()
    assert compute_metrics(records[::-1], items, baseline) == compute_metrics(records, items, baseline)


def test_half_tokens_gives_half_cr():
    items, records, _ = golden_fixture()
    doubled = [dict(r, reasoning_tokens=2 * r["reasoning_tokens"], conclusion_tokens=2 * r["conclusion_tokens"])
               for r in records]
    assert compute_metrics(records, items, doubled).compression_rate == 0.5


def test_misaligned_records():
    items, records, _ = golden_fixture()
    with pytest.raises(AlignmentError, match="q9"):
        compute_metrics(records[:-1], items)
    with pytest.raises(AlignmentError, match="zz"):
        compute_metrics(records + [dict(records[0], question_id="zz")], items)


def test_code_items_counted_in_tokens_only():
    items = [BenchItem("a", "", "1", "math"), BenchItem("b", "", "", "code")]
    recs = [dict(question_id="a", final_answer="1", exited_early=False, reasoning_tokens=10, conclusion_tokens=0),
            dict(question_id="b", final_answer=None, exited_early=True, reasoning_tokens=30, conclusion_tokens=0)]
    m = compute_metrics(recs, items)
    assert m.accuracy == 1.0 and m.graded_items == 1 and m.avg_tokens == 20.0
    assert m.compression_rate is None


def test_average_rounds():
    a = MetricsReport(0.5, 100, 0.5, 4, 0.25, 1.0, 0.1, 4, ["x"], 200)
    b = MetricsReport(1.0, 300, 1.5, 4, 0.75, 0.0, 0.1, 4, ["y"], 200)
    m = average_reports([a, b])
    assert (m.accuracy, m.avg_tokens, m.compression_rate, m.early_exit_rate) == (0.75, 200, 1.0, 0.5)
    assert m.rounds == 2 and m.normalized_matches == ["x", "y"]


def test_split_rounds():
    assert split_rounds([{"round": 1}, {"round": 0}, {}]) == {0: [{"round": 0}, {}], 1: [{"round": 1}]}


def test_load_dataset_and_records(tmp_path):
    p = tmp_path / "d.jsonl"
    p.write_text('{"id": "a", "question": "1+1?", "answer": "2", "task": "math"}\n\n'
                 '{"id": "b", "question": "pick", "answer": "C", "task": "choice"}\n')
    items = load_dataset(p)
    assert [i.id for i in items] == ["a", "b"] and items[1].task_kind == "choice"
    r = tmp_path / "r.jsonl"
    r.write_text("\n".join(json.dumps(x) for x in [
        {"type": "header"}, {"type": "record", "question_id": "a"}, {"type": "footer"}]))
    assert load_records(r) == [{"type": "record", "question_id": "a"}]


def test_format_table():
    items, records, baseline = golden_fixture()
    out = format_table([("deer", compute_metrics(records, items, baseline))])
    assert "deer" in out and "70.0" in out
