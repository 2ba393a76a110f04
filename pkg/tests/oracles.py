"""Hand-built oracle tables shared by unit and acceptance tests."""

# (gold, predicted, task kind, expected grade)
GRADING_TABLE = [
    ("1/2", "\\frac{1}{2}", "math", True),
    ("\\frac{1}{2}", "0.5", "math", True),
    ("3", "\\boxed{3}", "math", True),
    ("\\frac{3}{4}", "\\boxed{\\frac{3}{4}}", "math", True),
    ("007", "7", "math", True),
    ("12", "12.0", "math", True),
    ("-2", "-2", "math", True),
    ("2", "-2", "math", False),
    ("B", "b", "choice", True),
    ("B", "(B)", "choice", True),
    ("C", "\\text{C}", "choice", True),
    ("A", "B", "choice", False),
    ("\\sqrt{2}", "\\sqrt{2}", "math", True),
    ("\\sqrt{2}", "\\sqrt{3}", "math", False),
    ("1,000", "1000", "math", True),
    ("45", "45^\\circ", "math", True),
    ("x+1", "x + 1", "math", True),
    ("1/3", "0.33", "math", False),
    ("\\dfrac{2}{4}", "1/2", "math", True),
    ("5", "\\boxed{\\boxed{5}}", "math", True),
]

# id, gold, task, predicted, exited early, reasoning tokens, conclusion tokens
GOLDEN_ITEMS = [
    ("q0", "1", "math", "1", True, 90, 10),
    ("q1", "2", "math", "2", True, 190, 10),
    ("q2", "3", "math", "4", True, 40, 10),
    ("q3", "4", "math", "4", False, 290, 10),
    ("q4", "5", "math", None, False, 500, 0),
    ("q5", "1/2", "math", "\\frac{1}{2}", True, 140, 10),
    ("q6", "7", "math", "7", False, 240, 10),
    ("q7", "8", "math", "9", False, 340, 10),
    ("q8", "B", "choice", "b", True, 70, 10),
    ("q9", "10", "math", "10", False, 110, 10),
]
BASELINE_TOKENS = 400  # per item

# counted by hand from the table above
GOLDEN_EXPECTED = dict(
    accuracy=0.7,              # q0 q1 q3 q5 q6 q8 q9
    avg_tokens=210.0,          # 2100 / 10
    compression_rate=0.525,    # 210 / 400
    early_exit_rate=0.5,       # q0 q1 q2 q5 q8
    early_exit_accuracy=0.8,   # all but q2
    normalized_matches=["q5", "q8"],
)


def golden_fixture():
    from deer.bench import BenchItem

    items = [BenchItem(i, f"question {i}", g, k) for i, g, k, *_ in GOLDEN_ITEMS]
    records = [dict(question_id=i, final_answer=p, exited_early=e, reasoning_tokens=r, conclusion_tokens=c)
               for i, _, _, p, e, r, c in GOLDEN_ITEMS]
    baseline = [dict(question_id=i, reasoning_tokens=BASELINE_TOKENS - 10, conclusion_tokens=10)
                for i, *_ in GOLDEN_ITEMS]
    return items, records, baseline
