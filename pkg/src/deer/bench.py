"""Datasets, answer grading and Acc/Tok/CR metrics over run records."""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

TASK_KINDS = ("math", "choice", "code")


class UnsupportedTaskError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class BenchItem:
    id: str
    question: str
    gold_answer: str
    task_kind: str = "math"

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"task_kind must be one of {TASK_KINDS}, got {self.task_kind!r}")
        if self.task_kind != "code" and not self.gold_answer.strip():
            raise ValueError(f"item {self.id}: empty gold answer")


def load_dataset(path) -> list[BenchItem]:
    """Read ``{id, question, answer, task}`` JSON lines."""
    items, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                item = BenchItem(str(rec["id"]), rec["question"], str(rec.get("answer", "")),
                                 rec.get("task", "math"))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc}") from None
            if item.id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate id {item.id!r}")
            seen.add(item.id)
            items.append(item)
    return items


# --------------------------------------------------------------------------
# answer extraction
# --------------------------------------------------------------------------


def balanced_span(text: str, open_at: int) -> Optional[int]:
    """Index of the brace closing the one at ``open_at``, or None if unbalanced."""
    depth = 0
    for i in range(open_at, len(text)):
        c = text[i]
        if c == "{":
            depth += 1
        elif c == "}":
            depth -= 1
            if depth == 0:
                return i
    return None


def extract_boxed(text: str) -> str:
    """Content of the last balanced ``\\boxed{...}``; empty string when absent."""
    for m in reversed(list(re.finditer(r"\\boxed\s*\{", text))):
        close = balanced_span(text, m.end() - 1)
        if close is not None:
            return text[m.end():close].strip()
    return ""


# --------------------------------------------------------------------------
# grading
# --------------------------------------------------------------------------

_FRAC = re.compile(r"\\[dt]?frac\s*\{([^{}]*)\}\s*\{([^{}]*)\}")
_FRAC_SHORT = re.compile(r"\\[dt]?frac(\d)(\d)")
_WRAPPERS = re.compile(r"\\(?:text|textbf|mathrm|mbox)\s*\{([^{}]*)\}")
_NUMBER = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)")


def _strip_braces(s: str) -> str:
    while s.startswith("{") and balanced_span(s, 0) == len(s) - 1:
        s = s[1:-1].strip()
    return s


def _canonical_number(s: str) -> Optional[str]:
    """``'007'`` -> ``'7'``, ``'0.50'`` -> ``'1/2'``, ``'3/6'`` -> ``'1/2'``."""
    s = s.replace(",", "") if re.fullmatch(r"[-+]?\d{1,3}(,\d{3})+(\.\d*)?", s) else s
    m = re.fullmatch(r"([-+]?(?:\d+\.?\d*|\.\d+))\s*/\s*([-+]?(?:\d+\.?\d*|\.\d+))", s)
    try:
        if m:
            den = Fraction(m.group(2))
            if den == 0:
                return None
            val = Fraction(m.group(1)) / den
        elif _NUMBER.fullmatch(s):
            val = Fraction(s)
        else:
            return None
    except (ValueError, ZeroDivisionError):
        return None
    return str(val)


def normalize_answer(ans: str, task_kind: str = "math") -> str:
    s = extract_boxed(ans) or ans
    s = s.strip().strip("$").strip()
    s = re.sub(r"^\\boxed\s*", "", s)
    s = _WRAPPERS.sub(r"\1", s)
    s = s.replace("\\left", "").replace("\\right", "").replace("\\!", "").replace("\\,", "")
    s = s.replace("^\\circ", "").replace("^{\\circ}", "").replace("\\%", "").replace("%", "")
    s = _FRAC.sub(r"(\1)/(\2)", s)
    s = _FRAC_SHORT.sub(r"(\1)/(\2)", s)
    s = re.sub(r"\s+", "", s)
    s = _strip_braces(s)
    s = s.rstrip(".")
    # Drop parentheses around bare numbers left by fraction rewriting.
    s = re.sub(r"\(([-+]?[\d.]+)\)", r"\1", s)
    if task_kind == "choice":
        m = re.fullmatch(r"\(?([A-Za-z])\)?", s)
        return m.group(1).upper() if m else s.upper()
    num = _canonical_number(s)
    return num if num is not None else s


def grade(item: BenchItem, predicted: Optional[str]) -> bool:
    if item.task_kind == "code":
        raise UnsupportedTaskError("code answers need an execution sandbox; not graded")
    if not predicted:
        return False
    return normalize_answer(item.gold_answer, item.task_kind) == normalize_answer(predicted, item.task_kind)


def needed_normalization(item: BenchItem, predicted: Optional[str]) -> bool:
    """True when a match only holds after normalisation, flagged in reports."""
    return bool(predicted) and grade(item, predicted) and item.gold_answer.strip() != predicted.strip()


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


@dataclass
class MetricsReport:
    accuracy: float
    avg_tokens: float
    compression_rate: Optional[float]
    n_items: int
    early_exit_rate: float
    early_exit_accuracy: float
    accuracy_se: float = 0.0
    graded_items: int = 0
    normalized_matches: list[str] = field(default_factory=list)
    baseline_avg_tokens: Optional[float] = None
    rounds: int = 1

    def to_json(self) -> dict:
        return asdict(self)


def _rget(rec, name):
    return rec[name] if isinstance(rec, dict) else getattr(rec, name)


def _by_id(records, what: str, ids: Sequence[str]) -> dict:
    table = {}
    for r in records:
        table[str(_rget(r, "question_id"))] = r
    missing = [i for i in ids if i not in table]
    extra = [i for i in table if i not in set(ids)]
    if missing or extra:
        raise AlignmentError(f"{what} do not align with the dataset; missing ids: {missing}, unknown ids: {extra}")
    return table


def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs) if xs else 0.0


def compute_metrics(records, items: Sequence[BenchItem], baseline=None) -> MetricsReport:
    """Acc/Tok/CR plus early-exit statistics.

    Records and items are matched by id, so record order does not matter.
    Tokens are reasoning plus conclusion tokens; induced tokens are overhead
    reported separately by the controller.
    """
    ids = [it.id for it in items]
    table = _by_id(records, "records", ids)
    correct, tokens, exited, exited_correct, normalized = [], [], 0, 0, []
    for it in items:
        r = table[it.id]
        tokens.append(_rget(r, "reasoning_tokens") + _rget(r, "conclusion_tokens"))
        ok = None
        if it.task_kind != "code":
            pred = _rget(r, "final_answer")
            ok = grade(it, pred)
            correct.append(1.0 if ok else 0.0)
            if needed_normalization(it, pred):
                normalized.append(it.id)
        if _rget(r, "exited_early"):
            exited += 1
            exited_correct += 1 if ok else 0
    n = len(items)
    acc = _mean(correct)
    avg_tok = _mean(tokens)
    cr = base_tok = None
    if baseline is not None:
        btable = _by_id(baseline, "baseline records", ids)
        base_tok = _mean([_rget(btable[i], "reasoning_tokens") + _rget(btable[i], "conclusion_tokens") for i in ids])
        cr = avg_tok / base_tok if base_tok > 0 else None
    se = math.sqrt(acc * (1 - acc) / len(correct)) if correct else 0.0
    return MetricsReport(
        accuracy=acc,
        avg_tokens=avg_tok,
        compression_rate=cr,
        n_items=n,
        early_exit_rate=exited / n if n else 0.0,
        early_exit_accuracy=exited_correct / exited if exited else 0.0,
        accuracy_se=se,
        graded_items=len(correct),
        normalized_matches=normalized,
        baseline_avg_tokens=base_tok,
    )


def average_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Mean of per-round metrics (multi-sample evaluation)."""
    if len(reports) == 1:
        return reports[0]
    crs = [r.compression_rate for r in reports if r.compression_rate is not None]
    bases = [r.baseline_avg_tokens for r in reports if r.baseline_avg_tokens is not None]
    norm = sorted({i for r in reports for i in r.normalized_matches})
    accs = [r.accuracy for r in reports]
    return MetricsReport(
        accuracy=_mean(accs),
        avg_tokens=_mean([r.avg_tokens for r in reports]),
        compression_rate=_mean(crs) if len(crs) == len(reports) else None,
        n_items=reports[0].n_items,
        early_exit_rate=_mean([r.early_exit_rate for r in reports]),
        early_exit_accuracy=_mean([r.early_exit_accuracy for r in reports]),
        accuracy_se=math.sqrt(_mean([r.accuracy_se**2 for r in reports]) / len(reports)),
        graded_items=reports[0].graded_items,
        normalized_matches=norm,
        baseline_avg_tokens=_mean(bases) if bases else None,
        rounds=len(reports),
    )


def split_rounds(records) -> dict[int, list]:
    rounds: dict[int, list] = {}
    for r in records:
        rnd = r.get("round", 0) if isinstance(r, dict) else getattr(r, "round", 0)
        rounds.setdefault(rnd, []).append(r)
    return dict(sorted(rounds.items()))


def load_records(path) -> list[dict]:
    """Run records from a JSON-lines run file, skipping header and footer lines."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("type", "record") == "record":
                out.append(rec)
    return out


def format_table(rows: Sequence[tuple[str, MetricsReport]]) -> str:
    """Aligned Acc / Tok / CR table, one row per method."""
    header = ("Method", "Acc", "Tok", "CR", "ExitRate", "ExitAcc", "N")
    body = []
    for name, m in rows:
        cr = f"{100 * m.compression_rate:.1f}%" if m.compression_rate is not None else "-"
        body.append((name, f"{100 * m.accuracy:.1f}", f"{m.avg_tokens:.0f}", cr,
                     f"{100 * m.early_exit_rate:.1f}%", f"{100 * m.early_exit_accuracy:.1f}", str(m.n_items)))
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = []
    for r in [header, *body]:
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append("  ".join(cells))
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
