"""Reasoning-transition detection.

Two strategies find candidate exit points in the thought stream: exact
marker words such as ``"Wait"``, or a high-entropy first token after a
reasoning-step delimiter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

from .backend.base import TokenEvent

STRATEGIES = ("marker", "entropy")
DEFAULT_MARKERS = ("Wait",)
DEFAULT_ENTROPY_THRESHOLD = 0.672
DEFAULT_STEP_DELIMITER = "\n\n"


class MonitorError(ValueError):
    pass


@dataclass
class MonitorConfig:
    strategy: str = "marker"
    markers: list[str] = field(default_factory=lambda: list(DEFAULT_MARKERS))
    step_delimiter: str = DEFAULT_STEP_DELIMITER
    entropy_threshold: float = DEFAULT_ENTROPY_THRESHOLD
    word_boundary: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise MonitorError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.strategy == "marker" and not [m for m in self.markers if m]:
            raise MonitorError("marker strategy needs at least one non-empty marker")
        if self.strategy == "entropy":
            if not self.entropy_threshold > 0:
                raise MonitorError("entropy_threshold must be > 0")
            if not self.step_delimiter:
                raise MonitorError("entropy strategy needs a step delimiter")


@dataclass(frozen=True)
class TransitionPoint:
    char_offset: int
    kind: str  # "marker_hit" | "high_entropy_step"
    trigger: Union[str, float]


def _is_word(ch: str) -> bool:
    return ch.isalnum() or ch == "_"


@dataclass
class ScanCursor:
    """Caller-held scan state: the thought text seen so far and the resume point."""

    text: str = ""
    pos: int = 0


def _find_confirmed(text: str, start: int, config: MonitorConfig, final: bool):
    """Earliest marker occurrence at or after ``start`` whose boundaries are known.

    Returns ``(offset, marker)``, ``("pending", offset)`` when the earliest
    candidate ends at the current end of text and its right boundary is still
    unknown, or None.
    """
    best = None
    for m in config.markers:
        if not m:
            continue
        i = text.find(m, start)
        while i >= 0:
            left_ok = not config.word_boundary or i == 0 or not (_is_word(text[i - 1]) and _is_word(m[0]))
            end = i + len(m)
            if end == len(text) and config.word_boundary and not final and _is_word(m[-1]):
                right = None
            else:
                right_ok = not config.word_boundary or end == len(text) or not (_is_word(text[end]) and _is_word(m[-1]))
                right = right_ok
            if left_ok and right is not False:
                cand = (i, m, right is None)
                if best is None or (i, -len(m)) < (best[0], -len(best[1])):
                    best = cand
                break
            i = text.find(m, i + 1)
    return best


def scan_marker(
    thought_text_delta: str,
    config: MonitorConfig,
    cursor: Optional[ScanCursor] = None,
    final: bool = False,
) -> Optional[TransitionPoint]:
    """Return the earliest marker hit not yet reported, after appending the delta.

    Matches spanning the boundary with earlier deltas are found because the
    cursor keeps the whole text.  With word boundaries on, a marker that ends
    exactly at the end of the text is held back until the next delta (or
    ``final=True``) shows what follows it.  Call again with an empty delta to
    drain further hits.
    """
    if cursor is None:
        cursor = ScanCursor()
    cursor.text += thought_text_delta
    hit = _find_confirmed(cursor.text, cursor.pos, config, final)
    if hit is None:
        return None
    offset, marker, pending = hit
    if pending:
        return None
    cursor.pos = offset + 1
    return TransitionPoint(offset, "marker_hit", marker)


def scan_all_markers(text: str, config: MonitorConfig) -> list[TransitionPoint]:
    """All marker hits of a complete text."""
    cur, out = ScanCursor(), []
    tp = scan_marker(text, config, cur, final=True)
    while tp is not None:
        out.append(tp)
        tp = scan_marker("", config, cur, final=True)
    return out


def marker_transition(thoughts: str, marker: str, config: MonitorConfig) -> Optional[TransitionPoint]:
    """Check a backend stop on ``marker`` appended to ``thoughts``.

    The backend halts at the marker, so only its left boundary can be
    checked; the text after it does not exist yet.
    """
    text = thoughts + marker
    hit = _find_confirmed(text, len(thoughts), config, final=True)
    if hit is None or hit[0] != len(thoughts):
        return None
    return TransitionPoint(len(thoughts), "marker_hit", marker)


def scan_entropy(
    step_boundary_event: TokenEvent,
    config: MonitorConfig,
    char_offset: int = 0,
) -> Optional[TransitionPoint]:
    """Flag a step whose first token has entropy above the threshold."""
    if step_boundary_event.entropy is None:
        raise MonitorError(
            "token carries no entropy; request top-k logprobs (top_k >= 2) from the backend"
        )
    if step_boundary_event.entropy > config.entropy_threshold:
        return TransitionPoint(char_offset, "high_entropy_step", step_boundary_event.entropy)
    return None
