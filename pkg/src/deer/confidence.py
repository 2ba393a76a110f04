"""Trial-answer confidence, multi-prompt calibration and the exit verdict."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

from .monitor import TransitionPoint

DEFAULT_LAMBDA = 0.95
DEFAULT_ALPHA = 1.0
DEFAULT_N_PROMPTS = 4
CODE_CONFIDENCE_TOKEN_CAP = 50


class ConfidenceDomainError(ValueError):
    pass


def confidence_geomean(token_max_probs: Sequence[float]) -> float:
    """Geometric mean of per-token maximum probabilities, computed in log space."""
    if len(token_max_probs) == 0:
        raise ConfidenceDomainError("need at least one token probability")
    logs = []
    for p in token_max_probs:
        if not 0.0 < p <= 1.0:
            raise ConfidenceDomainError(f"probabilities must lie in (0, 1], got {p}")
        logs.append(math.log(p))
    c = math.exp(math.fsum(logs) / len(logs))
    # exp/log round-off can push the result a hair outside [min, max].
    return min(max(c, min(token_max_probs)), max(token_max_probs))


def confidence_arithmetic(token_max_probs: Sequence[float]) -> float:
    """Arithmetic-mean aggregation; kept only for the ``--aggregate mean`` experiment."""
    if len(token_max_probs) == 0:
        raise ConfidenceDomainError("need at least one token probability")
    return math.fsum(token_max_probs) / len(token_max_probs)


@dataclass
class TrialAnswer:
    answer_text: str
    token_max_probs: list[float]
    confidence: float
    inducer_id: int
    induced_tokens: int = 0
    finish_reason: str = ""

    @classmethod
    def score(
        cls,
        answer_text: str,
        token_max_probs: Sequence[float],
        inducer_id: int,
        aggregate: str = "geomean",
        **kw,
    ) -> "TrialAnswer":
        # An answer we could not parse never justifies an exit.
        if not token_max_probs:
            return cls(answer_text, [], 0.0, inducer_id, **kw)
        agg = confidence_geomean if aggregate == "geomean" else confidence_arithmetic
        return cls(answer_text, list(token_max_probs), agg(token_max_probs), inducer_id, **kw)


@dataclass
class CalibratedConfidence:
    per_prompt: list[float]
    c_avg: float
    c_mad: float
    alpha: float
    c_cali: float


def calibrate(per_prompt: Sequence[float], alpha: float = DEFAULT_ALPHA) -> CalibratedConfidence:
    """Penalise the mean confidence by ``alpha`` times its mean absolute deviation.

    Zero entries (failed inductions) are allowed and drag the score down.
    """
    if len(per_prompt) == 0:
        raise ConfidenceDomainError("need at least one confidence")
    if alpha < 0:
        raise ConfidenceDomainError(f"alpha must be >= 0, got {alpha}")
    for c in per_prompt:
        if not 0.0 <= c <= 1.0:
            raise ConfidenceDomainError(f"confidences must lie in [0, 1], got {c}")
    n = len(per_prompt)
    c_avg = math.fsum(per_prompt) / n
    c_mad = math.fsum(abs(c - c_avg) for c in per_prompt) / n
    return CalibratedConfidence(list(per_prompt), c_avg, c_mad, alpha, c_avg - alpha * c_mad)


@dataclass
class ExitDecision:
    exit: bool
    score: float
    threshold: float
    transition: Optional[TransitionPoint] = None


def decide_exit(score: float, lam: float = DEFAULT_LAMBDA, transition: Optional[TransitionPoint] = None) -> ExitDecision:
    if not 0.0 < lam < 1.0:
        raise ConfidenceDomainError(f"lambda must lie in (0, 1), got {lam}")
    return ExitDecision(score > lam, score, lam, transition)
