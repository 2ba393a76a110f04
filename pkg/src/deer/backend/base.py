"""Token-generation backend interface and shared helpers."""

from __future__ import annotations

import math
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

FINISH_REASONS = ("stop_sequence_hit", "budget_exhausted", "end_of_text", "cancelled")


class BackendError(RuntimeError):
    """Base class for backend failures."""


class RetryableBackendError(BackendError):
    """Transport-level failure; the request may be retried."""


class ProtocolError(BackendError):
    """The backend answered, but not in the shape we asked for."""


@dataclass(frozen=True)
class TokenEvent:
    """One generated token.

    ``top_alternatives`` always contains the emitted token.  ``entropy`` is
    measured in nats over the renormalised alternatives, so it is a lower
    bound on the entropy of the full next-token distribution.
    """

    text: str
    logprob: float
    top_alternatives: tuple[tuple[str, float], ...]
    entropy: Optional[float] = None

    def __post_init__(self):
        if self.logprob > 0:
            raise ValueError(f"logprob must be <= 0, got {self.logprob}")
        if not self.top_alternatives:
            raise ValueError("top_alternatives must be non-empty")
        for _, lp in self.top_alternatives:
            if lp > 0:
                raise ValueError(f"alternative logprob must be <= 0, got {lp}")

    @property
    def prob(self) -> float:
        return math.exp(self.logprob)

    @property
    def max_prob(self) -> float:
        """Largest probability among the returned alternatives."""
        return math.exp(max(lp for _, lp in self.top_alternatives))

    @classmethod
    def build(
        cls,
        text: str,
        logprob: float,
        alternatives: Optional[Sequence[tuple[str, float]]] = None,
        with_entropy: bool = True,
    ) -> "TokenEvent":
        """Normalise ``alternatives`` (adding the emitted token if absent) and fill in entropy."""
        alts = list(alternatives or [])
        if not any(tok == text for tok, _ in alts):
            alts.append((text, logprob))
        alts.sort(key=lambda a: -a[1])
        ent = topk_entropy([lp for _, lp in alts]) if with_entropy else None
        return cls(text, logprob, tuple(alts), ent)


def topk_entropy(logprobs: Sequence[float]) -> float:
    """Shannon entropy (nats) of the distribution obtained by renormalising ``logprobs``."""
    if not logprobs:
        raise ValueError("need at least one logprob")
    top = max(logprobs)
    weights = [math.exp(lp - top) for lp in logprobs]
    total = math.fsum(weights)
    h = 0.0
    for w in weights:
        if w > 0:
            p = w / total
            h -= p * math.log(p)
    return max(h, 0.0)


@dataclass
class GenerationRequest:
    prompt: str
    max_tokens: int
    stop_sequences: list[str] = field(default_factory=list)
    want_logprobs: bool = True
    top_k: int = 5
    temperature: float = 0.0
    seed: Optional[int] = None
    # Client-side early halt, checked against the accumulated text after each
    # token.  Not sent over the wire.
    halt: Optional[Callable[[str], bool]] = field(default=None, compare=False, repr=False)

    def validate(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.want_logprobs and self.top_k < 1:
            raise ValueError("top_k must be >= 1 when logprobs are requested")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")


@dataclass
class GenerationResult:
    tokens: list[TokenEvent]
    finish_reason: str
    matched_stop: Optional[str] = None
    # Seconds spent producing this result.  Scripted backends report virtual
    # time from their latency model; HTTP backends report measured time.
    elapsed: float = 0.0

    def __post_init__(self):
        if self.finish_reason not in FINISH_REASONS:
            raise ValueError(f"unknown finish_reason {self.finish_reason!r}")
        if (self.matched_stop is not None) != (self.finish_reason == "stop_sequence_hit"):
            raise ValueError("matched_stop must be set iff finish_reason is stop_sequence_hit")

    @property
    def text(self) -> str:
        return "".join(t.text for t in self.tokens)

    @property
    def consumed_tokens(self) -> int:
        """Tokens the model produced for this call, counting a matched stop as one."""
        return len(self.tokens) + (1 if self.matched_stop is not None else 0)


class StopMatcher:
    """Finds the earliest stop sequence in streamed text.

    Matching runs on detokenised text, so a stop split across token
    boundaries is still found.  Only a window of ``max(len(stop)) - 1``
    characters before the newest piece needs rescanning.
    """

    def __init__(self, stops: Sequence[str]):
        self.stops = [s for s in stops if s]
        self.window = max((len(s) for s in self.stops), default=1) - 1
        self.text = ""

    def feed(self, piece: str) -> Optional[tuple[int, str]]:
        """Append ``piece``; return ``(offset, stop)`` of the earliest match, if any."""
        start = max(0, len(self.text) - self.window)
        self.text += piece
        best = None
        for s in self.stops:
            i = self.text.find(s, start)
            if i >= 0 and (best is None or i < best[0] or (i == best[0] and len(s) > len(best[1]))):
                best = (i, s)
        return best


def truncate_at(tokens: list[TokenEvent], offset: int) -> list[TokenEvent]:
    """Keep only the text before character ``offset``.

    A token straddling the cut keeps its leading part and its logprob.
    """
    out, pos = [], 0
    for tok in tokens:
        end = pos + len(tok.text)
        if end <= offset:
            out.append(tok)
        else:
            head = tok.text[: offset - pos]
            if head:
                out.append(TokenEvent(head, tok.logprob, tok.top_alternatives, tok.entropy))
            break
        pos = end
    return out


class GenerationHandle:
    """An in-flight generate call that can be cancelled."""

    def __init__(self, future: Future, cancel_event: threading.Event):
        self._future = future
        self._cancel = cancel_event

    def result(self, timeout: Optional[float] = None) -> GenerationResult:
        return self._future.result(timeout)

    def done(self) -> bool:
        return self._future.done()

    def cancel(self):
        # Cancelling a finished call is a no-op.
        if not self._future.done():
            self._cancel.set()

    @property
    def cancelled(self) -> bool:
        return self._cancel.is_set()


class Backend:
    """Something that generates tokens with probabilities.

    Subclasses implement :meth:`_generate`, polling ``cancel`` between tokens.
    """

    def __init__(self, max_concurrency: int = 8):
        self._pool = ThreadPoolExecutor(max_workers=max_concurrency, thread_name_prefix="deer-gen")

    def generate(self, request: GenerationRequest) -> GenerationResult:
        request.validate()
        return self._generate(request, threading.Event())

    def submit(self, request: GenerationRequest) -> GenerationHandle:
        request.validate()
        ev = threading.Event()
        return GenerationHandle(self._pool.submit(self._generate, request, ev), ev)

    def cancel(self, handle: GenerationHandle, at: Optional[float] = None):
        """Stop an in-flight call.

        ``at`` is how long after submission the caller decided to cancel, in
        backend-reported seconds; only virtual-time backends use it.
        """
        handle.cancel()

    def close(self):
        self._pool.shutdown(wait=False, cancel_futures=True)

    def _generate(self, request: GenerationRequest, cancel: threading.Event) -> GenerationResult:
        raise NotImplementedError

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def collect(stream, request: GenerationRequest, cancel: threading.Event) -> GenerationResult:
    """Drain a token iterator under the request's stop, halt, budget and cancel rules.

    A cancelled result still carries the tokens produced so far so callers can
    account for them; they must not be used as model output.
    """
    try:
        return _drain(stream, request, cancel)
    finally:
        close = getattr(stream, "close", None)
        if close is not None:
            close()


def _drain(stream, request: GenerationRequest, cancel: threading.Event) -> GenerationResult:
    matcher = StopMatcher(request.stop_sequences)
    tokens: list[TokenEvent] = []
    for tok in stream:
        if cancel.is_set():
            return GenerationResult(tokens, "cancelled")
        tokens.append(tok)
        hit = matcher.feed(tok.text)
        if hit is not None:
            return GenerationResult(truncate_at(tokens, hit[0]), "stop_sequence_hit", hit[1])
        if request.halt is not None and request.halt(matcher.text):
            return GenerationResult(tokens, "end_of_text")
        if len(tokens) >= request.max_tokens:
            return GenerationResult(tokens, "budget_exhausted")
    if cancel.is_set():
        return GenerationResult(tokens, "cancelled")
    return GenerationResult(tokens, "end_of_text")
