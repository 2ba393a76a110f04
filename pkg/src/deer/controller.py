"""The early-exit reasoning loop.

The controller generates thoughts until the monitor reports a transition
point, asks the model for a trial answer there, and either closes the
thinking section (confident enough) or resumes on the original path with the
transition text re-appended, so the thought stream before an exit is exactly
what plain decoding would have produced.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

from .backend.base import Backend, GenerationHandle, GenerationRequest, GenerationResult
from .bench import balanced_span, extract_boxed
from .confidence import (
    DEFAULT_ALPHA,
    DEFAULT_LAMBDA,
    DEFAULT_N_PROMPTS,
    CalibratedConfidence,
    ExitDecision,
    TrialAnswer,
    calibrate,
    decide_exit,
)
from .monitor import MonitorConfig, TransitionPoint, marker_transition, scan_entropy

logger = logging.getLogger(__name__)

MODES = ("vanilla", "deer", "deer_pro", "deer_parallel")

ZERO_SHOT_COT = "Please reason step by step, and put your final answer within \\boxed{}."
INDUCER_PROMPTS = (
    "\n\n Final Answer\n\\boxed",
    "\n\n Final Answer\n\n Based on the analysis above, the answer is \\boxed",
    "\n\n Final Answer\n\n The correct final answer is \\boxed",
    "\n\n Based on the previous thinking, I believe I already know the answer.\n Final Answer\n \\boxed",
)
DEFAULT_PROMPT_TEMPLATE = "{system_prompt}\n\n{question}\n{think_open}\n"
DEFAULT_MAX_TOTAL_TOKENS = 16384
ANSWER_MAX_TOKENS = 512
CONCLUSION_CAP = 2048


class ConfigError(ValueError):
    pass


class RunAborted(RuntimeError):
    """A backend error interrupted a run; ``record`` holds what was done so far."""

    def __init__(self, cause: Exception, record: "RunRecord"):
        super().__init__(f"{type(cause).__name__}: {cause}")
        self.cause = cause
        self.record = record


@dataclass
class ControllerConfig:
    mode: str = "deer"
    system_prompt: str = ZERO_SHOT_COT
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE
    inducer_prompts: list[str] = field(default_factory=lambda: list(INDUCER_PROMPTS))
    think_open: str = "<think>"
    think_close: str = "</think>"
    max_total_tokens: int = DEFAULT_MAX_TOTAL_TOKENS
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    lam: float = DEFAULT_LAMBDA
    alpha: float = DEFAULT_ALPHA
    n_prompts: int = DEFAULT_N_PROMPTS
    answer_max_tokens: int = ANSWER_MAX_TOKENS
    confidence_token_cap: Optional[int] = None
    conclusion_cap: int = CONCLUSION_CAP
    count_induced_in_budget: bool = False
    aggregate: str = "geomean"
    top_k: int = 5
    temperature: float = 0.0
    seed: Optional[int] = None

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode: must be one of {MODES}, got {self.mode!r}")
        if self.max_total_tokens < 1:
            raise ConfigError("max_total_tokens: must be >= 1")
        if not self.inducer_prompts:
            raise ConfigError("inducer_prompts: must not be empty")
        if not 1 <= self.n_prompts <= len(self.inducer_prompts):
            raise ConfigError(f"n_prompts: must lie in [1, {len(self.inducer_prompts)}]")
        if not 0.0 < self.lam < 1.0:
            raise ConfigError("lambda: must lie in (0, 1)")
        if self.alpha < 0:
            raise ConfigError("alpha: must be >= 0")
        if self.confidence_token_cap is not None and self.confidence_token_cap < 1:
            raise ConfigError("confidence_token_cap: must be >= 1")
        if self.aggregate not in ("geomean", "mean"):
            raise ConfigError("aggregate: must be 'geomean' or 'mean'")
        if self.monitor.strategy == "entropy" and self.top_k < 2:
            raise ConfigError("top_k: entropy monitoring needs at least 2 alternatives")
        if self.answer_max_tokens < 1 or self.conclusion_cap < 1:
            raise ConfigError("answer_max_tokens/conclusion_cap: must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class InductionAttempt:
    transition: TransitionPoint
    trials: list[TrialAnswer]
    decision: ExitDecision
    calibrated: Optional[CalibratedConfidence] = None
    # Time from the transition until the next thought chunk (or the exit
    # decision) was available.
    latency_ms: float = 0.0


@dataclass
class RunRecord:
    question_id: str
    mode: str
    transcript: str = ""
    thought_chunks: list[str] = field(default_factory=list)
    induction_attempts: list[InductionAttempt] = field(default_factory=list)
    exited_early: bool = False
    exit_chunk_index: Optional[int] = None
    reasoning_tokens: int = 0
    induced_tokens: int = 0
    conclusion_tokens: int = 0
    cancelled_tokens: int = 0
    final_answer: Optional[str] = None
    wall_time_ms: int = 0
    finish: str = ""
    round: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["type"] = "record"
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunRecord":
        d = {k: v for k, v in d.items() if k != "type"}
        attempts = []
        for a in d.pop("induction_attempts", []):
            tp = TransitionPoint(**a["transition"])
            dec = a["decision"]
            dec["transition"] = TransitionPoint(**dec["transition"]) if dec.get("transition") else None
            attempts.append(InductionAttempt(
                tp, [TrialAnswer(**t) for t in a["trials"]], ExitDecision(**dec),
                CalibratedConfidence(**a["calibrated"]) if a.get("calibrated") else None,
                a.get("latency_ms", 0.0),
            ))
        return cls(induction_attempts=attempts, **d)


def build_prompt(question: str, config: ControllerConfig) -> str:
    return config.prompt_template.format(
        system_prompt=config.system_prompt, question=question, think_open=config.think_open)


def _box_closed(text: str) -> bool:
    i = len(text) - len(text.lstrip())
    if i >= len(text):
        return False
    if text[i] != "{":
        return "\n" in text
    return balanced_span(text, i) is not None


def parse_trial_answer(result: GenerationResult, inducer_id: int, config: ControllerConfig) -> TrialAnswer:
    """Score the tokens inside the induced ``\\boxed{...}``.

    Each token's probability is the largest among its returned alternatives,
    which under greedy decoding is the emitted token's own probability.
    """
    text = result.text
    i = len(text) - len(text.lstrip())
    opened = i < len(text) and text[i] == "{"
    close = balanced_span(text, i) if opened else None
    kw = dict(induced_tokens=len(result.tokens), finish_reason=result.finish_reason)
    if close is None and opened and config.confidence_token_cap is not None:
        # Capped generation (code mode) rarely reaches the closing brace.
        close = len(text)
    if close is None:
        return TrialAnswer.score("", [], inducer_id, config.aggregate, **kw)
    lo, hi = i + 1, close
    probs, pos = [], 0
    for tok in result.tokens:
        end = pos + len(tok.text)
        if end > lo and pos < hi:
            if tok.max_prob > tok.prob * (1 + 1e-9):
                logger.debug("induced token %r is not the top alternative", tok.text)
            probs.append(tok.max_prob)
        pos = end
    if config.confidence_token_cap is not None:
        probs = probs[: config.confidence_token_cap]
    return TrialAnswer.score(text[lo:hi].strip(), probs, inducer_id, config.aggregate, **kw)


class _Clock:
    """Run time: measured, or composed from backend-reported latencies."""

    def __init__(self, virtual: bool):
        self.virtual = virtual
        self.t0 = time.perf_counter()
        self.composed = 0.0

    def add(self, seconds: float):
        self.composed += seconds

    def ms(self) -> int:
        secs = self.composed if self.virtual else time.perf_counter() - self.t0
        return int(round(secs * 1000))


class DeerController:
    """Drives one question at a time through a backend.

    Instances hold no per-question state, so one controller may serve
    several threads.
    """

    def __init__(self, backend: Backend, config: ControllerConfig):
        config.validate()
        self.backend = backend
        self.config = config

    # -- backend calls -------------------------------------------------

    def _request(self, prompt: str, max_tokens: int, stops=(), halt=None) -> GenerationRequest:
        c = self.config
        return GenerationRequest(prompt, max_tokens, list(stops), True, c.top_k, c.temperature, c.seed, halt)

    def _thought_stops(self) -> list[str]:
        c = self.config
        stops = [c.think_close]
        if c.mode != "vanilla":
            if c.monitor.strategy == "marker":
                stops += [m for m in c.monitor.markers if m]
            else:
                stops.append(c.monitor.step_delimiter)
        return stops

    def _induction_requests(self, context: str) -> list[tuple[int, GenerationRequest]]:
        c = self.config
        n = c.n_prompts if c.mode == "deer_pro" else 1
        cap = c.answer_max_tokens
        if c.confidence_token_cap is not None:
            # Room for the opening brace and a little slack around the cap.
            cap = min(cap, c.confidence_token_cap + 2)
        return [(k, self._request(context + c.inducer_prompts[k], cap, halt=_box_closed)) for k in range(n)]

    # -- main loop -----------------------------------------------------

    def run(self, question: str, question_id: str = "") -> RunRecord:
        c = self.config
        rec = RunRecord(question_id=question_id, mode=c.mode)
        clock = _Clock(getattr(self.backend, "virtual_time", False))
        try:
            self._run(question, rec, clock)
        except Exception as exc:
            rec.wall_time_ms = clock.ms()
            rec.finish = "error"
            raise RunAborted(exc, rec) from exc
        rec.wall_time_ms = clock.ms()
        return rec

    def _budget_used(self, rec: RunRecord) -> int:
        used = rec.reasoning_tokens + rec.conclusion_tokens
        if self.config.count_induced_in_budget:
            used += rec.induced_tokens
        return used

    def _run(self, question: str, rec: RunRecord, clock: _Clock):
        c = self.config
        prompt = build_prompt(question, c)
        thoughts = ""
        chunk_start = 0
        stops = self._thought_stops()
        parallel = c.mode == "deer_parallel"
        pending: Optional[GenerationResult] = None
        # Sequential mode: the attempt whose latency still lacks the resumed chunk.
        awaiting: Optional[InductionAttempt] = None

        while True:
            if pending is not None:
                res, pending = pending, None
            else:
                remaining = c.max_total_tokens - self._budget_used(rec)
                if remaining <= 0:
                    rec.finish = "budget_exhausted"
                    break
                res = self.backend.generate(self._request(prompt + thoughts, remaining, stops))
                clock.add(res.elapsed)
                if awaiting is not None:
                    awaiting.latency_ms += 1000 * res.elapsed
                    awaiting = None
            rec.reasoning_tokens += res.consumed_tokens
            thoughts += res.text

            if res.finish_reason != "stop_sequence_hit":
                rec.finish = res.finish_reason
                break
            stop = res.matched_stop
            if stop == c.think_close:
                rec.finish = "think_close"
                break

            # A transition candidate: the text ``resume`` follows it on the original path.
            if c.monitor.strategy == "marker":
                tp = marker_transition(thoughts, stop, c.monitor)
                resume, probe_tokens = stop, 0
                if tp is None:
                    thoughts += stop
                    continue
            else:
                if c.max_total_tokens - self._budget_used(rec) <= 0:
                    thoughts += stop
                    rec.finish = "budget_exhausted"
                    break
                probe = self.backend.generate(self._request(prompt + thoughts + stop, 1, [c.think_close]))
                clock.add(probe.elapsed)
                if probe.finish_reason == "stop_sequence_hit":
                    # The model closes its thinking right after the step.
                    thoughts += stop
                    rec.reasoning_tokens += probe.consumed_tokens
                    rec.finish = "think_close"
                    break
                if not probe.tokens:
                    thoughts += stop
                    rec.finish = probe.finish_reason
                    break
                tp = scan_entropy(probe.tokens[0], c.monitor, char_offset=len(thoughts))
                resume, probe_tokens = stop + probe.text, probe.consumed_tokens
                if tp is None:
                    thoughts += resume
                    rec.reasoning_tokens += probe_tokens
                    continue

            context = prompt + thoughts
            cont: Optional[GenerationHandle] = None
            if parallel:
                remaining = c.max_total_tokens - self._budget_used(rec) - probe_tokens
                if remaining > 0:
                    cont = self.backend.submit(self._request(context + resume, remaining, stops))
            attempt, ind_elapsed = self._induce(context, tp)
            rec.induction_attempts.append(attempt)
            rec.induced_tokens += sum(t.induced_tokens for t in attempt.trials)

            if attempt.decision.exit:
                if cont is not None:
                    self.backend.cancel(cont, at=ind_elapsed)
                    partial = cont.result()
                    rec.cancelled_tokens += partial.consumed_tokens
                    rec.induced_tokens += partial.consumed_tokens
                clock.add(ind_elapsed)
                attempt.latency_ms = 1000 * ind_elapsed
                # The transition token is replaced by the end-of-thinking
                # delimiter; a probed entropy token is discarded.
                rec.induced_tokens += probe_tokens
                rec.thought_chunks.append(thoughts[chunk_start:])
                rec.exited_early = True
                rec.exit_chunk_index = len(rec.thought_chunks)
                rec.finish = "early_exit"
                break

            rec.thought_chunks.append(thoughts[chunk_start:])
            chunk_start = len(thoughts)
            thoughts += resume
            rec.reasoning_tokens += probe_tokens
            if cont is not None:
                pending = cont.result()
                span = max(ind_elapsed, pending.elapsed)
                clock.add(span)
                attempt.latency_ms = 1000 * span
            else:
                clock.add(ind_elapsed)
                attempt.latency_ms = 1000 * ind_elapsed
                awaiting = attempt

        if not rec.exited_early:
            rec.thought_chunks.append(thoughts[chunk_start:])

        transcript = thoughts
        if rec.finish in ("think_close", "early_exit"):
            transcript += c.think_close
            room = min(c.max_total_tokens - self._budget_used(rec), c.conclusion_cap)
            if room > 0:
                concl = self.backend.generate(self._request(prompt + transcript, room))
                clock.add(concl.elapsed)
                rec.conclusion_tokens += concl.consumed_tokens
                transcript += concl.text
        rec.transcript = transcript
        rec.final_answer = extract_boxed(transcript.rpartition(c.think_close)[2]) or None

    def _induce(self, context: str, tp: TransitionPoint) -> tuple[InductionAttempt, float]:
        c = self.config
        reqs = self._induction_requests(context)
        if len(reqs) == 1:
            results = [self.backend.generate(reqs[0][1])]
        else:
            handles = [self.backend.submit(r) for _, r in reqs]
            results = [h.result() for h in handles]
        trials = [parse_trial_answer(r, k, c) for (k, _), r in zip(reqs, results)]
        elapsed = max(r.elapsed for r in results)
        if c.mode == "deer_pro" and len(trials) > 1:
            cal = calibrate([t.confidence for t in trials], c.alpha)
            score = cal.c_cali
        else:
            cal, score = None, trials[0].confidence
        return InductionAttempt(tp, trials, decide_exit(score, c.lam, tp), cal), elapsed


def run_deer(question: str, config: ControllerConfig, backend: Backend, question_id: str = "") -> RunRecord:
    return DeerController(backend, config).run(question, question_id)


def run_deer_pro(question: str, config: ControllerConfig, backend: Backend, question_id: str = "") -> RunRecord:
    if config.mode != "deer_pro":
        config = _with_mode(config, "deer_pro")
    return DeerController(backend, config).run(question, question_id)


def run_parallel_branch(question: str, config: ControllerConfig, backend: Backend, question_id: str = "") -> RunRecord:
    if config.mode != "deer_parallel":
        config = _with_mode(config, "deer_parallel")
    return DeerController(backend, config).run(question, question_id)


def _with_mode(config: ControllerConfig, mode: str) -> ControllerConfig:
    return replace(config, mode=mode)
