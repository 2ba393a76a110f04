"""Generate scripted-backend fixtures with a known pearl position.

A scenario names how many thought chunks the model writes, after which chunk
the trial answer first becomes confident enough to exit (the pearl), and
the confidence of each trial answer.  The generated script reproduces that
trace exactly under the scripted backend.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .backend.scripted import Branch, Script, ScriptToken
from .confidence import DEFAULT_LAMBDA
from .controller import INDUCER_PROMPTS, ControllerConfig, run_deer
from .monitor import MonitorConfig

LOW_CONFIDENCE = 0.5
HIGH_CONFIDENCE = 0.99
# Two equally likely next tokens: entropy ln 2 ~ 0.693 nats.
HIGH_ENTROPY_ALTS = (("So", 0.5),)
LOW_ENTROPY_ALTS = (("Then", 0.01),)


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    chunks: int
    pearl: Optional[int] = None
    confidences: list[float] = field(default_factory=list)
    prompt_confidences: Optional[list[list[float]]] = None
    id: str = "q0"
    question: Optional[str] = None
    answer: str = "42"
    wrong_answer: str = "41"
    vanilla_answer: Optional[str] = None
    monitor: str = "marker"
    marker: str = "Wait"
    lam: float = DEFAULT_LAMBDA
    tick: float = 0.0
    tokens_per_chunk: int = 6
    n_prompts: int = len(INDUCER_PROMPTS)

    @classmethod
    def from_json(cls, d: dict) -> "Scenario":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def question_text(self) -> str:
        return self.question or f"Question {self.id}: what is the answer?"

    def attempt_confidences(self) -> list[float]:
        """Confidence of the trial answer after each of the ``chunks - 1`` transitions."""
        n = self.chunks - 1
        out = []
        for k in range(1, n + 1):
            if k <= len(self.confidences):
                out.append(float(self.confidences[k - 1]))
            elif self.pearl is None:
                out.append(0.0)
            else:
                out.append(LOW_CONFIDENCE if k < self.pearl else HIGH_CONFIDENCE)
        return out

    def validate(self):
        if self.chunks < 1:
            raise ScenarioError("chunks must be >= 1")
        if self.pearl is not None and not 1 <= self.pearl <= self.chunks - 1:
            raise ScenarioError(
                f"pearl {self.pearl} impossible with {self.chunks} chunks "
                f"(transitions follow chunks 1..{self.chunks - 1})")
        if len(self.confidences) > self.chunks - 1:
            raise ScenarioError("more confidences than transitions")
        if self.monitor not in ("marker", "entropy"):
            raise ScenarioError("monitor must be 'marker' or 'entropy'")
        if not 0 < self.lam < 1:
            raise ScenarioError("lambda must lie in (0, 1)")
        if self.tokens_per_chunk < 2:
            raise ScenarioError("tokens_per_chunk must be >= 2")
        confs = self.attempt_confidences()
        for c in confs:
            if not 0.0 <= c <= 1.0:
                raise ScenarioError(f"confidence {c} outside [0, 1]")
        if self.pearl is not None:
            if any(c > self.lam for c in confs[: self.pearl - 1]):
                raise ScenarioError("a confidence before the pearl already exceeds lambda")
            if not confs[self.pearl - 1] > self.lam:
                raise ScenarioError("the pearl's confidence does not exceed lambda")
        elif any(c > self.lam for c in confs):
            raise ScenarioError("pearl is none but a confidence exceeds lambda")
        if self.prompt_confidences is not None:
            if len(self.prompt_confidences) != len(confs):
                raise ScenarioError("prompt_confidences needs one list per transition")
            for row in self.prompt_confidences:
                if len(row) != self.n_prompts or not all(0.0 <= c <= 1.0 for c in row):
                    raise ScenarioError(f"each prompt_confidences row needs {self.n_prompts} values in [0, 1]")


def _chunk_tokens(k: int, sc: Scenario) -> list[ScriptToken]:
    body = [ScriptToken(f" step{k}_{j}", 0.9) for j in range(sc.tokens_per_chunk - 2)]
    if sc.monitor == "marker":
        head = [ScriptToken(sc.marker, 0.6), ScriptToken(",", 0.95)] if k > 1 else [
            ScriptToken("Let", 0.8), ScriptToken(" me", 0.95)]
        return head + body + [ScriptToken(". ", 0.9)]
    head = [ScriptToken("\n\n", 0.9), ScriptToken("Hmm", 0.5, HIGH_ENTROPY_ALTS)] if k > 1 else [
        ScriptToken("Let", 0.8), ScriptToken(" me", 0.95)]
    # A low-entropy step boundary inside the chunk, which must not trigger.
    mid = len(body) // 2
    body = body[:mid] + [ScriptToken("\n\n", 0.9), ScriptToken("Then", 0.99, LOW_ENTROPY_ALTS)] + body[mid:]
    return head + body + [ScriptToken(".", 0.9)]


def _trial_tokens(conf: float, answer: str) -> list[ScriptToken]:
    if conf <= 0.0:
        return [ScriptToken(" not", 0.6), ScriptToken(" sure", 0.6), ScriptToken("\n", 0.9)]
    return [ScriptToken("{", 1.0), ScriptToken(answer, conf), ScriptToken("}", 1.0)]


def _conclusion(answer: str) -> list[ScriptToken]:
    return [ScriptToken("\n\n", 0.99), ScriptToken("The answer is ", 0.98),
            ScriptToken("\\boxed{", 0.99), ScriptToken(answer, 0.99), ScriptToken("}.", 0.99)]


def script_gen(sc: Scenario) -> Script:
    """Build the scripted trace for ``sc``; raises ScenarioError on inconsistent input."""
    sc.validate()
    confs = sc.attempt_confidences()
    tokens: list[ScriptToken] = []
    branches: list[Branch] = []
    offset = 0
    for k in range(1, sc.chunks + 1):
        chunk = _chunk_tokens(k, sc)
        tokens += chunk
        offset += sum(len(t.text) for t in chunk)
        if k == sc.chunks:
            break
        ans = sc.answer if sc.pearl is not None and k >= sc.pearl else sc.wrong_answer
        row = sc.prompt_confidences[k - 1] if sc.prompt_confidences else [confs[k - 1]] * sc.n_prompts
        for p, conf in enumerate(row):
            branches.append(Branch(INDUCER_PROMPTS[p], _trial_tokens(conf, ans), at=offset))
        branches.append(Branch("</think>", _conclusion(ans), at=offset))
    tokens += [ScriptToken("\n", 0.9), ScriptToken("</think>", 0.9)]
    tokens += _conclusion(sc.vanilla_answer or sc.answer)
    return Script(tokens, branches, id=sc.id, match=sc.question_text, tick=sc.tick)


def scenario_config(sc: Scenario, **overrides) -> ControllerConfig:
    monitor = MonitorConfig(strategy=sc.monitor, markers=[sc.marker])
    kw = dict(mode="deer", lam=sc.lam, monitor=monitor)
    kw.update(overrides)
    return ControllerConfig(**kw)


def verify_script(script: Script, sc: Scenario) -> None:
    """Run the controller on ``script`` and check it exits exactly at the pearl."""
    from .backend.scripted import ScriptedBackend

    with ScriptedBackend([script]) as backend:
        rec = run_deer(sc.question_text, scenario_config(sc), backend, sc.id)
    expected = sc.pearl
    if rec.exit_chunk_index != expected:
        raise ScenarioError(f"generated script exits at {rec.exit_chunk_index}, expected {expected}")

