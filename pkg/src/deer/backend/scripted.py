"""Deterministic scripted backend.

A script file is JSON Lines.  Each script starts with a ``script`` header and
is followed by the main token trace and any branch traces::

    {"type": "script", "id": "q1", "match": "What is 6*7?", "anchor": "<think>\\n",
     "think_close": "</think>", "tick": 0.01}
    {"type": "token", "text": "Six", "prob": 0.97, "alts": [["6", 0.02]]}
    ...
    {"type": "branch", "suffix": "\\n\\n Final Answer\\n\\\\boxed", "at": 57,
     "tokens": [{"text": "{", "prob": 1.0}, {"text": "42", "prob": 0.99}]}
    {"type": "error", "kind": "transport"}

``match`` selects the script whose text occurs in the prompt (omitted: any
prompt).  Everything in the prompt after the last ``anchor`` is the text
generated so far.  If it is a prefix of the main trace, generation resumes
from that character offset.  Otherwise it must be a main-trace prefix
followed by a branch ``suffix`` (an inducer prompt, or ``think_close`` for a
forced conclusion); the branch whose ``at`` equals the prefix length wins over
one with ``at`` omitted.  A forced conclusion with no branch falls back to the
main trace's own conclusion.  Anything else produces zero tokens.

``tick`` is the virtual latency per produced token, reported in
``GenerationResult.elapsed``.  An ``error`` line makes every call to that
script fail (``transport`` is retryable, ``protocol`` is not).
"""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

from .base import (
    Backend,
    GenerationHandle,
    GenerationRequest,
    GenerationResult,
    ProtocolError,
    RetryableBackendError,
    TokenEvent,
    collect,
)

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ScriptToken:
    text: str
    prob: float
    alts: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if not 0.0 < self.prob <= 1.0:
            raise ValueError(f"token prob must be in (0, 1], got {self.prob} for {self.text!r}")

    def to_json(self) -> dict:
        d = {"text": self.text, "prob": self.prob}
        if self.alts:
            d["alts"] = [list(a) for a in self.alts]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ScriptToken":
        return cls(d["text"], float(d["prob"]), tuple((a[0], float(a[1])) for a in d.get("alts", ())))


@dataclass
class Branch:
    suffix: str
    tokens: list[ScriptToken]
    at: Optional[int] = None


@dataclass
class Script:
    tokens: list[ScriptToken]
    branches: list[Branch] = field(default_factory=list)
    id: str = ""
    match: Optional[str] = None
    anchor: str = "<think>\n"
    think_close: str = "</think>"
    tick: float = 0.0
    error: Optional[str] = None

    @property
    def text(self) -> str:
        return "".join(t.text for t in self.tokens)

    def header(self) -> dict:
        d = {"type": "script", "version": SCHEMA_VERSION, "id": self.id, "anchor": self.anchor,
             "think_close": self.think_close, "tick": self.tick}
        if self.match is not None:
            d["match"] = self.match
        return d


def load_scripts(path) -> list[Script]:
    scripts: list[Script] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            kind = rec.get("type")
            if kind == "script":
                scripts.append(Script(
                    tokens=[], id=rec.get("id", ""), match=rec.get("match"),
                    anchor=rec.get("anchor", "<think>\n"),
                    think_close=rec.get("think_close", "</think>"),
                    tick=float(rec.get("tick", 0.0)),
                ))
                continue
            if not scripts:
                # A bare token list is a single match-anything script.
                scripts.append(Script(tokens=[]))
            cur = scripts[-1]
            if kind == "token":
                cur.tokens.append(ScriptToken.from_json(rec))
            elif kind == "branch":
                cur.branches.append(Branch(
                    rec["suffix"], [ScriptToken.from_json(t) for t in rec["tokens"]], rec.get("at")))
            elif kind == "error":
                cur.error = rec.get("kind", "transport")
            else:
                raise ValueError(f"{path}:{lineno}: unknown record type {kind!r}")
    return scripts


def dump_scripts(scripts: Iterable[Script], path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in scripts:
            fh.write(json.dumps(s.header()) + "\n")
            for t in s.tokens:
                fh.write(json.dumps({"type": "token", **t.to_json()}) + "\n")
            for b in s.branches:
                rec = {"type": "branch", "suffix": b.suffix, "at": b.at,
                       "tokens": [t.to_json() for t in b.tokens]}
                fh.write(json.dumps(rec) + "\n")
            if s.error:
                fh.write(json.dumps({"type": "error", "kind": s.error}) + "\n")


def _event(tok: ScriptToken, text: str, top_k: int) -> TokenEvent:
    alts = [(tok.text, tok.prob), *tok.alts]
    alts.sort(key=lambda a: -a[1])
    alts = alts[:top_k]
    if not any(a[0] == tok.text for a in alts):
        alts[-1] = (tok.text, tok.prob)
    lp_alts = [(a if a != tok.text else text, math.log(p)) for a, p in alts]
    return TokenEvent.build(text, math.log(tok.prob), lp_alts)


def _stream_from(tokens: list[ScriptToken], offset: int, top_k: int) -> Iterator[TokenEvent]:
    pos = 0
    for tok in tokens:
        end = pos + len(tok.text)
        if end > offset:
            piece = tok.text[max(0, offset - pos):]
            yield _event(tok, piece, top_k)
        pos = end


class _VirtualHandle(GenerationHandle):
    """Cancellation on the virtual clock.

    Without real sleeps a submitted call finishes at thread-scheduling speed,
    so a plain cancel would race.  Instead the call runs to completion and a
    cancel at virtual time ``at`` keeps only the tokens produced by then.
    """

    def __init__(self, future, cancel_event):
        super().__init__(future, cancel_event)
        self._cutoff: Optional[float] = None

    def cancel_at(self, at: Optional[float]):
        if at is None:
            super().cancel()
        else:
            self._cutoff = at

    def result(self, timeout: Optional[float] = None) -> GenerationResult:
        res = self._future.result(timeout)
        if self._cutoff is None or res.consumed_tokens == 0 or res.elapsed <= self._cutoff:
            return res
        tick = res.elapsed / res.consumed_tokens
        n = min(int(self._cutoff / tick + 1e-9), len(res.tokens))
        return GenerationResult(res.tokens[:n], "cancelled", None, tick * n)

    @property
    def cancelled(self) -> bool:
        return self._cutoff is not None or super().cancelled


class ScriptedBackend(Backend):
    """Replays scripts; a pure function of (scripts, request).

    With ``realtime=True`` each token also sleeps ``tick`` seconds of wall
    time, which gives cancellation something to interrupt.
    """

    virtual_time = True

    def __init__(self, scripts: list[Script], realtime: bool = False, max_concurrency: int = 8):
        super().__init__(max_concurrency)
        self.scripts = list(scripts)
        self.realtime = realtime

    @classmethod
    def from_file(cls, path, **kw) -> "ScriptedBackend":
        return cls(load_scripts(Path(path)), **kw)

    def submit(self, request: GenerationRequest) -> GenerationHandle:
        h = super().submit(request)
        return h if self.realtime else _VirtualHandle(h._future, h._cancel)

    def cancel(self, handle: GenerationHandle, at: Optional[float] = None):
        if isinstance(handle, _VirtualHandle):
            handle.cancel_at(at)
        else:
            handle.cancel()

    def select(self, prompt: str) -> Script:
        for s in self.scripts:
            if s.match is None or s.match in prompt:
                return s
        raise ProtocolError("no script matches this prompt")

    def resolve(self, prompt: str) -> tuple[Script, list[ScriptToken], int]:
        """Return (script, token trace, char offset) that continues ``prompt``."""
        script = self.select(prompt)
        i = prompt.rfind(script.anchor)
        if i < 0:
            raise ProtocolError(f"prompt lacks the script anchor {script.anchor!r}")
        so_far = prompt[i + len(script.anchor):]
        main = script.text
        if main.startswith(so_far):
            return script, script.tokens, len(so_far)
        best = None
        for b in script.branches:
            if not b.suffix or not so_far.endswith(b.suffix):
                continue
            at = len(so_far) - len(b.suffix)
            if not main.startswith(so_far[:at]):
                continue
            if b.at == at:
                best = b
                break
            if b.at is None and best is None:
                best = b
        if best is not None:
            return script, best.tokens, 0
        if so_far.endswith(script.think_close) and main.startswith(so_far[: -len(script.think_close)]):
            j = main.find(script.think_close)
            if j >= 0:
                return script, script.tokens, j + len(script.think_close)
        return script, [], 0

    def _generate(self, request: GenerationRequest, cancel: threading.Event) -> GenerationResult:
        script, tokens, offset = self.resolve(request.prompt)
        if script.error == "transport":
            raise RetryableBackendError(f"scripted transport failure ({script.id or 'script'})")
        if script.error:
            raise ProtocolError(f"scripted protocol failure ({script.id or 'script'})")
        k = request.top_k if request.want_logprobs else 1

        def stream():
            for ev in _stream_from(tokens, offset, k):
                if self.realtime and script.tick > 0:
                    time.sleep(script.tick)
                yield ev

        res = collect(stream(), request, cancel)
        res.elapsed = script.tick * res.consumed_tokens
        return res
