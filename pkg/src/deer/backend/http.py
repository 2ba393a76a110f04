"""Client for OpenAI-compatible ``/v1/completions`` endpoints with logprobs."""

from __future__ import annotations

import json
import logging
import threading
import time
from typing import Any, Iterator, Optional

import httpx

from .base import (
    Backend,
    GenerationRequest,
    GenerationResult,
    ProtocolError,
    RetryableBackendError,
    TokenEvent,
    collect,
)

logger = logging.getLogger(__name__)

MAX_RETRIES = 3


def _token_events(logprobs: dict, want_logprobs: bool) -> list[TokenEvent]:
    """Convert one ``choices[].logprobs`` block into TokenEvents."""
    toks = logprobs.get("tokens")
    lps = logprobs.get("token_logprobs")
    tops = logprobs.get("top_logprobs")
    if toks is None or lps is None or len(toks) != len(lps):
        raise ProtocolError("logprobs block lacks aligned tokens/token_logprobs")
    if tops is not None and len(tops) != len(toks):
        raise ProtocolError("top_logprobs length does not match tokens")
    events = []
    for i, (tok, lp) in enumerate(zip(toks, lps)):
        if lp is None:
            if want_logprobs:
                raise ProtocolError(f"missing logprob for token {i}")
            lp = 0.0
        # Servers occasionally report tiny positive values from float noise.
        lp = min(float(lp), 0.0)
        alts = None
        if tops is not None and tops[i]:
            alts = [(t, min(float(v), 0.0)) for t, v in tops[i].items()]
        events.append(TokenEvent.build(tok, lp, alts))
    return events


class OpenAICompletionsBackend(Backend):
    """Generates through an OpenAI-compatible completion server.

    Responses are streamed so that cancellation and client-side stops can
    close the connection early.  Stop sequences are also sent to the server;
    ``include_stop_str_in_output`` asks servers that support it to keep the
    stop text so the client can report which one matched.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: Optional[str] = None,
        timeout: float = 600.0,
        stream: bool = True,
        max_concurrency: int = 8,
        backoff: float = 0.5,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        super().__init__(max_concurrency)
        self.url = endpoint.rstrip("/")
        if not self.url.endswith("/completions"):
            self.url += "/v1/completions" if not self.url.endswith("/v1") else "/completions"
        self.model = model
        self.stream = stream
        self.backoff = backoff
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(
            timeout=timeout,
            headers=headers,
            transport=transport,
            limits=httpx.Limits(max_connections=max_concurrency),
        )

    def close(self):
        super().close()
        self._client.close()

    def payload(self, request: GenerationRequest) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": self.model,
            "prompt": request.prompt,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
            "echo": False,
            "stream": self.stream,
        }
        if request.stop_sequences:
            body["stop"] = list(request.stop_sequences)
            body["include_stop_str_in_output"] = True
        if request.want_logprobs:
            body["logprobs"] = request.top_k
        if request.seed is not None:
            body["seed"] = request.seed
        return body

    def _generate(self, request: GenerationRequest, cancel: threading.Event) -> GenerationResult:
        attempt = 0
        while True:
            t0 = time.perf_counter()
            try:
                res = self._attempt(request, cancel)
                res.elapsed = time.perf_counter() - t0
                return res
            except RetryableBackendError as exc:
                if attempt >= MAX_RETRIES or cancel.is_set():
                    raise
                delay = self.backoff * 2**attempt
                logger.warning("backend transport error (%s); retry %d in %.2fs", exc, attempt + 1, delay)
                attempt += 1
                time.sleep(delay)

    def _attempt(self, request: GenerationRequest, cancel: threading.Event) -> GenerationResult:
        body = self.payload(request)
        server_stop: list[Optional[str]] = [None]

        def events() -> Iterator[TokenEvent]:
            try:
                if self.stream:
                    with self._client.stream("POST", self.url, json=body) as resp:
                        self._check_status(resp, streamed=True)
                        for chunk in self._sse_chunks(resp):
                            yield from self._choice_events(chunk, request, server_stop)
                else:
                    resp = self._client.post(self.url, json=body)
                    self._check_status(resp)
                    try:
                        data = resp.json()
                    except ValueError as exc:
                        raise ProtocolError(f"response is not JSON: {exc}") from exc
                    yield from self._choice_events(data, request, server_stop)
            except httpx.TransportError as exc:
                raise RetryableBackendError(str(exc)) from exc

        res = collect(events(), request, cancel)
        if res.finish_reason == "end_of_text" and server_stop[0] in request.stop_sequences:
            res = GenerationResult(res.tokens, "stop_sequence_hit", server_stop[0])
        elif res.finish_reason == "end_of_text" and server_stop[0] == "length":
            res = GenerationResult(res.tokens, "budget_exhausted")
        return res

    @staticmethod
    def _check_status(resp: httpx.Response, streamed: bool = False):
        if resp.status_code == 429 or resp.status_code >= 500:
            raise RetryableBackendError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            if streamed:
                resp.read()
            raise ProtocolError(f"HTTP {resp.status_code}: {resp.text[:200]}")

    @staticmethod
    def _sse_chunks(resp: httpx.Response) -> Iterator[dict]:
        for line in resp.iter_lines():
            line = line.strip()
            if not line or not line.startswith("data:"):
                continue
            data = line[5:].strip()
            if data == "[DONE]":
                return
            try:
                yield json.loads(data)
            except ValueError as exc:
                raise ProtocolError(f"malformed stream chunk: {data[:120]!r}") from exc

    @staticmethod
    def _choice_events(data: dict, request: GenerationRequest, server_stop: list) -> Iterator[TokenEvent]:
        try:
            choice = data["choices"][0]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError("response has no choices") from exc
        lp = choice.get("logprobs")
        if lp:
            yield from _token_events(lp, request.want_logprobs)
        elif choice.get("text"):
            if request.want_logprobs:
                raise ProtocolError("logprobs requested but missing from response")
            yield TokenEvent.build(choice["text"], 0.0, with_entropy=False)
        reason = choice.get("finish_reason")
        if reason == "length":
            server_stop[0] = "length"
        elif reason == "stop":
            # vLLM and SGLang report the matched stop string here.
            stop_reason = choice.get("stop_reason", choice.get("matched_stop"))
            if isinstance(stop_reason, str):
                server_stop[0] = stop_reason

