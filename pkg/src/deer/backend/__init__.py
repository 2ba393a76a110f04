from .base import (
    Backend,
    BackendError,
    GenerationHandle,
    GenerationRequest,
    GenerationResult,
    ProtocolError,
    RetryableBackendError,
    StopMatcher,
    TokenEvent,
    topk_entropy,
)
from .http import OpenAICompletionsBackend
from .scripted import Branch, Script, ScriptedBackend, ScriptToken, dump_scripts, load_scripts

__all__ = [
    "Backend",
    "BackendError",
    "Branch",
    "GenerationHandle",
    "GenerationRequest",
    "GenerationResult",
    "OpenAICompletionsBackend",
    "ProtocolError",
    "RetryableBackendError",
    "Script",
    "ScriptToken",
    "ScriptedBackend",
    "StopMatcher",
    "TokenEvent",
    "dump_scripts",
    "load_scripts",
    "topk_entropy",
]
