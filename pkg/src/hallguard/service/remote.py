"""JSON-over-HTTP clients for out-of-process NLI, SBD and rewriter models.

Wire protocol (POST, JSON bodies):

* NLI:     ``{"premise", "hypothesis"}`` → ``{"score"}`` with score in [0, 1]
* SBD:     ``{"document", "tokens": [...]}`` → ``{"scores": [...]}``, one per token
* rewrite: ``{"prompt"}`` → ``{"text", "output_tokens"}``

Transport errors are retried once. Anything else that goes wrong surfaces as
:class:`BackendError`, which the detector fan-out treats like any other
detector failure.
"""

from __future__ import annotations

import math
from typing import Any, Dict, List, Optional, Sequence, Tuple

import httpx

from ..core import DetectorError


class BackendError(DetectorError):
    """Remote backend failure; ``cause`` is timeout, transport, http_status or malformed."""


def remote_backend_call(
    endpoint: str,
    payload: Dict[str, Any],
    timeout: float = 0.3,
    retries: int = 1,
    client: Optional[httpx.Client] = None,
    backend: str = "remote",
) -> Dict[str, Any]:
    if not endpoint:
        raise ValueError("endpoint not configured")
    own = client is None
    client = client or httpx.Client()
    try:
        for attempt in range(retries + 1):
            try:
                resp = client.post(endpoint, json=payload, timeout=timeout)
                break
            except httpx.TimeoutException as exc:
                if attempt == retries:
                    raise BackendError(backend, "timeout", str(exc)) from exc
            except httpx.TransportError as exc:
                if attempt == retries:
                    raise BackendError(backend, "transport", str(exc)) from exc
    finally:
        if own:
            client.close()
    if not 200 <= resp.status_code < 300:
        raise BackendError(backend, "http_status", f"HTTP {resp.status_code}")
    try:
        body = resp.json()
    except ValueError as exc:
        raise BackendError(backend, "malformed", "response is not JSON") from exc
    if not isinstance(body, dict):
        raise BackendError(backend, "malformed", "response must be a JSON object")
    return body


def _probability(value: Any, backend: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise BackendError(backend, "malformed", f"score {value!r} is not a number")
    value = float(value)
    if not math.isfinite(value) or not 0.0 <= value <= 1.0:
        raise BackendError(backend, "malformed", f"score {value} outside [0, 1]")
    return value


class _Remote:
    backend = "remote"

    def __init__(self, url: str, timeout: float = 0.3, retries: int = 1,
                 client: Optional[httpx.Client] = None):
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.client = client

    def _call(self, payload):
        return remote_backend_call(self.url, payload, self.timeout, self.retries,
                                   self.client, self.backend)


class RemoteNliBackend(_Remote):
    backend = "nli"

    def score(self, premise: str, hypothesis: str) -> float:
        body = self._call({"premise": premise, "hypothesis": hypothesis})
        return _probability(body.get("score"), self.backend)


class RemoteSbdBackend(_Remote):
    backend = "sbd"

    def label(self, document: str, response_tokens: Sequence[str]) -> List[float]:
        body = self._call({"document": document, "tokens": list(response_tokens)})
        scores = body.get("scores")
        if not isinstance(scores, list):
            raise BackendError(self.backend, "malformed", "missing scores list")
        if len(scores) != len(response_tokens):
            raise BackendError(self.backend, "malformed",
                               f"{len(scores)} scores for {len(response_tokens)} tokens")
        return [_probability(s, self.backend) for s in scores]


class RemoteRewriter(_Remote):
    backend = "rewriter"

    def __init__(self, url: str, timeout: float = 30.0, retries: int = 1,
                 client: Optional[httpx.Client] = None):
        super().__init__(url, timeout, retries, client)

    def rewrite(self, prompt: str) -> Tuple[str, int]:
        body = self._call({"prompt": prompt})
        text, tokens = body.get("text"), body.get("output_tokens")
        if not isinstance(text, str):
            raise BackendError(self.backend, "malformed", "missing text")
        if isinstance(tokens, bool) or not isinstance(tokens, int) or tokens < 0:
            raise BackendError(self.backend, "malformed", "output_tokens must be a non-negative integer")
        return text, tokens
