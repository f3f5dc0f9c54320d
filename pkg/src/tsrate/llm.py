"""Minimal OpenAI-compatible chat-completions client.

Sampling temperature is deliberately not sent: the provider default supplies
the stochasticity that repeat voting needs.
"""

from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field

from tsrate.judge import API_KEY_ENV

logger = logging.getLogger(__name__)


class TransportError(RuntimeError):
    """A request failed after exhausting the retry budget."""


def _requests_transport(url: str, headers: dict, payload: dict, timeout: float) -> dict:
    import requests

    response = requests.post(url, headers=headers, json=payload, timeout=timeout)
    if response.status_code == 429 or response.status_code >= 500:
        raise TransportError(f"HTTP {response.status_code}: {response.text[:200]}")
    response.raise_for_status()
    return response.json()


@dataclass
class LLMClient:
    """Chat-completions caller with exponential-backoff retries.

    ``transport`` is injectable for tests: a callable
    ``(url, headers, payload, timeout) -> parsed-json``.
    """

    endpoint: str
    model: str
    api_key: str | None = None
    timeout: float = 30.0
    max_retries: int = 3
    backoff_base: float = 1.0
    transport: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.api_key is None:
            self.api_key = os.environ.get(API_KEY_ENV)
        if self.transport is None:
            self.transport = _requests_transport

    @property
    def url(self) -> str:
        return self.endpoint.rstrip("/") + "/chat/completions"

    def complete(self, prompt: str) -> str:
        """Send one user prompt and return the assistant text."""
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        }
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                doc = self.transport(self.url, headers, payload, self.timeout)
                return doc["choices"][0]["message"]["content"]
            except Exception as exc:  # transport and shape errors both retry
                last_error = exc
                if attempt < self.max_retries:
                    delay = self.backoff_base * (2.0**attempt)
                    logger.warning(
                        "chat request failed (%s); retrying in %.1fs", exc, delay
                    )
                    time.sleep(delay)
        raise TransportError(
            f"chat request failed after {self.max_retries + 1} attempts"
        ) from last_error
