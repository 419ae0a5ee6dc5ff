"""Shared HTTP plumbing for the remote backend, embedder, and analyst."""

from __future__ import annotations

import logging
import os
import time
from typing import Optional

import httpx

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 60.0
DEFAULT_RETRIES = 2


class TransportError(RuntimeError):
    """A remote call failed after exhausting its retries."""


class ServiceClient:
    """Small JSON-over-HTTP client with bearer auth and bounded retries.

    The auth token is read from an environment variable so configs can be
    committed without secrets. An explicit httpx transport can be injected
    for in-process (ASGI) use.
    """

    def __init__(
        self,
        base_url: str,
        token_env: Optional[str] = None,
        timeout: float = DEFAULT_TIMEOUT,
        retries: int = DEFAULT_RETRIES,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.retries = retries
        headers = {}
        token = os.environ.get(token_env, "") if token_env else ""
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(
            base_url=self.base_url,
            headers=headers,
            timeout=timeout,
            transport=transport,
        )

    def post(self, path: str, payload: dict) -> dict:
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                response = self._client.post(path, json=payload)
                response.raise_for_status()
                return response.json()
            except (httpx.HTTPError, ValueError) as exc:
                last_error = exc
                if attempt < self.retries:
                    logger.warning(
                        "POST %s%s failed (%s), retry %d/%d",
                        self.base_url, path, exc, attempt + 1, self.retries,
                    )
                    time.sleep(min(0.2 * 2**attempt, 2.0))
        raise TransportError(
            f"POST {self.base_url}{path} failed after {self.retries + 1} attempts: {last_error}"
        )

    def close(self) -> None:
        self._client.close()
