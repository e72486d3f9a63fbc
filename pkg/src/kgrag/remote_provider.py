"""HTTP provider: OpenAI-style chat-completion and embedding endpoints.

Request/response shapes:

* ``POST {endpoint}/chat/completions`` with ``{model, messages, temperature,
  max_tokens}`` -> ``{choices: [{message: {content}}]}``
* ``POST {endpoint}/embeddings`` with ``{model, input}`` ->
  ``{data: [{embedding: [...]}, ...]}`` (one entry per input, in order)
* ``POST {endpoint}/rerank`` with ``{model, query, documents}`` ->
  ``{results: [{index, relevance_score}, ...]}``

Transient failures (network errors, HTTP 5xx/429) are retried with
exponential backoff up to ``max_retries``; anything else raises
immediately.
"""
from __future__ import annotations

import logging
import os
import time

import httpx

from .gateway import (
    Gateway,
    GatewayConfigError,
    GenerationRequest,
    ProtocolError,
    ProviderConfig,
    Role,
    TransportError,
)

logger = logging.getLogger(__name__)

_RETRY_STATUS = {429, 500, 502, 503, 504}

_ROLE_MODEL_FIELD = {
    Role.SUMMARIZE: "graph_model",
    Role.KEYWORDS: "graph_model",
    Role.EXTRACT_HIGH: "graph_model",
    Role.EXTRACT_MID: "graph_model",
    Role.EXTRACT_LOW: "graph_model",
    Role.COMPLETE_ATTRIBUTES: "graph_model",
    Role.DECOMPOSE: "generation_model",
    Role.REFINE_QUERY: "generation_model",
    Role.ANSWER: "generation_model",
    Role.JUDGE_CLAIMS: "judge_model",
}


class RemoteGateway(Gateway):
    def __init__(self, config: ProviderConfig, cache=None, transport: httpx.BaseTransport | None = None):
        super().__init__(config, cache)
        if not config.endpoint:
            raise GatewayConfigError("remote provider requires a non-empty endpoint")
        api_key = os.environ.get(config.api_key_env, "")
        if not api_key:
            raise GatewayConfigError(
                f"remote endpoint configured but env var {config.api_key_env} is unset"
            )
        self._client = httpx.Client(
            base_url=config.endpoint.rstrip("/"),
            headers={"Authorization": f"Bearer {api_key}"},
            timeout=config.timeout_s,
            transport=transport,
        )
        self.backoff_base_s = 0.25

    def close(self) -> None:
        self._client.close()

    def _post(self, path: str, payload: dict) -> dict:
        last_error: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                time.sleep(self.backoff_base_s * 2 ** (attempt - 1))
            try:
                resp = self._client.post(path, json=payload)
            except httpx.HTTPError as exc:
                last_error = exc
                logger.warning("transport failure on %s (attempt %d): %s", path, attempt + 1, exc)
                continue
            if resp.status_code in _RETRY_STATUS:
                last_error = TransportError(f"{path} returned {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise TransportError(f"{path} returned {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise ProtocolError(f"{path} returned non-JSON body") from exc
        raise TransportError(f"{path} failed after {self.config.max_retries + 1} attempts: {last_error}")

    def generate(self, req: GenerationRequest) -> str:
        model = getattr(self.config, _ROLE_MODEL_FIELD[req.role])
        data = self._post(
            "/chat/completions",
            {
                "model": model,
                "messages": [{"role": "user", "content": req.prompt}],
                "temperature": req.temperature,
                "max_tokens": req.max_output_tokens,
            },
        )
        try:
            return str(data["choices"][0]["message"]["content"])
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"unexpected chat completion shape: {exc!r}") from exc

    def _embed_raw(self, texts: list[str]) -> list[list[float]]:
        data = self._post("/embeddings", {"model": self.config.embedding_model, "input": texts})
        try:
            return [[float(x) for x in item["embedding"]] for item in data["data"]]
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"unexpected embeddings shape: {exc!r}") from exc

    def rerank(self, query: str, candidates: list[str]) -> list[tuple[int, float]]:
        if not candidates:
            raise ValueError("candidates must be non-empty")
        data = self._post(
            "/rerank",
            {"model": self.config.reranker_model, "query": query, "documents": list(candidates)},
        )
        try:
            pairs = [(int(r["index"]), float(r["relevance_score"])) for r in data["results"]]
        except (KeyError, TypeError) as exc:
            raise ProtocolError(f"unexpected rerank shape: {exc!r}") from exc
        return sorted(pairs, key=lambda s: (-s[1], s[0]))


def make_gateway(config: ProviderConfig, cache=None) -> Gateway:
    """Mock when no endpoint is configured, remote otherwise."""
    if config.endpoint:
        return RemoteGateway(config, cache)
    from .mock_provider import MockGateway

    return MockGateway(config, cache)
