"""Remote backends speaking the OpenAI-style chat/embeddings wire format.

Rerank uses a ``POST {base}/rerank`` endpoint taking ``{model, query,
documents, instruction}`` and returning ``{"results": [{"index",
"relevance_score"}]}``, the shape served by common reranker servers.
"""

from __future__ import annotations

import logging
from typing import Any, Optional, Sequence

import httpx
import numpy as np

from dualcare.llm.client import ChatRequest
from dualcare.llm.errors import LLMError, TransportError

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 60.0


class _HttpBackend:
    def __init__(
        self,
        base_url: str,
        model: str,
        api_key: Optional[str] = None,
        *,
        timeout: float = DEFAULT_TIMEOUT,
        transport: Optional[httpx.BaseTransport] = None,
    ):
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self.model = model
        self._client = httpx.Client(
            base_url=base_url.rstrip("/"), headers=headers, timeout=timeout, transport=transport
        )

    def _post(self, path: str, body: dict[str, Any]) -> dict[str, Any]:
        try:
            resp = self._client.post(path, json=body)
        except httpx.HTTPError as exc:
            raise TransportError(f"{path}: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"{path}: HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise LLMError(f"{path}: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise TransportError(f"{path}: response is not JSON") from exc

    def close(self) -> None:
        self._client.close()


class OpenAICompatChat(_HttpBackend):
    def chat(self, request: ChatRequest) -> str:
        body = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "temperature": request.temperature,
            "response_format": {"type": "json_object"},
        }
        data = self._post("/chat/completions", body)
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed chat response: {str(data)[:200]}") from exc


class OpenAICompatEmbedder(_HttpBackend):
    def __init__(self, base_url: str, model: str, dim: int, api_key: Optional[str] = None, **kw):
        super().__init__(base_url, model, api_key, **kw)
        self.dim = dim

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        data = self._post("/embeddings", {"model": self.model, "input": list(texts)})
        try:
            items = sorted(data["data"], key=lambda d: d["index"])
            return np.asarray([d["embedding"] for d in items], dtype=np.float64)
        except (KeyError, TypeError) as exc:
            raise TransportError(f"malformed embedding response: {str(data)[:200]}") from exc


class HttpReranker(_HttpBackend):
    def score(self, instruction: str, query: str, passage: str) -> float:
        body = {"model": self.model, "query": query, "documents": [passage], "instruction": instruction}
        data = self._post("/rerank", body)
        try:
            return float(data["results"][0]["relevance_score"])
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise TransportError(f"malformed rerank response: {str(data)[:200]}") from exc
