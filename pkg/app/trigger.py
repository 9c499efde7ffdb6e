"""Knowledge-boundary check based on memory popularity.

Pop(q) counts memory snippets whose similarity to ``q`` reaches ``tau``; a
query is inside the boundary when Pop(q) >= ``theta``.
"""
from __future__ import annotations

from collections import Counter
from functools import lru_cache
from typing import TYPE_CHECKING, NamedTuple, Protocol

import httpx
import numpy as np
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from app.errors import BackendRejected, BackendUnavailable, ConfigError, InvalidText
from app.schemas import BoundaryDecision, MemoryRecord
from app.settings import EmbedderSettings, Settings, TriggerSettings
from app.utils import sha256_hex, tokenize

if TYPE_CHECKING:
    from app.learner import MemorySnapshot

TriggerConfig = TriggerSettings

# Similarity equal to tau must count even when float error lands just below it.
SIMILARITY_TOLERANCE = 1e-9


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...

    def close(self) -> None: ...


@lru_cache(maxsize=65536)
def _bucket(token: str, dim: int) -> int:
    return int(sha256_hex(token)[:16], 16) % dim


class LexicalEmbedder:
    """Hashed term-count vector, L2-normalized. Text without tokens maps to the zero vector."""

    def __init__(self, dim: int = 4096) -> None:
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        vector = np.zeros(self.dim, dtype=np.float64)
        for token, count in Counter(tokenize(text)).items():
            vector[_bucket(token, self.dim)] += count
        norm = np.linalg.norm(vector)
        return vector / norm if norm > 0 else vector

    def close(self) -> None:
        pass


class HttpEmbedder:
    """OpenAI-style ``/embeddings`` endpoint, normalized client side.

    Calls block; async callers run them with :func:`asyncio.to_thread`.
    """

    def __init__(self, settings: EmbedderSettings, api_key: str | None, client: httpx.Client | None = None) -> None:
        self.settings = settings
        self.dim = settings.dim
        self._client = client or httpx.Client(timeout=30)
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}

    def embed(self, text: str) -> np.ndarray:
        url = f"{self.settings.base_url.rstrip('/')}/embeddings"
        try:
            for attempt in Retrying(
                stop=stop_after_attempt(3),
                wait=wait_exponential(multiplier=0.5, exp_base=2),
                retry=retry_if_exception_type(httpx.TransportError),
                reraise=True,
            ):
                with attempt:
                    response = self._client.post(
                        url, json={"model": self.settings.model, "input": text}, headers=self._headers
                    )
        except httpx.TransportError as exc:
            raise BackendUnavailable(f"embedding backend unreachable: {exc}") from exc
        if response.status_code // 100 != 2:
            raise BackendRejected(response.status_code, response.text)
        try:
            vector = np.asarray(response.json()["data"][0]["embedding"], dtype=np.float64)
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendRejected(response.status_code, f"unreadable embedding reply: {exc.__class__.__name__}") from exc
        if vector.shape != (self.dim,):
            raise BackendRejected(response.status_code, f"expected {self.dim} dimensions, got {vector.shape}")
        norm = np.linalg.norm(vector)
        return vector / norm if norm > 0 else vector

    def close(self) -> None:
        self._client.close()


def create_embedder(settings: Settings) -> Embedder:
    if settings.embedder.kind == "lexical":
        return LexicalEmbedder(settings.embedder.dim)
    if settings.api_key is None:
        raise ConfigError("ERAGENT_API_KEY must be set for the http embedder")
    return HttpEmbedder(settings.embedder, settings.api_key.get_secret_value())


def similarity(a: str, b: str, embedder: Embedder) -> float:
    if not a.strip() or not b.strip():
        raise InvalidText("similarity needs two non-empty texts")
    value = float(np.dot(embedder.embed(a), embedder.embed(b)))
    return max(-1.0, min(1.0, value))


class MemoryMatch(NamedTuple):
    record: MemoryRecord
    similarity: float


def match_memory(query: str, memory: "MemorySnapshot", cfg: TriggerConfig, embedder: Embedder) -> list[MemoryMatch]:
    """Records whose snippet similarity reaches tau, best first, ties by ascending id."""
    if not memory.records:
        return []
    scores = memory.matrix @ embedder.embed(query)
    matches = [
        MemoryMatch(record, float(score))
        for record, score in zip(memory.records, scores)
        if score >= cfg.tau - SIMILARITY_TOLERANCE
    ]
    matches.sort(key=lambda match: (-match.similarity, match.record.id))
    return matches


def popularity(query: str, memory: "MemorySnapshot", cfg: TriggerConfig, embedder: Embedder) -> int:
    return len(match_memory(query, memory, cfg, embedder))


def decide(query: str, matches: list[MemoryMatch], cfg: TriggerConfig) -> BoundaryDecision:
    return BoundaryDecision(
        query=query,
        popularity=len(matches),
        inside=len(matches) >= cfg.theta,
        matched_records=[match.record.id for match in matches],
        similarities=[round(match.similarity, 6) for match in matches],
    )


def classify(query: str, memory: "MemorySnapshot", cfg: TriggerConfig, embedder: Embedder) -> BoundaryDecision:
    return decide(query, match_memory(query, memory, cfg, embedder), cfg)
