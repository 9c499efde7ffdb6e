from __future__ import annotations

import asyncio
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import httpx
import orjson
from bs4 import BeautifulSoup
from pydantic import BaseModel, Field, ValidationError, model_validator
from rank_bm25 import BM25Okapi
from tenacity import AsyncRetrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from app.errors import ConfigError, EmptyRetrieval, IndexMissing, SearchUnavailable
from app.schemas import KnowledgeChunk, KnowledgeSource, SearchHit
from app.settings import RetrieverSettings, SearchSettings, Settings
from app.utils import read_jsonl, sha256_hex, tokenize

logger = logging.getLogger(__name__)

RetrieverConfig = RetrieverSettings


def chunk_document(text: str, cfg: RetrieverConfig) -> list[str]:
    """Sliding windows over whitespace tokens with stride chunk_size - chunk_overlap."""
    tokens = text.split()
    stride = cfg.chunk_size - cfg.chunk_overlap
    return [" ".join(tokens[start : start + cfg.chunk_size]) for start in range(0, len(tokens), stride)]


class CorpusStats(BaseModel):
    doc_count: int = Field(..., gt=0)
    avg_doc_len: float = Field(..., gt=0)
    doc_freq: dict[str, int] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _df_bounded(self) -> "CorpusStats":
        if any(df > self.doc_count for df in self.doc_freq.values()):
            raise ValueError("document frequency cannot exceed document count")
        return self

    @classmethod
    def build(cls, docs_terms: list[list[str]]) -> "CorpusStats":
        doc_freq: Counter[str] = Counter()
        for terms in docs_terms:
            doc_freq.update(set(terms))
        total = sum(len(terms) for terms in docs_terms)
        return cls(doc_count=len(docs_terms), avg_doc_len=total / len(docs_terms), doc_freq=dict(doc_freq))

    def idf(self, term: str) -> float:
        df = self.doc_freq.get(term, 0)
        return math.log((self.doc_count - df + 0.5) / (df + 0.5) + 1)


def bm25_score(query_terms: list[str], doc_terms: list[str], stats: CorpusStats, cfg: RetrieverConfig) -> float:
    """Okapi BM25 with the +1 smoothed IDF, so scores are never negative."""
    tf = Counter(doc_terms)
    norm = cfg.k1 * (1 - cfg.b + cfg.b * len(doc_terms) / stats.avg_doc_len)
    score = 0.0
    for term in query_terms:
        freq = tf.get(term, 0)
        if freq:
            score += stats.idf(term) * freq * (cfg.k1 + 1) / (freq + norm)
    return score


class SmoothedBM25(BM25Okapi):
    """BM25Okapi with the +1 smoothed IDF used by :func:`bm25_score`."""

    def _calc_idf(self, nd: dict[str, int]) -> None:
        self.idf = {term: math.log((self.corpus_size - df + 0.5) / (df + 0.5) + 1) for term, df in nd.items()}


@dataclass
class IndexedChunk:
    id: str
    text: str
    origin: str


@dataclass
class ChunkIndex:
    chunks: list[IndexedChunk]
    bm25: SmoothedBM25 | None

    @classmethod
    def build(
        cls,
        documents: list[tuple[str, str]],
        cfg: RetrieverConfig,
        id_for: Callable[[str], str] | None = None,
    ) -> "ChunkIndex":
        """Index ``(origin, text)`` documents; chunk ids default to ``origin#n``."""
        chunks: list[IndexedChunk] = []
        terms: list[list[str]] = []
        for origin, text in documents:
            prefix = id_for(origin) if id_for else origin
            for position, chunk in enumerate(chunk_document(text, cfg)):
                chunks.append(IndexedChunk(f"{prefix}#{position}", chunk, origin))
                terms.append(tokenize(chunk))
        bm25 = SmoothedBM25(terms, k1=cfg.k1, b=cfg.b) if any(terms) else None
        return cls(chunks=chunks, bm25=bm25)

    def rank(self, query: str, cfg: RetrieverConfig) -> list[KnowledgeChunk]:
        if self.bm25 is None:
            return []
        scores = self.bm25.get_scores(tokenize(query))
        scored = [(float(score), chunk) for score, chunk in zip(scores, self.chunks) if score > 0]
        scored.sort(key=lambda pair: (-pair[0], pair[1].id))
        return [
            KnowledgeChunk(
                id=chunk.id,
                text=chunk.text,
                source=KnowledgeSource.EXTERNAL,
                origin=chunk.origin,
                score=score,
                query=query,
            )
            for score, chunk in scored[: cfg.top_k]
        ]


def load_corpus(path: Path, cfg: RetrieverConfig) -> ChunkIndex:
    """Read a JSONL corpus of ``{"id", "title", "text"}`` documents and index its chunks."""
    documents: list[tuple[str, str]] = []
    try:
        for line_number, row in read_jsonl(path):
            if not isinstance(row, dict) or "id" not in row or "text" not in row:
                raise ConfigError(f"corpus line {line_number} needs id and text")
            title = row.get("title") or ""
            documents.append((str(row["id"]), f"{title}\n{row['text']}" if title else row["text"]))
    except (OSError, orjson.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read corpus {path}: {exc}") from exc
    index = ChunkIndex.build(documents, cfg)
    logger.info("indexed corpus", extra={"path": str(path), "documents": len(documents), "chunks": len(index.chunks)})
    return index


def search_local(query: str, index: ChunkIndex | None, cfg: RetrieverConfig) -> list[KnowledgeChunk]:
    if index is None:
        raise IndexMissing("local corpus has not been indexed")
    return index.rank(query, cfg)


def strip_html(body: str) -> str:
    soup = BeautifulSoup(body, "html.parser")
    for tag in soup(["script", "style", "noscript"]):
        tag.decompose()
    return soup.get_text(" ", strip=True)


class SearchProvider(Protocol):
    async def search(self, query: str, count: int) -> list[SearchHit]: ...

    async def fetch(self, url: str) -> str: ...

    async def aclose(self) -> None: ...


class HttpSearchProvider:
    """JSON search API returning ``{"results": [{"title", "url", "snippet"}]}``."""

    def __init__(self, settings: SearchSettings, api_key: str | None, client: httpx.AsyncClient | None = None) -> None:
        self.settings = settings
        self._client = client or httpx.AsyncClient(timeout=settings.request_timeout, follow_redirects=True)
        self._headers = {"X-API-Key": api_key} if api_key else {}

    async def search(self, query: str, count: int) -> list[SearchHit]:
        try:
            async for attempt in AsyncRetrying(
                stop=stop_after_attempt(3),
                wait=wait_exponential(multiplier=0.5, exp_base=2),
                retry=retry_if_exception_type(httpx.TransportError),
                reraise=True,
            ):
                with attempt:
                    response = await self._client.get(
                        self.settings.search_url, params={"q": query, "count": count}, headers=self._headers
                    )
        except httpx.TransportError as exc:
            raise SearchUnavailable(f"search endpoint unreachable: {exc}") from exc
        if response.status_code // 100 != 2:
            raise SearchUnavailable(f"search endpoint returned {response.status_code}")
        try:
            results = response.json().get("results", [])
            return [SearchHit(**item) for item in results[:count] if isinstance(item, dict) and item.get("url")]
        except (ValueError, AttributeError, TypeError, ValidationError) as exc:
            raise SearchUnavailable(f"unreadable search reply: {exc.__class__.__name__}") from exc

    async def fetch(self, url: str) -> str:
        response = await self._client.get(url)
        response.raise_for_status()
        return strip_html(response.text)

    async def aclose(self) -> None:
        await self._client.aclose()


class ReplaySearchProvider:
    """Canned results: ``queries.json`` maps query -> urls, ``pages/<sha256(url)>.txt`` holds bodies."""

    def __init__(self, fixtures_dir: Path, strict: bool = True) -> None:
        self.fixtures_dir = fixtures_dir
        self.strict = strict
        try:
            self._queries: dict[str, list[str]] = orjson.loads((fixtures_dir / "queries.json").read_bytes())
        except (OSError, orjson.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read replay fixtures in {fixtures_dir}: {exc}") from exc

    async def search(self, query: str, count: int) -> list[SearchHit]:
        urls = self._queries.get(query)
        if urls is None:
            if self.strict:
                raise SearchUnavailable(f"no replay fixture for query {query!r}")
            return []
        return [SearchHit(url=url) for url in urls[:count]]

    async def fetch(self, url: str) -> str:
        return (self.fixtures_dir / "pages" / f"{sha256_hex(url)}.txt").read_text(encoding="utf-8")

    async def aclose(self) -> None:
        pass


async def search_web(
    query: str,
    provider: SearchProvider,
    cfg: RetrieverConfig,
    result_count: int = 5,
    max_in_flight: int = 4,
    warnings: list[str] | None = None,
) -> list[KnowledgeChunk]:
    """Search, fetch every result page, chunk, then BM25-rank chunks over the fetched set."""
    hits = await provider.search(query, result_count)
    urls = list(dict.fromkeys(hit.url for hit in hits))
    if not urls:
        return []
    semaphore = asyncio.Semaphore(max_in_flight)

    async def _fetch(url: str) -> str | None:
        async with semaphore:
            try:
                return await provider.fetch(url)
            except (httpx.HTTPError, OSError, UnicodeDecodeError) as exc:
                message = f"skipped page {url}: {exc.__class__.__name__}"
                logger.warning(message, extra={"query": query})
                if warnings is not None:
                    warnings.append(message)
                return None

    bodies = await asyncio.gather(*(_fetch(url) for url in urls))
    pages = [(url, body) for url, body in zip(urls, bodies) if body and body.strip()]
    if not pages:
        raise EmptyRetrieval(f"no page could be fetched for query {query!r}")
    index = ChunkIndex.build(pages, cfg, id_for=lambda url: sha256_hex(url)[:12])
    return index.rank(query, cfg)


@dataclass
class RetrievalOutcome:
    chunks: list[KnowledgeChunk]
    warnings: list[str] = field(default_factory=list)


class KnowledgeRetriever(Protocol):
    async def retrieve(self, query: str) -> RetrievalOutcome: ...

    async def aclose(self) -> None: ...


class LocalRetriever:
    def __init__(self, index: ChunkIndex | None, cfg: RetrieverConfig) -> None:
        self.index = index
        self.cfg = cfg

    async def retrieve(self, query: str) -> RetrievalOutcome:
        return RetrievalOutcome(search_local(query, self.index, self.cfg))

    async def aclose(self) -> None:
        pass


class WebRetriever:
    def __init__(
        self, provider: SearchProvider, cfg: RetrieverConfig, result_count: int = 5, max_in_flight: int = 4
    ) -> None:
        self.provider = provider
        self.cfg = cfg
        self.result_count = result_count
        self.max_in_flight = max_in_flight

    async def retrieve(self, query: str) -> RetrievalOutcome:
        warnings: list[str] = []
        chunks = await search_web(query, self.provider, self.cfg, self.result_count, self.max_in_flight, warnings)
        return RetrievalOutcome(chunks, warnings)

    async def aclose(self) -> None:
        await self.provider.aclose()


def create_retriever(settings: Settings) -> KnowledgeRetriever:
    search = settings.search
    if search.provider == "local":
        if search.corpus_path is None:
            raise ConfigError("search.corpus_path is required for the local provider")
        return LocalRetriever(load_corpus(search.corpus_path, settings.retriever), settings.retriever)
    if search.provider == "replay":
        if search.fixtures_dir is None:
            raise ConfigError("search.fixtures_dir is required for the replay provider")
        provider: SearchProvider = ReplaySearchProvider(search.fixtures_dir, strict=search.strict)
    else:
        key = settings.search_key.get_secret_value() if settings.search_key else None
        provider = HttpSearchProvider(search, key)
    return WebRetriever(provider, settings.retriever, search.result_count, search.max_in_flight)
