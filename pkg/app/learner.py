"""Experiential learning: snippet/content memory and the evolving user profile."""
from __future__ import annotations

import asyncio
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import orjson
from pydantic import ValidationError

from app import prompts
from app.errors import ConfigError, LLMError, MemoryPersistFailed
from app.llm import LLMGateway
from app.schemas import (
    BasicInfo,
    IncrementalProfile,
    KnowledgeChunk,
    KnowledgeSource,
    MemoryRecord,
    SessionTranscript,
    ThemePreference,
    UserProfile,
)
from app.trigger import Embedder
from app.utils import atomic_write, dumps, normalize_text, read_jsonl

logger = logging.getLogger(__name__)

SNIPPET_MAX_CHARS = 200
PROFILE_FACETS = ["theme_preferences", "question_demands", "basic_information", "personalized_information"]

_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


@dataclass(frozen=True)
class MemorySnapshot:
    records: tuple[MemoryRecord, ...]
    matrix: np.ndarray


class MemoryStore:
    """Append-only snippet/content records, deduplicated on normalized snippet.

    Reads go through :meth:`snapshot`; writers hold :attr:`lock`.
    """

    def __init__(self, embedder: Embedder, path: Path | None = None, records: list[MemoryRecord] | None = None) -> None:
        self.embedder = embedder
        self.path = path
        self.lock = asyncio.Lock()
        self._records: list[MemoryRecord] = []
        self._keys: set[str] = set()
        self._ids: set[str] = set()
        self._snapshot: MemorySnapshot | None = None
        for record in records or []:
            if record.id in self._ids or self.contains_snippet(record.snippet):
                logger.warning("skipped duplicate memory record", extra={"record_id": record.id, "path": str(path)})
                continue
            self._insert(record)

    @classmethod
    def load(cls, path: Path, embedder: Embedder) -> "MemoryStore":
        records: list[MemoryRecord] = []
        if path.exists():
            try:
                records = [MemoryRecord(**row) for _, row in read_jsonl(path)]
            except (OSError, orjson.JSONDecodeError, ValidationError, TypeError) as exc:
                raise ConfigError(f"cannot load memory file {path}: {exc}") from exc
        for record in records:
            if len(record.embedding) != embedder.dim:
                raise ConfigError(f"memory record {record.id} has {len(record.embedding)} dims, expected {embedder.dim}")
        return cls(embedder, path=path, records=records)

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> tuple[MemoryRecord, ...]:
        return tuple(self._records)

    def snapshot(self) -> MemorySnapshot:
        if self._snapshot is None:
            if self._records:
                matrix = np.asarray([record.embedding for record in self._records], dtype=np.float64)
            else:
                matrix = np.zeros((0, self.embedder.dim), dtype=np.float64)
            self._snapshot = MemorySnapshot(tuple(self._records), matrix)
        return self._snapshot

    def get(self, record_id: str) -> MemoryRecord | None:
        return next((record for record in self._records if record.id == record_id), None)

    def contains_snippet(self, snippet: str) -> bool:
        return normalize_text(snippet) in self._keys

    def add(self, snippet: str, content: str, session_id: str, round_index: int) -> MemoryRecord | None:
        """Append a record unless its normalized snippet is already stored."""
        if self.contains_snippet(snippet):
            return None
        record = MemoryRecord(
            id=self._next_id(),
            snippet=snippet,
            content=content,
            embedding=self.embedder.embed(snippet).tolist(),
            created_session=session_id,
            created_round=round_index,
        )
        self._insert(record)
        return record

    def _next_id(self) -> str:
        number = len(self._records) + 1
        while f"mem-{number:06d}" in self._ids:
            number += 1
        return f"mem-{number:06d}"

    def _insert(self, record: MemoryRecord) -> None:
        self._records.append(record)
        self._ids.add(record.id)
        self._keys.add(normalize_text(record.snippet))
        self._snapshot = None

    def persist(self) -> None:
        if self.path is None:
            return
        payload = b"".join(dumps(record.model_dump(mode="json")) + b"\n" for record in self._records)
        try:
            atomic_write(self.path, payload)
        except OSError as exc:
            raise MemoryPersistFailed(f"cannot write memory file {self.path}: {exc}") from exc


def first_sentence(content: str, limit: int = SNIPPET_MAX_CHARS) -> str:
    return _SENTENCE_END.split(content.strip(), maxsplit=1)[0][:limit]


async def summarize_snippet(gateway: LLMGateway, content: str) -> str:
    if not content.strip():
        raise ValueError("content must not be empty")
    try:
        parsed = await gateway.ask_structured(prompts.SNIPPET, {"content": content}, ["snippet"])
    except LLMError as exc:
        logger.info("snippet summary fell back to first sentence", extra={"reason": str(exc)})
        return first_sentence(content)
    snippet = parsed["snippet"]
    if not isinstance(snippet, str) or not snippet.strip():
        return first_sentence(content)
    return snippet.strip()[:SNIPPET_MAX_CHARS]


async def update_memory(
    gateway: LLMGateway,
    store: MemoryStore,
    kept_chunks: list[KnowledgeChunk],
    session_id: str,
    round_index: int,
) -> MemoryStore:
    """Fold kept external chunks into memory; memory-sourced chunks are already stored."""
    external = [chunk for chunk in kept_chunks if chunk.source is KnowledgeSource.EXTERNAL]
    if not external:
        return store
    snippets = await asyncio.gather(*(summarize_snippet(gateway, chunk.text) for chunk in external))
    async with store.lock:
        added = []
        for chunk, snippet in zip(external, snippets):
            # embedding may be a blocking network call
            record = await asyncio.to_thread(store.add, snippet, chunk.text, session_id, round_index)
            if record is not None:
                added.append(record)
        if added:
            logger.debug("memory grew", extra={"added": len(added), "size": len(store)})
            store.persist()
    return store


def _dedupe(existing: list[str], incoming: list[str]) -> list[str]:
    merged = list(existing)
    seen = {normalize_text(item) for item in existing}
    for item in incoming:
        key = normalize_text(item)
        if item.strip() and key not in seen:
            seen.add(key)
            merged.append(item.strip())
    return merged


def merge_profile(profile: UserProfile, incremental: IncrementalProfile, session_id: str) -> UserProfile:
    """Latest evidence wins for attitudes and basic facts; lists are deduplicated."""
    themes = [pref.model_copy() for pref in profile.theme_preferences]
    positions = {normalize_text(pref.topic): index for index, pref in enumerate(themes)}
    for pref in incremental.theme_preferences:
        key = normalize_text(pref.topic)
        if key in positions:
            themes[positions[key]] = ThemePreference(topic=themes[positions[key]].topic, attitude=pref.attitude)
        else:
            positions[key] = len(themes)
            themes.append(pref)

    basic = {item.key: item.value for item in profile.basic_information}
    for item in incremental.basic_information:
        basic[item.key] = item.value

    return UserProfile(
        theme_preferences=themes,
        question_demands=_dedupe(profile.question_demands, incremental.question_demands),
        basic_information=[BasicInfo(key=key, value=value) for key, value in basic.items()],
        personalized_information=_dedupe(profile.personalized_information, incremental.personalized_information),
        last_updated_session=session_id,
    )


def render_transcript(transcript: SessionTranscript) -> str:
    return "\n".join(
        f"Round {turn.round_index}\nUser: {turn.question}\nAssistant: {turn.answer}" for turn in transcript.turns
    )


async def update_profile(
    gateway: LLMGateway,
    profile: UserProfile,
    transcript: SessionTranscript,
    warnings: list[str] | None = None,
) -> UserProfile:
    if not transcript.turns:
        raise ValueError("transcript must contain at least one turn")
    try:
        parsed = await gateway.ask_structured(
            prompts.PROFILE, {"transcript": render_transcript(transcript)}, PROFILE_FACETS
        )
        incremental = IncrementalProfile(**{facet: parsed[facet] for facet in PROFILE_FACETS})
    except (LLMError, ValidationError, TypeError) as exc:
        message = f"profile extraction failed for session {transcript.session_id}: {exc}"
        logger.warning(message)
        if warnings is not None:
            warnings.append(message)
        return profile
    return merge_profile(profile, incremental, transcript.session_id)
