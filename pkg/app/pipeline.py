"""Round and session orchestration.

One round runs rewrite -> per-query boundary check -> memory or external
knowledge -> merge -> filter -> read -> learn, and fills a :class:`RoundTrace`.
"""
from __future__ import annotations

import asyncio
import logging
import time
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field

from app.errors import EmptyRetrieval, RecallError, InvalidQuestion, MemoryPersistFailed, RewriteFailed
from app.filter import KnowledgeFilter
from app.learner import MemorySnapshot, update_memory, update_profile
from app.llm import LLMGateway, create_gateway
from app.reader import Reader
from app.retriever import KnowledgeRetriever, RetrieverConfig, create_retriever
from app.rewriter import QuestionRewriter, RewriteMode, fallback_result, load_terminology
from app.schemas import (
    AnswerRecord,
    BoundaryDecision,
    FilteredKnowledge,
    KnowledgeChunk,
    KnowledgeSource,
    ReaderInput,
    ReaderStyle,
    RoundTrace,
    SessionTranscript,
    Turn,
    UserProfile,
)
from app.settings import Settings
from app.state import StateRepository, UserState
from app.trigger import Embedder, TriggerConfig, create_embedder, decide, match_memory
from app.utils import append_jsonl, normalize_text

logger = logging.getLogger(__name__)


class Component(StrEnum):
    REWRITER = "rewriter"
    TRIGGER = "trigger"
    FILTER = "filter"
    LEARNER = "learner"


ALL_COMPONENTS = frozenset(Component)

# evaluation setting -> (enabled components, rewriter mode)
EVAL_SETTINGS: dict[str, tuple[frozenset[Component], RewriteMode]] = {
    "standard": (frozenset(), "enhanced"),
    "rewriter": (frozenset({Component.REWRITER}), "single"),
    "rewriter_plus": (frozenset({Component.REWRITER}), "enhanced"),
    "filter": (frozenset({Component.FILTER}), "enhanced"),
    "rewriter_plus_filter": (frozenset({Component.REWRITER, Component.FILTER}), "enhanced"),
}


class PipelineConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    trigger: TriggerConfig = Field(default_factory=TriggerConfig)
    retriever: RetrieverConfig = Field(default_factory=RetrieverConfig)
    reader_style: ReaderStyle = ReaderStyle.PERSONALIZED
    components: frozenset[Component] = ALL_COMPONENTS
    max_queries: int = Field(default=4, ge=1)
    rewrite_mode: RewriteMode = "enhanced"
    retrieve_rewritten: bool = False
    profile_update: Literal["session", "round"] = "session"

    @classmethod
    def from_settings(cls, settings: Settings) -> "PipelineConfig":
        return cls(
            trigger=settings.trigger,
            retriever=settings.retriever,
            reader_style=ReaderStyle(settings.pipeline.reader_style),
            components=frozenset(Component(name) for name in settings.pipeline.components),
            max_queries=settings.pipeline.max_queries,
            retrieve_rewritten=settings.pipeline.retrieve_rewritten,
            profile_update=settings.pipeline.profile_update,
        )

    def enabled(self, component: Component) -> bool:
        return component in self.components

    def for_setting(self, name: str) -> "PipelineConfig":
        """One-round evaluation wiring: no trigger, no learner, basic reader."""
        if name not in EVAL_SETTINGS:
            raise ValueError(f"unknown evaluation setting {name!r}")
        components, mode = EVAL_SETTINGS[name]
        return self.model_copy(
            update={"components": components, "rewrite_mode": mode, "reader_style": ReaderStyle.BASIC}
        )

    def with_tau(self, tau: float) -> "PipelineConfig":
        return self.model_copy(update={"trigger": self.trigger.model_copy(update={"tau": tau})})


def merge_chunks(per_query: list[list[KnowledgeChunk]]) -> list[KnowledgeChunk]:
    """Query-major, rank-preserving concatenation deduplicated on normalized text."""
    seen: set[str] = set()
    merged: list[KnowledgeChunk] = []
    for chunks in per_query:
        for chunk in chunks:
            key = normalize_text(chunk.text)
            if key not in seen:
                seen.add(key)
                merged.append(chunk)
    return merged


def elapsed_ms(started: float) -> int:
    return max(0, round((time.perf_counter() - started) * 1000))


class Pipeline:
    def __init__(
        self,
        gateway: LLMGateway,
        retriever: KnowledgeRetriever,
        embedder: Embedder,
        cfg: PipelineConfig,
        rewriter: QuestionRewriter | None = None,
    ) -> None:
        self.gateway = gateway
        self.retriever = retriever
        self.embedder = embedder
        self.cfg = cfg
        self.rewriter = rewriter or QuestionRewriter(gateway, cfg.max_queries, mode=cfg.rewrite_mode)
        self.filter = KnowledgeFilter(gateway)
        self.reader = Reader(gateway)

    def with_config(self, cfg: PipelineConfig) -> "Pipeline":
        rewriter = QuestionRewriter(self.gateway, cfg.max_queries, self.rewriter.dictionary, cfg.rewrite_mode)
        return Pipeline(self.gateway, self.retriever, self.embedder, cfg, rewriter)

    async def aclose(self) -> None:
        """Release the network clients; pipelines made by :meth:`with_config` share them."""
        await self.gateway.aclose()
        await self.retriever.aclose()
        self.embedder.close()

    async def _knowledge_for_query(
        self, query: str, snapshot: MemorySnapshot
    ) -> tuple[BoundaryDecision | None, list[KnowledgeChunk], list[str]]:
        decision = None
        if self.cfg.enabled(Component.TRIGGER):
            matches = await asyncio.to_thread(match_memory, query, snapshot, self.cfg.trigger, self.embedder)
            decision = decide(query, matches, self.cfg.trigger)
            if decision.inside:
                chunks = [
                    KnowledgeChunk(
                        id=match.record.id,
                        text=match.record.content,
                        source=KnowledgeSource.MEMORY,
                        origin=match.record.id,
                        score=match.similarity,
                        query=query,
                    )
                    for match in matches[: self.cfg.retriever.top_k]
                ]
                return decision, chunks, []
        try:
            outcome = await self.retriever.retrieve(query)
        except EmptyRetrieval as exc:
            return decision, [], [f"no knowledge retrieved for {query!r}: {exc}"]
        return decision, outcome.chunks, outcome.warnings

    async def answer_question(
        self,
        question: str,
        state: UserState,
        round_index: int = 0,
        session_id: str = "session-0001",
    ) -> tuple[AnswerRecord, RoundTrace]:
        started = time.perf_counter()
        if not question or not question.strip():
            raise InvalidQuestion("question must not be empty")
        warnings: list[str] = []

        rewriter_on = self.cfg.enabled(Component.REWRITER)
        if rewriter_on:
            try:
                rewrite = await self.rewriter.rewrite(question)
            except RewriteFailed as exc:
                message = f"rewrite fell back to the original question: {exc}"
                logger.warning(message)
                warnings.append(message)
                rewrite = fallback_result(question)
        else:
            rewrite = fallback_result(question)

        queries = list(rewrite.queries)
        if rewriter_on and self.cfg.retrieve_rewritten:
            queries = [rewrite.rewritten, *(query for query in queries if query != rewrite.rewritten)]

        # every query of this round sees memory as it was when the round started
        snapshot = state.memory.snapshot()
        results = await asyncio.gather(*(self._knowledge_for_query(query, snapshot) for query in queries))
        decisions = [decision for decision, _, _ in results if decision is not None]
        merged = merge_chunks([chunks for _, chunks, _ in results])
        for _, _, query_warnings in results:
            warnings.extend(query_warnings)

        if self.cfg.enabled(Component.FILTER):
            knowledge = await self.filter.filter_knowledge(rewrite.rewritten, merged)
            warnings.extend(knowledge.warnings)
        else:
            knowledge = FilteredKnowledge.passthrough(merged)

        personalized = self.cfg.reader_style is ReaderStyle.PERSONALIZED
        answer = await self.reader.answer(
            ReaderInput(
                rewritten=rewrite.rewritten,
                knowledge=knowledge,
                profile=state.profile if personalized else None,
                style=self.cfg.reader_style,
            )
        )

        if self.cfg.enabled(Component.LEARNER):
            try:
                await update_memory(self.gateway, state.memory, knowledge.kept, session_id, round_index)
            except MemoryPersistFailed as exc:
                logger.error("memory not persisted", extra={"user_id": state.user_id, "reason": str(exc)})
                warnings.append(str(exc))

        trace = RoundTrace(
            round_index=round_index,
            original_question=question,
            rewritten_question=rewrite.rewritten if rewriter_on else None,
            queries=queries,
            boundary_decisions=decisions,
            external_knowledge_count=sum(chunk.source is KnowledgeSource.EXTERNAL for chunk in merged),
            memory_knowledge_count=sum(chunk.source is KnowledgeSource.MEMORY for chunk in merged),
            irrelevant_knowledge_count=len(knowledge.dropped),
            backoff=knowledge.backoff,
            elapsed_ms=elapsed_ms(started),
            answer=answer,
            warnings=warnings,
        )
        logger.info(
            "round answered",
            extra={
                "user_id": state.user_id,
                "round": round_index,
                "external": trace.external_knowledge_count,
                "memory": trace.memory_knowledge_count,
                "irrelevant": trace.irrelevant_knowledge_count,
            },
        )
        return answer, trace


class SessionRunner:
    """Threads one user's memory and profile through the rounds of a session."""

    def __init__(
        self,
        pipeline: Pipeline,
        state: UserState,
        session_id: str,
        repository: StateRepository | None = None,
    ) -> None:
        self.pipeline = pipeline
        self.state = state
        self.session_id = session_id
        self.repository = repository
        self.turns: list[Turn] = []
        self.traces: list[RoundTrace] = []
        self.warnings: list[str] = []
        self._next_round = 0

    @classmethod
    def resume(
        cls,
        pipeline: Pipeline,
        state: UserState,
        session_id: str,
        turns: list[Turn],
        repository: StateRepository | None = None,
    ) -> "SessionRunner":
        """Continue a session whose earlier turns were stored elsewhere."""
        runner = cls(pipeline, state, session_id, repository)
        runner.turns = list(turns)
        runner._next_round = turns[-1].round_index + 1 if turns else 0
        return runner

    @property
    def learning(self) -> bool:
        return self.pipeline.cfg.enabled(Component.LEARNER)

    def transcript(self) -> SessionTranscript:
        return SessionTranscript(session_id=self.session_id, turns=list(self.turns))

    async def ask(self, question: str) -> RoundTrace:
        """Answer one question; errors propagate and the round index is still consumed."""
        round_index = self._next_round
        self._next_round += 1
        answer, trace = await self.pipeline.answer_question(question, self.state, round_index, self.session_id)
        turn = Turn(question=question, answer=answer.text, round_index=round_index)
        self.turns.append(turn)
        self.traces.append(trace)
        if self.learning and self.pipeline.cfg.profile_update == "round":
            single = SessionTranscript(session_id=self.session_id, turns=[turn])
            await self._update_profile(single)
        return trace

    async def ask_or_trace(self, question: str) -> RoundTrace:
        """Like :meth:`ask`, but a failed round becomes an error trace."""
        started = time.perf_counter()
        round_index = self._next_round
        try:
            return await self.ask(question)
        except RecallError as exc:
            logger.warning("round failed", extra={"round": round_index, "error": repr(exc)})
            trace = RoundTrace(
                round_index=round_index,
                original_question=question,
                elapsed_ms=elapsed_ms(started),
                error=f"{exc.__class__.__name__}: {exc}",
            )
            self.traces.append(trace)
            return trace

    async def _update_profile(self, transcript: SessionTranscript) -> None:
        self.state.profile = await update_profile(self.pipeline.gateway, self.state.profile, transcript, self.warnings)
        if self.repository is not None:
            self.repository.save_profile(self.state)

    async def end(self) -> UserProfile:
        """Close the session: session-level profile update and transcript persistence."""
        if self.turns and self.learning and self.pipeline.cfg.profile_update == "session":
            await self._update_profile(self.transcript())
        if self.turns and self.repository is not None:
            self.repository.save_transcript(self.state.user_id, self.transcript())
        return self.state.profile


async def run_session(
    pipeline: Pipeline,
    questions: list[str],
    state: UserState,
    session_id: str = "session-0001",
    repository: StateRepository | None = None,
) -> tuple[SessionTranscript, list[RoundTrace], UserProfile]:
    if not questions:
        raise ValueError("a session needs at least one question")
    runner = SessionRunner(pipeline, state, session_id, repository)
    for question in questions:
        await runner.ask_or_trace(question)
    profile = await runner.end()
    return runner.transcript(), runner.traces, profile


def write_traces(path: Path, traces: list[RoundTrace]) -> None:
    append_jsonl(path, (trace.model_dump(mode="json") for trace in traces))


def create_pipeline(
    settings: Settings,
    gateway: LLMGateway | None = None,
    retriever: KnowledgeRetriever | None = None,
    embedder: Embedder | None = None,
) -> Pipeline:
    cfg = PipelineConfig.from_settings(settings)
    gateway = gateway or create_gateway(settings)
    dictionary = load_terminology(settings.pipeline.term_dict) if settings.pipeline.term_dict else None
    return Pipeline(
        gateway,
        retriever or create_retriever(settings),
        embedder or create_embedder(settings),
        cfg,
        QuestionRewriter(gateway, cfg.max_queries, dictionary, cfg.rewrite_mode),
    )
