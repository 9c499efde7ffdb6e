from __future__ import annotations

import asyncio
import logging

from app import prompts
from app.errors import LLMError
from app.llm import LLMGateway
from app.schemas import DroppedChunk, FilteredKnowledge, KnowledgeChunk, NliLabel, NliVerdict

logger = logging.getLogger(__name__)


def normalize_label(raw: object) -> NliLabel:
    if isinstance(raw, str):
        try:
            return NliLabel(raw.strip().lower())
        except ValueError:
            pass
    return NliLabel.NEUTRAL


class KnowledgeFilter:
    """Keeps only chunks the model labels as entailing the question hypothesis."""

    def __init__(self, gateway: LLMGateway) -> None:
        self.gateway = gateway

    async def classify_nli(
        self, question: str, chunk: KnowledgeChunk, warnings: list[str] | None = None
    ) -> NliVerdict:
        if not question.strip():
            raise ValueError("question must not be empty")
        variables = {"premise": chunk.text, "hypothesis": prompts.HYPOTHESIS.format(question=question)}
        try:
            parsed = await self.gateway.ask_structured(prompts.FILTER, variables, ["label"])
        except LLMError as exc:
            message = f"filter verdict for {chunk.id} defaulted to neutral: {exc}"
            logger.warning(message)
            if warnings is not None:
                warnings.append(message)
            return NliVerdict(label=NliLabel.NEUTRAL, chunk_id=chunk.id)
        rationale = parsed.get("rationale")
        return NliVerdict(
            label=normalize_label(parsed["label"]),
            chunk_id=chunk.id,
            rationale=rationale if isinstance(rationale, str) else None,
        )

    async def filter_knowledge(self, question: str, chunks: list[KnowledgeChunk]) -> FilteredKnowledge:
        warnings: list[str] = []
        verdicts = await asyncio.gather(*(self.classify_nli(question, chunk, warnings) for chunk in chunks))
        kept: list[KnowledgeChunk] = []
        dropped: list[DroppedChunk] = []
        for chunk, verdict in zip(chunks, verdicts):
            if verdict.label is NliLabel.ENTAILMENT:
                kept.append(chunk)
            else:
                dropped.append(DroppedChunk(chunk_id=chunk.id, label=verdict.label))
        return FilteredKnowledge(kept=kept, dropped=dropped, backoff=not kept, warnings=warnings)
