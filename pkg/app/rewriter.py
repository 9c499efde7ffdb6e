from __future__ import annotations

import logging
import re
from pathlib import Path
from typing import Literal

import orjson
from pydantic import ValidationError

from app import prompts
from app.errors import ConfigError, InvalidQuestion, LLMError, RewriteFailed
from app.llm import LLMGateway
from app.schemas import RewriteResult, TerminologyDictionary
from app.utils import collapse_whitespace

logger = logging.getLogger(__name__)

RewriteMode = Literal["enhanced", "single"]


def load_terminology(path: Path, case_sensitive: bool = False) -> TerminologyDictionary:
    try:
        entries = orjson.loads(path.read_bytes())
        return TerminologyDictionary(entries=entries, case_sensitive=case_sensitive)
    except (OSError, orjson.JSONDecodeError, ValidationError) as exc:
        raise ConfigError(f"invalid terminology dictionary {path}: {exc}") from exc


def apply_terminology(original: str, dictionary: TerminologyDictionary | None) -> str:
    """Replace longest word-bounded dictionary matches, scanning left to right."""
    if dictionary is None or not dictionary.entries:
        return original
    keys = sorted(dictionary.entries, key=lambda key: (-len(key), key))
    flags = 0 if dictionary.case_sensitive else re.IGNORECASE
    pattern = re.compile(r"(?<!\w)(?:" + "|".join(re.escape(key) for key in keys) + r")(?!\w)", flags)
    if dictionary.case_sensitive:
        lookup = dictionary.entries
    else:
        lookup = {}
        for key in keys:
            lookup.setdefault(key.lower(), dictionary.entries[key])

    def _replace(match: re.Match[str]) -> str:
        found = match.group(0)
        return lookup[found if dictionary.case_sensitive else found.lower()]

    return pattern.sub(_replace, original)


def dedupe_queries(queries: list[str]) -> list[str]:
    seen: set[str] = set()
    unique: list[str] = []
    for query in queries:
        cleaned = collapse_whitespace(query)
        key = cleaned.lower()
        if cleaned and key not in seen:
            seen.add(key)
            unique.append(cleaned)
    return unique


def fallback_result(original: str) -> RewriteResult:
    question = original.strip()
    return RewriteResult(rewritten=question, queries=[question])


class QuestionRewriter:
    """Turns an original question into a rewritten question plus retrieval queries.

    ``enhanced`` mode asks for several aspect queries; ``single`` mode is the
    traditional rewriter that only produces one search query and keeps the
    original question for reading.
    """

    def __init__(
        self,
        gateway: LLMGateway,
        max_queries: int = 4,
        dictionary: TerminologyDictionary | None = None,
        mode: RewriteMode = "enhanced",
    ) -> None:
        if max_queries < 1:
            raise ValueError("max_queries must be at least 1")
        self.gateway = gateway
        self.max_queries = max_queries
        self.dictionary = dictionary
        self.mode = mode

    async def rewrite(self, original: str) -> RewriteResult:
        if not original or not original.strip():
            raise InvalidQuestion("question must not be empty")
        question = apply_terminology(original.strip(), self.dictionary)
        if self.mode == "single":
            return await self._rewrite_single(question)

        try:
            parsed = await self.gateway.ask_structured(
                prompts.REWRITER,
                {"question": question, "max_queries": str(self.max_queries)},
                ["rewritten", "queries"],
            )
        except LLMError as exc:
            raise RewriteFailed(str(exc)) from exc

        rewritten, queries = parsed["rewritten"], parsed["queries"]
        if not isinstance(rewritten, str) or not isinstance(queries, list):
            raise RewriteFailed("rewriter output has wrong field types")
        unique = dedupe_queries([query for query in queries if isinstance(query, str)])[: self.max_queries]
        if not rewritten.strip() or not unique:
            raise RewriteFailed("rewriter returned an empty question or no queries")
        return RewriteResult(rewritten=rewritten.strip(), queries=unique)

    async def _rewrite_single(self, question: str) -> RewriteResult:
        try:
            parsed = await self.gateway.ask_structured(prompts.SIMPLE_REWRITER, {"question": question}, ["query"])
        except LLMError as exc:
            raise RewriteFailed(str(exc)) from exc
        query = parsed["query"]
        if not isinstance(query, str) or not query.strip():
            raise RewriteFailed("rewriter returned an empty query")
        return RewriteResult(rewritten=question, queries=[collapse_whitespace(query)])
