from __future__ import annotations

import math
try:
    from enum import StrEnum
except ImportError:  # Python < 3.11
    from enum import Enum

    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

# llm gateway


class ChatMessage(BaseModel):
    role: Literal["system", "user", "assistant"]
    content: str


class ChatRequest(BaseModel):
    messages: list[ChatMessage] = Field(..., min_length=1)
    temperature: float = Field(default=0.0, ge=0.0)
    max_tokens: int = Field(default=512, gt=0)
    model_id: str = "mock"
    template: str | None = Field(default=None, description="Prompt template name; never sent to the backend.")

    @model_validator(mode="after")
    def _first_role(self) -> "ChatRequest":
        if self.messages[0].role not in ("system", "user"):
            raise ValueError("first message must come from system or user")
        return self

    def prompt_text(self) -> str:
        return "\n".join(message.content for message in self.messages)

    def wire_payload(self) -> dict[str, Any]:
        return {
            "model": self.model_id,
            "messages": [message.model_dump() for message in self.messages],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


# rewriter


class TerminologyDictionary(BaseModel):
    entries: dict[str, str] = Field(default_factory=dict)
    case_sensitive: bool = False

    @field_validator("entries")
    @classmethod
    def _valid_entries(cls, entries: dict[str, str]) -> dict[str, str]:
        for surface, standard in entries.items():
            if not surface.strip():
                raise ValueError("terminology keys must not be empty")
            if surface == standard:
                raise ValueError(f"terminology entry maps {surface!r} to itself")
        return entries


class RewriteResult(BaseModel):
    rewritten: str = Field(..., min_length=1)
    queries: list[str] = Field(..., min_length=1)

    @field_validator("rewritten")
    @classmethod
    def _non_blank(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("rewritten question must not be blank")
        return value


# trigger


class BoundaryDecision(BaseModel):
    query: str
    popularity: int = Field(..., ge=0)
    inside: bool
    matched_records: list[str] = Field(default_factory=list)
    similarities: list[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def _consistent(self) -> "BoundaryDecision":
        if self.popularity != len(self.matched_records):
            raise ValueError("popularity must equal the number of matched records")
        return self


# retriever


class KnowledgeSource(StrEnum):
    EXTERNAL = "external"
    MEMORY = "memory"


class KnowledgeChunk(BaseModel):
    id: str
    text: str = Field(..., min_length=1)
    source: KnowledgeSource
    origin: str
    score: float
    query: str

    @field_validator("score")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("score must be finite")
        return value


class SearchHit(BaseModel):
    title: str = ""
    url: str
    snippet: str = ""


# filter


class NliLabel(StrEnum):
    ENTAILMENT = "entailment"
    CONTRADICTION = "contradiction"
    NEUTRAL = "neutral"


class NliVerdict(BaseModel):
    label: NliLabel
    chunk_id: str
    rationale: str | None = None


class DroppedChunk(BaseModel):
    chunk_id: str
    label: NliLabel


class FilteredKnowledge(BaseModel):
    kept: list[KnowledgeChunk] = Field(default_factory=list)
    dropped: list[DroppedChunk] = Field(default_factory=list)
    backoff: bool = True
    warnings: list[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _backoff_iff_empty(self) -> "FilteredKnowledge":
        if self.backoff != (not self.kept):
            raise ValueError("backoff must be set exactly when no knowledge is kept")
        return self

    @classmethod
    def passthrough(cls, chunks: list[KnowledgeChunk]) -> "FilteredKnowledge":
        return cls(kept=list(chunks), dropped=[], backoff=not chunks)


# learner


class Attitude(StrEnum):
    INTEREST = "interest"
    DISINTEREST = "disinterest"
    NEUTRALITY = "neutrality"


class ThemePreference(BaseModel):
    topic: str = Field(..., min_length=1)
    attitude: Attitude

    @field_validator("attitude", mode="before")
    @classmethod
    def _lower(cls, value: Any) -> Any:
        return value.strip().lower() if isinstance(value, str) else value


class BasicInfo(BaseModel):
    key: str = Field(..., min_length=1)
    value: str


class UserProfile(BaseModel):
    theme_preferences: list[ThemePreference] = Field(default_factory=list)
    question_demands: list[str] = Field(default_factory=list)
    basic_information: list[BasicInfo] = Field(default_factory=list)
    personalized_information: list[str] = Field(default_factory=list)
    last_updated_session: str | None = None

    @field_validator("theme_preferences")
    @classmethod
    def _unique_topics(cls, prefs: list[ThemePreference]) -> list[ThemePreference]:
        topics = [pref.topic for pref in prefs]
        if len(topics) != len(set(topics)):
            raise ValueError("theme topics must be unique")
        return prefs

    def is_empty(self) -> bool:
        return not (
            self.theme_preferences or self.question_demands or self.basic_information or self.personalized_information
        )


class IncrementalProfile(BaseModel):
    """Profile facets extracted from one session, before merging."""

    model_config = ConfigDict(extra="ignore")

    theme_preferences: list[ThemePreference] = Field(default_factory=list)
    question_demands: list[str] = Field(default_factory=list)
    basic_information: list[BasicInfo] = Field(default_factory=list)
    personalized_information: list[str] = Field(default_factory=list)

    @field_validator("basic_information", mode="before")
    @classmethod
    def _accept_mapping(cls, value: Any) -> Any:
        if isinstance(value, dict):
            return [{"key": key, "value": str(item)} for key, item in value.items()]
        return value


class MemoryRecord(BaseModel):
    id: str
    snippet: str = Field(..., min_length=1)
    content: str = Field(..., min_length=1)
    embedding: list[float]
    created_session: str
    created_round: int = Field(..., ge=0)


class Turn(BaseModel):
    question: str
    answer: str
    round_index: int = Field(..., ge=0)


class SessionTranscript(BaseModel):
    session_id: str
    turns: list[Turn] = Field(default_factory=list)

    @field_validator("turns")
    @classmethod
    def _increasing_rounds(cls, turns: list[Turn]) -> list[Turn]:
        for previous, current in zip(turns, turns[1:]):
            if current.round_index <= previous.round_index:
                raise ValueError("round_index must be strictly increasing")
        if turns and turns[0].round_index < 0:
            raise ValueError("round_index starts at 0")
        return turns


# reader


class ReaderStyle(StrEnum):
    PERSONALIZED = "personalized"
    BASIC = "basic"


class ReaderInput(BaseModel):
    rewritten: str
    knowledge: FilteredKnowledge
    profile: UserProfile | None = None
    style: ReaderStyle = ReaderStyle.BASIC

    @model_validator(mode="after")
    def _profile_for_personalized(self) -> "ReaderInput":
        if self.style is ReaderStyle.PERSONALIZED and self.profile is None:
            raise ValueError("personalized reading requires a profile")
        return self


class AnswerRecord(BaseModel):
    text: str
    used_knowledge_ids: list[str] = Field(default_factory=list)
    style: ReaderStyle


# pipeline


class RoundTrace(BaseModel):
    round_index: int = Field(..., ge=0)
    original_question: str
    rewritten_question: str | None = None
    queries: list[str] = Field(default_factory=list)
    boundary_decisions: list[BoundaryDecision] = Field(default_factory=list)
    external_knowledge_count: int = 0
    memory_knowledge_count: int = 0
    irrelevant_knowledge_count: int = 0
    backoff: bool = False
    elapsed_ms: int = Field(default=0, ge=0)
    answer: AnswerRecord | None = None
    warnings: list[str] = Field(default_factory=list)
    error: str | None = None

    def comparable(self) -> dict[str, Any]:
        """Trace payload without wall-clock timing."""
        return self.model_dump(mode="json", exclude={"elapsed_ms"})


# eval


class QaItem(BaseModel):
    id: str
    question: str = Field(..., min_length=1)
    gold_answers: list[str] = Field(..., min_length=1)

    @field_validator("gold_answers")
    @classmethod
    def _non_empty_golds(cls, golds: list[str]) -> list[str]:
        if any(not gold.strip() for gold in golds):
            raise ValueError("gold answers must be non-empty")
        return golds


class MetricReport(BaseModel):
    em: float = Field(..., ge=0.0, le=100.0)
    precision: float = Field(..., ge=0.0, le=100.0)
    recall: float = Field(..., ge=0.0, le=100.0)
    hit_rate: float = Field(..., ge=0.0, le=100.0)
    n: int = Field(..., gt=0)


class JudgeOutcome(StrEnum):
    WIN = "win"
    LOSS = "loss"
    TIE = "tie"


class JudgeMode(StrEnum):
    WITH_PERSONALIZATION = "with_personalization"
    WITHOUT_PERSONALIZATION = "without_personalization"


class JudgeVerdict(BaseModel):
    outcome: JudgeOutcome
    mode: JudgeMode


class PersonaSpec(BaseModel):
    persona_id: int = Field(..., ge=1, le=12)
    topics: list[str] = Field(..., min_length=1)
    attitude_policy: dict[Attitude, float] = Field(
        default_factory=lambda: {Attitude.INTEREST: 1.0, Attitude.DISINTEREST: 1.0, Attitude.NEUTRALITY: 1.0}
    )
    description: str = ""

    @field_validator("attitude_policy")
    @classmethod
    def _positive_mass(cls, policy: dict[Attitude, float]) -> dict[Attitude, float]:
        if any(weight < 0 for weight in policy.values()) or sum(policy.values()) <= 0:
            raise ValueError("attitude policy needs non-negative weights with positive total")
        return policy


class MsmtqaRound(BaseModel):
    user: str
    assistant: str
    attitude: Attitude


class MsmtqaSession(BaseModel):
    session_id: str
    theme: str
    rounds: list[MsmtqaRound] = Field(default_factory=list)


class MsmtqaUser(BaseModel):
    persona_id: int
    sessions: list[MsmtqaSession] = Field(default_factory=list)


class MsmtqaCorpus(BaseModel):
    users: list[MsmtqaUser] = Field(default_factory=list)
    complete: bool = True


class EfficiencyReport(BaseModel):
    n: int
    time_cost_ms: float
    external_knowledge: float
    memory_knowledge: float
    irrelevant_knowledge: float
    win_rate: float | None = None
    loss_rate: float | None = None
    tie_rate: float | None = None


# http surface

USER_ID_PATTERN = r"^[A-Za-z0-9][A-Za-z0-9_.-]{0,127}$"


class AnswerRequest(BaseModel):
    user_id: str = Field(..., pattern=USER_ID_PATTERN, json_schema_extra={"example": "user-01"})
    question: str = Field(..., min_length=1, json_schema_extra={"example": "Who won the 2019 Cricket World Cup?"})

    @field_validator("question")
    @classmethod
    def _question_has_text(cls, question: str) -> str:
        if not question.strip():
            raise ValueError("question must not be blank")
        return question


class AnswerResponse(BaseModel):
    answer: str = Field(..., description="Answer text from the reader.")
    rewritten_question: str | None = Field(default=None, description="Question as rewritten for reading.")
    trace: RoundTrace


class SessionEndRequest(BaseModel):
    user_id: str = Field(..., pattern=USER_ID_PATTERN)


class SessionEndResponse(BaseModel):
    status: str = Field("ok", description="Session close status.")
    session_id: str | None = Field(default=None, description="Closed session, if one was open.")
    turns: int = Field(0, description="Number of turns folded into the profile.")
    profile: UserProfile
