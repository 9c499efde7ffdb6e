from __future__ import annotations


class RecallError(Exception):
    """Base class for every error raised by the pipeline."""


class ConfigError(RecallError):
    pass


# llm gateway


class LLMError(RecallError):
    pass


class BackendUnavailable(LLMError):
    pass


class BackendRejected(LLMError):
    def __init__(self, status: int, body: str) -> None:
        super().__init__(f"backend rejected request with status {status}: {body[:200]}")
        self.status = status
        self.body = body


class EmptyCompletion(LLMError):
    pass


class MissingVariable(LLMError):
    def __init__(self, name: str) -> None:
        super().__init__(f"missing template variable: {name}")
        self.name = name


class TemplateMalformed(LLMError):
    pass


class UnparseableOutput(LLMError):
    pass


class SchemaViolation(LLMError):
    def __init__(self, field: str) -> None:
        super().__init__(f"structured output is missing field: {field}")
        self.field = field


# pipeline stages


class InvalidQuestion(RecallError):
    pass


class RewriteFailed(RecallError):
    pass


class InvalidText(RecallError):
    pass


class RetrievalError(RecallError):
    pass


class SearchUnavailable(RetrievalError):
    pass


class EmptyRetrieval(RetrievalError):
    pass


class IndexMissing(RetrievalError):
    pass


class ReaderFailed(RecallError):
    pass


class MemoryPersistFailed(RecallError):
    pass


# evaluation


class EvaluationError(RecallError):
    pass


class EmptyEvaluation(EvaluationError):
    pass


class DatasetMalformed(EvaluationError):
    def __init__(self, line: int, reason: str = "") -> None:
        super().__init__(f"dataset malformed at line {line}" + (f": {reason}" if reason else ""))
        self.line = line


class SampleTooLarge(EvaluationError):
    pass


class JudgeUnavailable(EvaluationError):
    pass


class MetricInconsistency(EvaluationError):
    pass
