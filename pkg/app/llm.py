"""Model-call contract shared by every LLM-backed stage.

Two backends sit behind :class:`LLMGateway`: an OpenAI-style HTTP chat
completion endpoint and a scripted mock used for hermetic runs.
"""
from __future__ import annotations

import asyncio
import json
import logging
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import httpx
import orjson
from pydantic import BaseModel, Field
from tenacity import AsyncRetrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from app.errors import (
    BackendRejected,
    BackendUnavailable,
    ConfigError,
    EmptyCompletion,
    MissingVariable,
    SchemaViolation,
    TemplateMalformed,
    UnparseableOutput,
)
from app.schemas import ChatMessage, ChatRequest
from app.settings import LLMSettings, Settings

logger = logging.getLogger(__name__)

JSON_ONLY_REMINDER = "Respond with JSON only: a single JSON object and no other text."

_formatter = string.Formatter()


class PromptTemplate(BaseModel):
    name: str
    body: str
    required_vars: frozenset[str] = Field(default_factory=frozenset)
    system: str | None = None

    def placeholders(self) -> list[str]:
        names: list[str] = []
        for _, field_name, format_spec, conversion in _formatter.parse(self.body):
            if field_name is None:
                continue
            if not field_name.isidentifier() or format_spec or conversion:
                raise TemplateMalformed(f"template {self.name!r} has an invalid placeholder {{{field_name}}}")
            names.append(field_name)
        return names


def render(template: PromptTemplate, variables: dict[str, str]) -> str:
    try:
        names = template.placeholders()
    except ValueError as exc:
        raise TemplateMalformed(f"template {template.name!r} is malformed: {exc}") from exc
    for name in names:
        if name not in template.required_vars:
            raise TemplateMalformed(f"template {template.name!r} uses undeclared placeholder {{{name}}}")
    for name in sorted(template.required_vars):
        if name not in variables:
            raise MissingVariable(name)
    return template.body.format_map({name: variables[name] for name in template.required_vars})


def parse_structured(text: str, schema: list[str]) -> dict[str, Any]:
    """Return the first JSON object embedded in ``text``.

    Raises :class:`SchemaViolation` when that object lacks a schema field.
    """
    if not schema:
        raise ValueError("schema must name at least one field")
    decoder = json.JSONDecoder()
    found: dict[str, Any] | None = None
    for match in re.finditer(r"\{", text):
        try:
            candidate, _ = decoder.raw_decode(text, match.start())
        except json.JSONDecodeError:
            continue
        if isinstance(candidate, dict):
            found = candidate
            break
    if found is None:
        raise UnparseableOutput("no JSON object found in model output")
    for name in schema:
        if name not in found:
            raise SchemaViolation(name)
    return found


class MockRule(BaseModel):
    match: str | None = None
    regex: str | None = None
    response: str

    def matches(self, prompt: str) -> bool:
        if self.regex is not None:
            return re.search(self.regex, prompt, flags=re.DOTALL) is not None
        return self.match is not None and self.match in prompt


class MockScript(BaseModel):
    rules: list[MockRule] = Field(default_factory=list)
    default_response: str = ""

    @classmethod
    def from_file(cls, path: Path) -> "MockScript":
        try:
            entries = orjson.loads(path.read_bytes())
        except (OSError, orjson.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read mock script {path}: {exc}") from exc
        return cls.from_entries(entries)

    @classmethod
    def from_entries(cls, entries: list[dict[str, str]]) -> "MockScript":
        rules: list[MockRule] = []
        default = ""
        for entry in entries:
            if "default" in entry:
                default = entry["default"]
            else:
                rules.append(MockRule(**entry))
        return cls(rules=rules, default_response=default)

    def respond(self, prompt: str) -> str:
        for rule in self.rules:
            if rule.matches(prompt):
                return rule.response
        return self.default_response


class ChatBackend(Protocol):
    async def complete(self, request: ChatRequest) -> str: ...

    async def aclose(self) -> None: ...


@dataclass
class MockBackend:
    """Deterministic backend: first matching rule wins, requests are captured."""

    script: MockScript
    requests: list[ChatRequest] = field(default_factory=list)

    async def complete(self, request: ChatRequest) -> str:
        self.requests.append(request)
        return self.script.respond(request.prompt_text())

    def calls(self, template: str) -> int:
        return sum(1 for request in self.requests if request.template == template)

    async def aclose(self) -> None:
        pass


class HttpBackend:
    def __init__(self, settings: LLMSettings, api_key: str | None, client: httpx.AsyncClient | None = None) -> None:
        self.settings = settings
        self._client = client or httpx.AsyncClient(timeout=settings.request_timeout)
        self._headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}

    async def complete(self, request: ChatRequest) -> str:
        url = f"{self.settings.base_url.rstrip('/')}/chat/completions"
        try:
            async for attempt in AsyncRetrying(
                stop=stop_after_attempt(self.settings.max_retries),
                wait=wait_exponential(multiplier=self.settings.retry_initial_delay, exp_base=2),
                retry=retry_if_exception_type(httpx.TransportError),
                reraise=True,
            ):
                with attempt:
                    response = await self._client.post(url, json=request.wire_payload(), headers=self._headers)
        except httpx.TransportError as exc:
            raise BackendUnavailable(f"chat backend unreachable: {exc}") from exc

        if response.status_code // 100 != 2:
            raise BackendRejected(response.status_code, response.text)
        try:
            return response.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise BackendRejected(response.status_code, f"unexpected response shape: {response.text}") from exc

    async def aclose(self) -> None:
        await self._client.aclose()


class LLMGateway:
    """Caps in-flight calls, applies request defaults and parses structured output."""

    def __init__(self, backend: ChatBackend, settings: LLMSettings | None = None) -> None:
        self.backend = backend
        self.settings = settings or LLMSettings()
        self._semaphore = asyncio.Semaphore(self.settings.max_in_flight)

    def build_request(self, template: PromptTemplate, prompt: str) -> ChatRequest:
        messages = []
        if template.system:
            messages.append(ChatMessage(role="system", content=template.system))
        messages.append(ChatMessage(role="user", content=prompt))
        return ChatRequest(
            messages=messages,
            temperature=self.settings.temperature,
            max_tokens=self.settings.template_max_tokens.get(template.name, self.settings.max_tokens),
            model_id=self.settings.model,
            template=template.name,
        )

    async def complete(self, request: ChatRequest) -> str:
        async with self._semaphore:
            text = await self.backend.complete(request)
        if not text or not text.strip():
            raise EmptyCompletion(f"empty completion for template {request.template!r}")
        return text

    async def ask(self, template: PromptTemplate, variables: dict[str, str]) -> str:
        return (await self.complete(self.build_request(template, render(template, variables)))).strip()

    async def ask_structured(
        self, template: PromptTemplate, variables: dict[str, str], schema: list[str]
    ) -> dict[str, Any]:
        """Complete and parse JSON; one re-ask with a JSON-only reminder on parse failure."""
        request = self.build_request(template, render(template, variables))
        text = await self.complete(request)
        try:
            return parse_structured(text, schema)
        except (UnparseableOutput, SchemaViolation) as first_error:
            logger.info("re-asking for JSON", extra={"template": template.name, "reason": str(first_error)})
        retry = request.model_copy(
            update={
                "messages": [
                    *request.messages,
                    ChatMessage(role="assistant", content=text),
                    ChatMessage(role="user", content=JSON_ONLY_REMINDER),
                ]
            }
        )
        return parse_structured(await self.complete(retry), schema)

    async def aclose(self) -> None:
        await self.backend.aclose()


def create_gateway(settings: Settings) -> LLMGateway:
    if settings.llm.backend == "mock":
        if settings.llm.mock_script is None:
            raise ConfigError("llm.mock_script is required for the mock backend")
        backend: ChatBackend = MockBackend(MockScript.from_file(settings.llm.mock_script))
    else:
        api_key = settings.api_key.get_secret_value() if settings.api_key else None
        if not api_key:
            raise ConfigError("ERAGENT_API_KEY must be set for the http backend")
        backend = HttpBackend(settings.llm, api_key)
    return LLMGateway(backend, settings.llm)
