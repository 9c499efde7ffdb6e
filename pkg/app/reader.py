from __future__ import annotations

from app import prompts
from app.errors import LLMError, ReaderFailed
from app.llm import LLMGateway, PromptTemplate, render
from app.schemas import AnswerRecord, FilteredKnowledge, ReaderInput, ReaderStyle, UserProfile


def serialize_profile(profile: UserProfile) -> str:
    """Fixed facet order: basic information, themes, demands, personal tags."""
    lines = ["Basic Information:"]
    lines += [f"- {item.key}: {item.value}" for item in profile.basic_information] or ["- (none)"]
    lines.append("Theme Preferences:")
    lines += [f"- {pref.topic}: {pref.attitude.value}" for pref in profile.theme_preferences] or ["- (none)"]
    lines.append("Question Demands:")
    lines += [f"- {demand}" for demand in profile.question_demands] or ["- (none)"]
    lines.append("Personalized Information:")
    lines += [f"- {tag}" for tag in profile.personalized_information] or ["- (none)"]
    return "\n".join(lines)


def context_section(knowledge: FilteredKnowledge) -> str:
    if knowledge.backoff:
        return ""
    blocks = [f"[{position}] {chunk.text}" for position, chunk in enumerate(knowledge.kept, start=1)]
    return "Context:\n" + "\n\n".join(blocks) + "\n\n"


def _template_and_vars(reader_input: ReaderInput) -> tuple[PromptTemplate, dict[str, str]]:
    knowledge = reader_input.knowledge
    variables = {
        "question": reader_input.rewritten,
        "context_section": context_section(knowledge),
        "instruction": prompts.BACKOFF_INSTRUCTION if knowledge.backoff else prompts.WITH_CONTEXT_INSTRUCTION,
    }
    if reader_input.style is ReaderStyle.PERSONALIZED and reader_input.profile is not None:
        variables["profile"] = serialize_profile(reader_input.profile)
        return prompts.READER_PERSONALIZED, variables
    return prompts.READER_BASIC, variables


def assemble_prompt(reader_input: ReaderInput) -> str:
    template, variables = _template_and_vars(reader_input)
    return render(template, variables)


class Reader:
    def __init__(self, gateway: LLMGateway) -> None:
        self.gateway = gateway

    async def answer(self, reader_input: ReaderInput) -> AnswerRecord:
        template, variables = _template_and_vars(reader_input)
        try:
            text = await self.gateway.ask(template, variables)
        except LLMError as exc:
            raise ReaderFailed(f"reader could not produce an answer: {exc}") from exc
        return AnswerRecord(
            text=text,
            used_knowledge_ids=[chunk.id for chunk in reader_input.knowledge.kept],
            style=reader_input.style,
        )
