import httpx
import orjson
import pytest

from app.errors import InvalidQuestion
from app.learner import MemoryStore
from app.pipeline import (
    Component,
    Pipeline,
    PipelineConfig,
    SessionRunner,
    create_pipeline,
    merge_chunks,
    run_session,
    write_traces,
)
from app.retriever import HttpSearchProvider, ReplaySearchProvider, WebRetriever
from app.schemas import KnowledgeChunk, KnowledgeSource, ReaderStyle
from app.settings import RetrieverSettings, SearchSettings, StorageSettings, TriggerSettings
from app.state import StateRepository, UserState
from app.trigger import LexicalEmbedder
from conftest import ANSWER, CWC_URL, OTHER_QUESTION, QUESTION, Scenario, default_entries, make_gateway, write_replay

REWRITTEN = "Who won the 2019 Cricket World Cup?"
SNIPPET = "England won the 2019 Cricket World Cup."


def _cfg(**overrides) -> PipelineConfig:
    return PipelineConfig(trigger=TriggerSettings(tau=0.6, theta=1), **overrides)


@pytest.mark.asyncio
async def test_first_round_retrieves_filters_reads_and_learns(scenario):
    pipeline = scenario.pipeline()
    state = scenario.state()
    answer, trace = await pipeline.answer_question(QUESTION, state)

    assert answer.text == ANSWER
    assert trace.rewritten_question == REWRITTEN
    assert trace.queries == [QUESTION]
    assert [(d.query, d.popularity, d.inside) for d in trace.boundary_decisions] == [(QUESTION, 0, False)]
    assert (trace.external_knowledge_count, trace.memory_knowledge_count, trace.irrelevant_knowledge_count) == (1, 0, 0)
    assert not trace.backoff
    assert trace.warnings == []
    assert trace.error is None
    assert [record.snippet for record in state.memory.records] == [SNIPPET]
    assert state.memory.records[0].created_session == "session-0001"


@pytest.mark.asyncio
async def test_repeat_question_is_answered_from_memory(scenario):
    pipeline = scenario.pipeline()
    state = scenario.state()
    await pipeline.answer_question(QUESTION, state, round_index=0)
    answer, trace = await pipeline.answer_question(QUESTION, state, round_index=1)

    decision = trace.boundary_decisions[0]
    assert decision.inside and decision.matched_records == ["mem-000001"]
    assert decision.similarities[0] == pytest.approx(6 / 7, abs=1e-6)
    assert (trace.external_knowledge_count, trace.memory_knowledge_count) == (0, 1)
    assert answer.used_knowledge_ids == ["mem-000001"]
    assert len(state.memory) == 1
    reader_prompt = [r for r in pipeline.gateway.backend.requests if r.template == "reader_personalized"][-1]
    assert "[1] England won the 2019 Cricket World Cup." in reader_prompt.prompt_text()


@pytest.mark.asyncio
async def test_strict_tau_keeps_retrieving(scenario):
    pipeline = scenario.pipeline(PipelineConfig(trigger=TriggerSettings(tau=1.0, theta=1)))
    state = scenario.state()
    await pipeline.answer_question(QUESTION, state, round_index=0)
    _, trace = await pipeline.answer_question(QUESTION, state, round_index=1)
    assert not trace.boundary_decisions[0].inside
    assert (trace.external_knowledge_count, trace.memory_knowledge_count) == (1, 0)


@pytest.mark.asyncio
async def test_disabled_trigger_never_consults_memory(scenario):
    pipeline = scenario.pipeline(_cfg(components=frozenset(Component) - {Component.TRIGGER}))
    state = scenario.state()
    await pipeline.answer_question(QUESTION, state, round_index=0)
    _, trace = await pipeline.answer_question(QUESTION, state, round_index=1)
    assert trace.boundary_decisions == []
    assert trace.memory_knowledge_count == 0


@pytest.mark.asyncio
async def test_irrelevant_knowledge_backs_off_and_is_not_learned(scenario):
    pipeline = scenario.pipeline()
    state = scenario.state()
    answer, trace = await pipeline.answer_question(OTHER_QUESTION, state)
    assert trace.queries == ["capital of france"]
    assert (trace.external_knowledge_count, trace.irrelevant_knowledge_count) == (1, 1)
    assert trace.backoff
    assert answer.used_knowledge_ids == []
    assert len(state.memory) == 0
    reader_prompt = pipeline.gateway.backend.requests[-1].prompt_text()
    assert "from your own internal knowledge" in reader_prompt


@pytest.mark.asyncio
async def test_rewrite_failure_falls_back_to_original_question(scenario):
    pipeline = scenario.pipeline(gateway=make_gateway(default_entries()[1:]))
    answer, trace = await pipeline.answer_question(QUESTION, scenario.state())
    assert trace.rewritten_question == QUESTION
    assert trace.queries == [QUESTION]
    assert trace.warnings[0].startswith("rewrite fell back to the original question")
    assert answer.text == ANSWER


@pytest.mark.asyncio
async def test_standard_setting_skips_rewriter_filter_and_learning(scenario):
    base = scenario.pipeline()
    pipeline = base.with_config(base.cfg.for_setting("standard"))
    state = scenario.state()
    answer, trace = await pipeline.answer_question(QUESTION, state)
    backend = pipeline.gateway.backend
    assert trace.rewritten_question is None
    assert trace.queries == [QUESTION]
    assert trace.boundary_decisions == []
    assert (backend.calls("rewriter"), backend.calls("filter"), backend.calls("reader_basic")) == (0, 0, 1)
    assert answer.style is ReaderStyle.BASIC
    assert len(state.memory) == 0


@pytest.mark.asyncio
async def test_traditional_rewriter_setting(scenario):
    base = scenario.pipeline()
    pipeline = base.with_config(base.cfg.for_setting("rewriter"))
    _, trace = await pipeline.answer_question("Who took the 2019 cup?", scenario.state())
    assert trace.rewritten_question == "Who took the 2019 cup?"
    assert trace.queries == [QUESTION]
    assert pipeline.gateway.backend.calls("simple_rewriter") == 1


def test_unknown_setting():
    with pytest.raises(ValueError):
        PipelineConfig().for_setting("everything")


@pytest.mark.asyncio
async def test_retrieving_with_the_rewritten_question_dedupes_chunks(scenario):
    pipeline = scenario.pipeline(_cfg(retrieve_rewritten=True))
    _, trace = await pipeline.answer_question(QUESTION, scenario.state())
    assert trace.queries == [REWRITTEN, QUESTION]
    assert trace.external_knowledge_count == 1


@pytest.mark.asyncio
async def test_unfetchable_pages_leave_a_warning(tmp_path):
    fixtures = write_replay(tmp_path / "r", {}, {QUESTION: [CWC_URL]})
    scenario = Scenario(fixtures_dir=fixtures)
    _, trace = await scenario.pipeline().answer_question(QUESTION, scenario.state())
    assert trace.backoff
    assert trace.external_knowledge_count == 0
    assert any(warning.startswith("no knowledge retrieved") for warning in trace.warnings)


@pytest.mark.asyncio
async def test_empty_question_is_rejected(scenario):
    with pytest.raises(InvalidQuestion):
        await scenario.pipeline().answer_question("  ", scenario.state())


@pytest.mark.asyncio
async def test_memory_write_failure_is_only_a_warning(scenario, tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("x", encoding="utf-8")
    state = UserState(user_id="u", memory=MemoryStore(scenario.embedder, path=blocker / "u.jsonl"))
    answer, trace = await scenario.pipeline().answer_question(QUESTION, state)
    assert answer.text == ANSWER
    assert any("cannot write memory file" in warning for warning in trace.warnings)


def test_merge_chunks_is_query_major_and_deduplicated():
    def chunk(chunk_id: str, text: str, query: str) -> KnowledgeChunk:
        return KnowledgeChunk(id=chunk_id, text=text, source=KnowledgeSource.EXTERNAL, origin="d", score=1.0, query=query)

    merged = merge_chunks(
        [
            [chunk("a", "Paris is the capital.", "q1"), chunk("b", "Eiffel Tower", "q1")],
            [chunk("c", "paris is the capital", "q2"), chunk("d", "Louvre", "q2")],
        ]
    )
    assert [c.id for c in merged] == ["a", "b", "d"]


@pytest.mark.asyncio
async def test_session_threads_memory_and_updates_profile_once(scenario):
    pipeline = scenario.pipeline()
    state = scenario.state()
    transcript, traces, profile = await run_session(pipeline, [QUESTION, OTHER_QUESTION, QUESTION], state)

    assert [turn.round_index for turn in transcript.turns] == [0, 1, 2]
    assert [trace.memory_knowledge_count for trace in traces] == [0, 0, 1]
    assert profile.theme_preferences[0].topic == "Sports"
    assert profile.last_updated_session == "session-0001"
    assert state.profile is profile
    assert pipeline.gateway.backend.calls("profile") == 1


@pytest.mark.asyncio
async def test_profile_can_update_every_round(scenario):
    pipeline = scenario.pipeline(_cfg(profile_update="round"))
    await run_session(pipeline, [QUESTION, OTHER_QUESTION], scenario.state())
    assert pipeline.gateway.backend.calls("profile") == 2


@pytest.mark.asyncio
async def test_without_learner_nothing_is_remembered(scenario):
    pipeline = scenario.pipeline(_cfg(components=frozenset(Component) - {Component.LEARNER}))
    state = scenario.state()
    _, traces, profile = await run_session(pipeline, [QUESTION, QUESTION], state)
    assert len(state.memory) == 0
    assert profile.is_empty()
    assert [trace.external_knowledge_count for trace in traces] == [1, 1]
    assert pipeline.gateway.backend.calls("profile") == 0


@pytest.mark.asyncio
async def test_failed_round_becomes_error_trace_and_consumes_index(scenario):
    runner = SessionRunner(scenario.pipeline(), scenario.state(), "s1")
    failed = await runner.ask_or_trace("   ")
    assert failed.error.startswith("InvalidQuestion")
    assert failed.answer is None
    ok = await runner.ask(QUESTION)
    assert (failed.round_index, ok.round_index) == (0, 1)
    assert [turn.round_index for turn in runner.turns] == [1]


@pytest.mark.asyncio
async def test_ending_an_empty_session_changes_nothing(scenario):
    runner = SessionRunner(scenario.pipeline(), scenario.state(), "s1")
    assert (await runner.end()).is_empty()
    assert runner.pipeline.gateway.backend.requests == []


@pytest.mark.asyncio
async def test_run_session_needs_questions(scenario):
    with pytest.raises(ValueError):
        await run_session(scenario.pipeline(), [], scenario.state())


@pytest.mark.asyncio
async def test_state_survives_a_restart(scenario, tmp_path):
    storage = StorageSettings(data_dir=tmp_path / "data")
    repository = StateRepository(scenario.embedder, storage)
    await run_session(scenario.pipeline(), [QUESTION], repository.get("u1"), "s1", repository)

    assert (storage.transcript_dir / "u1" / "s1.json").exists()
    reloaded = StateRepository(LexicalEmbedder(), storage).get("u1")
    assert [record.snippet for record in reloaded.memory.records] == [SNIPPET]
    assert reloaded.profile.last_updated_session == "s1"


@pytest.mark.asyncio
async def test_runs_are_deterministic(scenario):
    async def run():
        _, traces, _ = await run_session(scenario.pipeline(), [QUESTION, OTHER_QUESTION, QUESTION], scenario.state())
        return [trace.comparable() for trace in traces]

    assert await run() == await run()


@pytest.mark.asyncio
async def test_write_traces_appends_jsonl(scenario, tmp_path):
    _, trace = await scenario.pipeline().answer_question(QUESTION, scenario.state())
    path = tmp_path / "traces.jsonl"
    write_traces(path, [trace])
    write_traces(path, [trace])
    lines = path.read_bytes().splitlines()
    assert len(lines) == 2
    assert orjson.loads(lines[0])["external_knowledge_count"] == 1


def test_create_pipeline_from_settings(test_settings):
    pipeline = create_pipeline(test_settings)
    assert isinstance(pipeline.retriever, WebRetriever)
    assert isinstance(pipeline.embedder, LexicalEmbedder)
    assert pipeline.cfg.trigger.theta == 1
    assert pipeline.cfg.components == frozenset(Component)


class CountingRetriever:
    def __init__(self, inner) -> None:
        self.inner = inner
        self.queries: list[str] = []

    async def retrieve(self, query: str):
        self.queries.append(query)
        return await self.inner.retrieve(query)

    async def aclose(self) -> None:
        await self.inner.aclose()


@pytest.mark.asyncio
@pytest.mark.parametrize(("setting", "retrievals"), [("rewriter", 1), ("rewriter_plus", 3), ("standard", 1)])
async def test_setting_wiring_by_retrieval_count(replay_dir, setting, retrievals):
    gateway = make_gateway(
        [
            {"match": "Enhanced Question Rewriting", "response": '{"rewritten": "R", "queries": ["q one", "q two", "q three"]}'},
            {"match": "Query Rewriting", "response": '{"query": "q single"}'},
            {"match": "Question Answering", "response": ANSWER},
        ]
    )
    retriever = CountingRetriever(WebRetriever(ReplaySearchProvider(replay_dir, strict=False), RetrieverSettings()))
    pipeline = Pipeline(gateway, retriever, LexicalEmbedder(), _cfg().for_setting(setting))
    await pipeline.answer_question(QUESTION, UserState(user_id="u", memory=MemoryStore(pipeline.embedder)))
    assert len(retriever.queries) == retrievals
    assert gateway.backend.calls("filter") == 0


@pytest.mark.asyncio
@pytest.mark.parametrize(("setting", "rewrites"), [("filter", 0), ("rewriter_plus_filter", 1)])
async def test_filter_settings_wiring(scenario, setting, rewrites):
    base = scenario.pipeline()
    pipeline = base.with_config(base.cfg.for_setting(setting))
    state = scenario.state()
    answer, trace = await pipeline.answer_question(QUESTION, state)
    backend = pipeline.gateway.backend
    assert (backend.calls("rewriter"), backend.calls("simple_rewriter")) == (rewrites, 0)
    assert backend.calls("filter") == 1
    assert (trace.external_knowledge_count, trace.irrelevant_knowledge_count) == (1, 0)
    assert answer.style is ReaderStyle.BASIC
    assert len(state.memory) == 0


@pytest.mark.asyncio
async def test_golden_trace_is_stable_across_runs(scenario):
    questions = [QUESTION, OTHER_QUESTION, QUESTION, OTHER_QUESTION, QUESTION]

    async def run():
        _, traces, _ = await run_session(scenario.pipeline(), questions, scenario.state())
        return traces

    runs = [await run() for _ in range(3)]
    assert [trace.comparable() for trace in runs[1]] == [trace.comparable() for trace in runs[0]]
    assert [trace.comparable() for trace in runs[2]] == [trace.comparable() for trace in runs[0]]
    traces = runs[0]
    assert [trace.external_knowledge_count for trace in traces] == [1, 1, 0, 1, 0]
    assert [trace.memory_knowledge_count for trace in traces] == [0, 0, 1, 0, 1]
    assert [trace.backoff for trace in traces] == [False, True, False, True, False]


@pytest.mark.asyncio
async def test_aclose_releases_http_clients():
    client = httpx.AsyncClient(transport=httpx.MockTransport(lambda request: httpx.Response(503)))
    provider = HttpSearchProvider(SearchSettings(provider="http", search_url="https://search.test/search"), None, client)
    pipeline = Pipeline(make_gateway(default_entries()), WebRetriever(provider, RetrieverSettings()), LexicalEmbedder(), _cfg())
    await pipeline.aclose()
    assert client.is_closed
