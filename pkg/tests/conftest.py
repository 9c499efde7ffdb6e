from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import orjson
import pytest
import pytest_asyncio
from httpx import ASGITransport, AsyncClient

from app.db import create_engine, create_sessionmaker
from app.learner import MemoryStore
from app.llm import LLMGateway, MockBackend, MockScript
from app.main import create_app
from app.models import Base
from app.pipeline import Pipeline, PipelineConfig
from app.retriever import ReplaySearchProvider, WebRetriever
from app.settings import LLMSettings, RetrieverSettings, Settings, TriggerSettings
from app.state import StateRepository, UserState
from app.trigger import LexicalEmbedder
from app.utils import sha256_hex

QUESTION = "who won the 2019 cricket world cup"
OTHER_QUESTION = "what is the capital of france"
CWC_URL = "https://example.org/cwc2019"
PARIS_URL = "https://example.org/paris"
CWC_PAGE = "England won the 2019 Cricket World Cup. The final against New Zealand was decided on boundary count."
PARIS_PAGE = "Paris is the capital of France. The Eiffel Tower is 330 m tall."
ANSWER = "England won the 2019 Cricket World Cup."
PROFILE_JSON = (
    '{"theme_preferences": [{"topic": "Sports", "attitude": "interest"}], '
    '"question_demands": ["sports results"], '
    '"basic_information": {"residence": "Berlin"}, '
    '"personalized_information": []}'
)


def default_entries() -> list[dict[str, str]]:
    """Scripted model: snippet requests fall through to the empty default."""
    return [
        {
            "regex": r"Enhanced Question Rewriting.*Original Question: who won the 2019 cricket world cup",
            "response": '{"rewritten": "Who won the 2019 Cricket World Cup?", '
            '"queries": ["who won the 2019 cricket world cup"]}',
        },
        {
            "regex": r"Enhanced Question Rewriting.*Original Question: what is the capital of france",
            "response": '{"rewritten": "What is the capital of France?", "queries": ["capital of france"]}',
        },
        {"regex": r"Query Rewriting.*Question: ", "response": '{"query": "who won the 2019 cricket world cup"}'},
        {"regex": r"Natural Language Inference.*Premise: England won", "response": '{"label": "entailment"}'},
        {"regex": r"Natural Language Inference", "response": '{"label": "neutral"}'},
        {"match": "User Profile Extraction", "response": PROFILE_JSON},
        {
            "regex": r"\[Assistant A\]\n(.*?)\n\[End of Assistant A\].*\[Assistant B\]\n\1\n\[End of Assistant B\]",
            "response": '{"winner": "tie", "reason": "identical"}',
        },
        {"match": "Pairwise Comparison", "response": '{"winner": "tie"}'},
        {"match": "Question Answering", "response": ANSWER},
    ]


def make_gateway(entries: list[dict[str, str]] | None = None, **llm: object) -> LLMGateway:
    script = MockScript.from_entries(default_entries() if entries is None else entries)
    return LLMGateway(MockBackend(script), LLMSettings(**llm))


def write_replay(directory: Path, pages: dict[str, str], queries: dict[str, list[str]]) -> Path:
    (directory / "pages").mkdir(parents=True, exist_ok=True)
    (directory / "queries.json").write_bytes(orjson.dumps(queries))
    for url, body in pages.items():
        (directory / "pages" / f"{sha256_hex(url)}.txt").write_text(body, encoding="utf-8")
    return directory


@dataclass
class Scenario:
    """Replay fixtures and a factory for fully mocked pipelines."""

    fixtures_dir: Path
    embedder: LexicalEmbedder = field(default_factory=LexicalEmbedder)

    def gateway(self, entries: list[dict[str, str]] | None = None) -> LLMGateway:
        return make_gateway(entries)

    def retriever(self) -> WebRetriever:
        return WebRetriever(ReplaySearchProvider(self.fixtures_dir, strict=True), RetrieverSettings())

    def pipeline(self, cfg: PipelineConfig | None = None, gateway: LLMGateway | None = None) -> Pipeline:
        cfg = cfg or PipelineConfig(trigger=TriggerSettings(tau=0.6, theta=1))
        return Pipeline(gateway or self.gateway(), self.retriever(), self.embedder, cfg)

    def state(self, user_id: str = "user-01") -> UserState:
        return UserState(user_id=user_id, memory=MemoryStore(self.embedder))


@pytest.fixture
def replay_dir(tmp_path) -> Path:
    return write_replay(
        tmp_path / "replay",
        {CWC_URL: CWC_PAGE, PARIS_URL: PARIS_PAGE},
        {
            "who won the 2019 cricket world cup": [CWC_URL],
            "Who won the 2019 Cricket World Cup?": [CWC_URL],
            "capital of france": [PARIS_URL],
            "what is the capital of france": [PARIS_URL],
        },
    )


@pytest.fixture
def scenario(replay_dir) -> Scenario:
    return Scenario(fixtures_dir=replay_dir)


@pytest.fixture
def mock_script_file(tmp_path) -> Callable[[list[dict[str, str]] | None], Path]:
    def _write(entries: list[dict[str, str]] | None = None) -> Path:
        path = tmp_path / "mock_script.json"
        path.write_bytes(orjson.dumps(default_entries() if entries is None else entries))
        return path

    return _write


@pytest.fixture
def test_settings(tmp_path, replay_dir, mock_script_file):
    db_path = tmp_path / "test.db"
    return Settings(
        llm={"backend": "mock", "mock_script": mock_script_file()},
        search={"provider": "replay", "fixtures_dir": replay_dir},
        trigger={"tau": 0.6, "theta": 1},
        storage={"data_dir": tmp_path / "data", "database_url": f"sqlite+aiosqlite:///{db_path}"},
    )


@pytest_asyncio.fixture
async def engine(test_settings):
    engine = create_engine(test_settings.storage.database_url)
    async with engine.begin() as conn:
        await conn.run_sync(Base.metadata.create_all)
    yield engine
    await engine.dispose()


@pytest.fixture
def app(test_settings, engine, scenario):
    pipeline = scenario.pipeline()
    return create_app(
        test_settings,
        engine=engine,
        sessionmaker=create_sessionmaker(engine),
        pipeline=pipeline,
        repository=StateRepository(pipeline.embedder, test_settings.storage),
    )


@pytest_asyncio.fixture
async def client(app):
    transport = ASGITransport(app=app)
    async with AsyncClient(transport=transport, base_url="http://testserver") as client:
        yield client
