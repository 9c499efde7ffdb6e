from __future__ import annotations

from contextvars import ContextVar
from functools import lru_cache
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, SecretStr, model_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict, TomlConfigSettingsSource

from app.errors import ConfigError

# TOML file read by the next Settings() built through load_settings
_config_file: ContextVar[Path | None] = ContextVar("config_file", default=None)

DEFAULT_THEMES = [
    # Editable defaults; the source taxonomy groups conversations into thirteen main topics.
    "Science and Technology",
    "Health and Fitness",
    "Food and Cooking",
    "Travel and Geography",
    "History and Culture",
    "Arts and Entertainment",
    "Sports",
    "Business and Finance",
    "Education and Learning",
    "Law and Politics",
    "Environment and Nature",
    "Relationships and Lifestyle",
    "Games and Hobbies",
]


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LLMSettings(Section):
    backend: Literal["http", "mock"] = "mock"
    base_url: str = "https://api.openai.com/v1"
    model: str = "gpt-3.5-turbo"
    temperature: float = Field(default=0.0, ge=0.0)
    max_tokens: int = Field(default=512, gt=0)
    template_max_tokens: dict[str, int] = Field(default_factory=dict)
    max_retries: int = Field(default=3, ge=1)
    retry_initial_delay: float = Field(default=0.5, ge=0.0)
    max_in_flight: int = Field(default=4, ge=1)
    request_timeout: float = Field(default=60.0, gt=0.0)
    mock_script: Path | None = None


class SearchSettings(Section):
    provider: Literal["local", "http", "replay"] = "local"
    search_url: str = "https://api.bing.microsoft.com/v7.0/search"
    result_count: int = Field(default=5, gt=0)
    fixtures_dir: Path | None = None
    corpus_path: Path | None = None
    strict: bool = True
    max_in_flight: int = Field(default=4, ge=1)
    request_timeout: float = Field(default=20.0, gt=0.0)


class EmbedderSettings(Section):
    kind: Literal["lexical", "http"] = "lexical"
    dim: int = Field(default=4096, gt=0)
    base_url: str = "https://api.openai.com/v1"
    model: str = "text-embedding-3-small"


class TriggerSettings(Section):
    tau: float = Field(default=0.6, ge=0.0, le=1.0)
    theta: int = Field(default=3, ge=1)


class RetrieverSettings(Section):
    top_k: int = Field(default=5, gt=0)
    chunk_size: int = Field(default=256, gt=0)
    chunk_overlap: int = Field(default=64, ge=0)
    k1: float = 1.5
    b: float = Field(default=0.75, ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _overlap_below_size(self) -> "RetrieverSettings":
        if self.chunk_overlap >= self.chunk_size:
            raise ValueError("chunk_overlap must be smaller than chunk_size")
        return self


class PipelineSettings(Section):
    reader_style: Literal["personalized", "basic"] = "personalized"
    components: list[Literal["rewriter", "trigger", "filter", "learner"]] = Field(
        default_factory=lambda: ["rewriter", "trigger", "filter", "learner"]
    )
    max_queries: int = Field(default=4, ge=1)
    retrieve_rewritten: bool = False
    profile_update: Literal["session", "round"] = "session"
    term_dict: Path | None = None


class StorageSettings(Section):
    data_dir: Path = Path("data")
    trace_out: Path | None = None
    database_url: str = "sqlite+aiosqlite:///data/recallqa.db"

    @property
    def memory_dir(self) -> Path:
        return self.data_dir / "memory"

    @property
    def profile_dir(self) -> Path:
        return self.data_dir / "profiles"

    @property
    def transcript_dir(self) -> Path:
        return self.data_dir / "transcripts"


class EvalSettings(Section):
    sample: int | None = Field(default=None, gt=0)
    seed: int = 7
    concurrency: int = Field(default=4, ge=1)
    judge_double_pass: bool = True
    judge_mode: Literal["with_personalization", "without_personalization"] = "without_personalization"
    themes: list[str] = Field(default_factory=lambda: list(DEFAULT_THEMES))


class ServerSettings(Section):
    host: str = "127.0.0.1"
    port: int = 8000


class Settings(BaseSettings):
    llm: LLMSettings = Field(default_factory=LLMSettings)
    search: SearchSettings = Field(default_factory=SearchSettings)
    embedder: EmbedderSettings = Field(default_factory=EmbedderSettings)
    trigger: TriggerSettings = Field(default_factory=TriggerSettings)
    retriever: RetrieverSettings = Field(default_factory=RetrieverSettings)
    pipeline: PipelineSettings = Field(default_factory=PipelineSettings)
    storage: StorageSettings = Field(default_factory=StorageSettings)
    eval: EvalSettings = Field(default_factory=EvalSettings)
    server: ServerSettings = Field(default_factory=ServerSettings)
    api_key: SecretStr | None = Field(default=None, validation_alias="ERAGENT_API_KEY")
    search_key: SecretStr | None = Field(default=None, validation_alias="ERAGENT_SEARCH_KEY")

    model_config = SettingsConfigDict(env_prefix="ERAGENT_", extra="forbid", populate_by_name=True)

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        toml_settings = TomlConfigSettingsSource(settings_cls, toml_file=_config_file.get())
        return init_settings, env_settings, dotenv_settings, toml_settings, file_secret_settings

    def check_paths(self, search: bool = True) -> None:
        """Fail fast on input files that the configured backends will read."""
        required: list[tuple[str, Path | None]] = []
        if self.llm.backend == "mock":
            required.append(("llm.mock_script", self.llm.mock_script))
        if search and self.search.provider == "replay":
            required.append(("search.fixtures_dir", self.search.fixtures_dir))
        if search and self.search.provider == "local":
            required.append(("search.corpus_path", self.search.corpus_path))
        if self.pipeline.term_dict is not None:
            required.append(("pipeline.term_dict", self.pipeline.term_dict))
        for key, path in required:
            if path is None:
                raise ConfigError(f"{key} must be set")
            if not path.exists():
                raise ConfigError(f"{key} does not exist: {path}")


def load_settings(config_path: Path | None = None, overrides: dict[str, Any] | None = None) -> Settings:
    """Build settings with precedence: overrides > environment > config file > defaults."""
    if config_path is not None and not config_path.is_file():
        raise ConfigError(f"config file not found: {config_path}")
    token = _config_file.set(config_path)
    try:
        return Settings(**(overrides or {}))
    except ValueError as exc:
        # TOML syntax errors and validation errors both land here
        raise ConfigError(str(exc)) from exc
    finally:
        _config_file.reset(token)


@lru_cache
def get_settings() -> Settings:
    return Settings()
