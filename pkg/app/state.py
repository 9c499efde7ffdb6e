"""Per-user memory and profile files under the configured data directory."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import orjson
from pydantic import ValidationError

from app.errors import ConfigError, MemoryPersistFailed
from app.learner import MemoryStore
from app.schemas import USER_ID_PATTERN, SessionTranscript, UserProfile
from app.settings import StorageSettings
from app.trigger import Embedder
from app.utils import atomic_write, dumps

logger = logging.getLogger(__name__)

_USER_ID = re.compile(USER_ID_PATTERN)


def check_user_id(user_id: str) -> str:
    if not _USER_ID.match(user_id):
        raise ValueError(f"invalid user id {user_id!r}")
    return user_id


@dataclass
class UserState:
    user_id: str
    memory: MemoryStore
    profile: UserProfile = field(default_factory=UserProfile)


class ProfileStore:
    """One JSON document per user holding the four facets and ``last_updated_session``."""

    def __init__(self, directory: Path | None) -> None:
        self.directory = directory

    def path(self, user_id: str) -> Path | None:
        return self.directory / f"{check_user_id(user_id)}.json" if self.directory else None

    def load(self, user_id: str) -> UserProfile:
        path = self.path(user_id)
        if path is None or not path.exists():
            return UserProfile()
        try:
            return UserProfile(**orjson.loads(path.read_bytes()))
        except (OSError, orjson.JSONDecodeError, ValidationError) as exc:
            raise ConfigError(f"cannot load profile {path}: {exc}") from exc

    def save(self, user_id: str, profile: UserProfile) -> None:
        path = self.path(user_id)
        if path is None:
            return
        try:
            atomic_write(path, dumps(profile.model_dump(mode="json")))
        except OSError as exc:
            raise MemoryPersistFailed(f"cannot write profile {path}: {exc}") from exc


class StateRepository:
    """Resolves and caches :class:`UserState` objects.

    With ``storage=None`` everything stays in process memory, which is what
    evaluation runs and tests use.
    """

    def __init__(self, embedder: Embedder, storage: StorageSettings | None = None) -> None:
        self.embedder = embedder
        self.storage = storage
        self.profiles = ProfileStore(storage.profile_dir if storage else None)
        self._states: dict[str, UserState] = {}

    def memory_path(self, user_id: str) -> Path | None:
        if self.storage is None:
            return None
        return self.storage.memory_dir / f"{check_user_id(user_id)}.jsonl"

    def get(self, user_id: str) -> UserState:
        state = self._states.get(user_id)
        if state is None:
            path = self.memory_path(user_id)
            memory = MemoryStore.load(path, self.embedder) if path else MemoryStore(self.embedder)
            state = UserState(user_id=user_id, memory=memory, profile=self.profiles.load(user_id))
            self._states[user_id] = state
            logger.debug("loaded user state", extra={"user_id": user_id, "memory": len(memory)})
        return state

    def save_profile(self, state: UserState) -> None:
        self.profiles.save(state.user_id, state.profile)

    def save_transcript(self, user_id: str, transcript: SessionTranscript) -> Path | None:
        if self.storage is None:
            return None
        path = self.storage.transcript_dir / check_user_id(user_id) / f"{transcript.session_id}.json"
        try:
            atomic_write(path, dumps(transcript.model_dump(mode="json")))
        except OSError as exc:
            raise MemoryPersistFailed(f"cannot write transcript {path}: {exc}") from exc
        return path
