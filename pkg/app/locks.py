from __future__ import annotations

import asyncio
from contextlib import asynccontextmanager
from typing import AsyncIterator


class UserLocks:
    """Serializes rounds per user; different users proceed concurrently."""

    def __init__(self) -> None:
        self._lock = asyncio.Lock()
        self._locks: dict[str, asyncio.Lock] = {}

    async def get(self, user_id: str) -> asyncio.Lock:
        async with self._lock:
            lock = self._locks.get(user_id)
            if lock is None:
                lock = self._locks[user_id] = asyncio.Lock()
            return lock

    @asynccontextmanager
    async def hold(self, user_id: str) -> AsyncIterator[None]:
        lock = await self.get(user_id)
        async with lock:
            yield

    def __len__(self) -> int:
        return len(self._locks)
