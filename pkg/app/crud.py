from datetime import datetime, timezone

from sqlalchemy import select, update
from sqlalchemy.ext.asyncio import AsyncSession

from app.models import SessionTurn
from app.schemas import Turn

UTC = timezone.utc  # datetime.UTC alias (Python 3.11+)


async def open_turns(session: AsyncSession, user_id: str) -> list[SessionTurn]:
    """Turns of the user's current (not yet closed) session, oldest first."""
    result = await session.execute(
        select(SessionTurn)
        .where(SessionTurn.user_id == user_id, SessionTurn.closed_at.is_(None))
        .order_by(SessionTurn.round_index)
    )
    return list(result.scalars().all())


async def add_turn(session: AsyncSession, user_id: str, session_id: str, turn: Turn) -> SessionTurn:
    row = SessionTurn(
        user_id=user_id,
        session_id=session_id,
        round_index=turn.round_index,
        question=turn.question,
        answer=turn.answer,
    )
    session.add(row)
    await session.commit()
    await session.refresh(row)
    return row


async def close_session(session: AsyncSession, user_id: str, session_id: str) -> int:
    result = await session.execute(
        update(SessionTurn)
        .where(
            SessionTurn.user_id == user_id,
            SessionTurn.session_id == session_id,
            SessionTurn.closed_at.is_(None),
        )
        .values(closed_at=datetime.now(UTC))
    )
    await session.commit()
    return result.rowcount or 0


def as_turns(rows: list[SessionTurn]) -> list[Turn]:
    return [Turn(question=row.question, answer=row.answer, round_index=row.round_index) for row in rows]
