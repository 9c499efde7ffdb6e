import uuid
from datetime import datetime, timezone

from sqlalchemy import DateTime, Integer, String, Text, UniqueConstraint, Uuid
from sqlalchemy.orm import DeclarativeBase, Mapped, mapped_column

UTC = timezone.utc  # datetime.UTC alias (Python 3.11+)


class Base(DeclarativeBase):
    pass


class SessionTurn(Base):
    """One answered round of a user's session; ``closed_at`` is set when the session ends."""

    __tablename__ = "session_turns"
    __table_args__ = (UniqueConstraint("session_id", "round_index", name="uq_session_turn_round"),)

    id: Mapped[uuid.UUID] = mapped_column(Uuid, primary_key=True, default=uuid.uuid4)
    user_id: Mapped[str] = mapped_column(String(128), index=True)
    session_id: Mapped[str] = mapped_column(String(255), index=True)
    round_index: Mapped[int] = mapped_column(Integer)
    question: Mapped[str] = mapped_column(Text)
    answer: Mapped[str] = mapped_column(Text)
    created_at: Mapped[datetime] = mapped_column(DateTime(timezone=True), default=lambda: datetime.now(UTC))
    closed_at: Mapped[datetime | None] = mapped_column(DateTime(timezone=True), nullable=True)
