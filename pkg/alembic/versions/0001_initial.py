"""session turns

Revision ID: 0001
Revises: 
Create Date: 2026-10-17
"""

from alembic import op
import sqlalchemy as sa

revision = "0001"
down_revision = None
branch_labels = None
depends_on = None


def upgrade() -> None:
    op.create_table(
        "session_turns",
        sa.Column("id", sa.Uuid(), primary_key=True),
        sa.Column("user_id", sa.String(length=128), nullable=False),
        sa.Column("session_id", sa.String(length=255), nullable=False),
        sa.Column("round_index", sa.Integer(), nullable=False),
        sa.Column("question", sa.Text(), nullable=False),
        sa.Column("answer", sa.Text(), nullable=False),
        sa.Column(
            "created_at",
            sa.DateTime(timezone=True),
            nullable=False,
            server_default=sa.func.now(),
        ),
        sa.Column("closed_at", sa.DateTime(timezone=True), nullable=True),
        sa.UniqueConstraint("session_id", "round_index", name="uq_session_turn_round"),
    )
    op.create_index("ix_session_turns_user_id", "session_turns", ["user_id"])
    op.create_index("ix_session_turns_session_id", "session_turns", ["session_id"])


def downgrade() -> None:
    op.drop_index("ix_session_turns_session_id", table_name="session_turns")
    op.drop_index("ix_session_turns_user_id", table_name="session_turns")
    op.drop_table("session_turns")
