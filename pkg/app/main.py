import logging
import uuid
from contextlib import asynccontextmanager

from fastapi import Body, Depends, FastAPI, Request, status
from fastapi.exceptions import RequestValidationError
from fastapi.responses import ORJSONResponse, PlainTextResponse
from sqlalchemy.ext.asyncio import AsyncSession

from app.crud import add_turn, as_turns, close_session, open_turns
from app.db import create_engine, create_sessionmaker, get_db_session
from app.errors import RecallError
from app.locks import UserLocks
from app.models import Base
from app.pipeline import Pipeline, SessionRunner, create_pipeline
from app.schemas import AnswerRequest, AnswerResponse, SessionEndRequest, SessionEndResponse
from app.settings import Settings, get_settings
from app.state import StateRepository

logger = logging.getLogger(__name__)


class PipelineFailure(Exception):
    def __init__(self, message: str, diagnostic_id: str) -> None:
        super().__init__(message)
        self.diagnostic_id = diagnostic_id


def create_app(
    settings: Settings | None = None,
    engine=None,
    sessionmaker=None,
    pipeline: Pipeline | None = None,
    repository: StateRepository | None = None,
) -> FastAPI:
    settings = settings or get_settings()

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        async with app.state.engine.begin() as conn:
            await conn.run_sync(Base.metadata.create_all)
        yield
        await app.state.pipeline.aclose()
        await app.state.engine.dispose()

    tags_metadata = [
        {"name": "Answer", "description": "Answer questions within a user's open session."},
        {"name": "Session", "description": "Close a session and fold it into the user profile."},
        {"name": "Health", "description": "Liveness probe."},
    ]

    app = FastAPI(
        default_response_class=ORJSONResponse,
        title="RecallQA",
        description="Retrieval-augmented answering with per-user memory and profiles.",
        version="1.0.0",
        openapi_tags=tags_metadata,
        lifespan=lifespan,
    )
    engine = engine or create_engine(settings.storage.database_url)
    sessionmaker = sessionmaker or create_sessionmaker(engine)
    pipeline = pipeline or create_pipeline(settings)
    app.state.engine = engine
    app.state.sessionmaker = sessionmaker
    app.state.settings = settings
    app.state.pipeline = pipeline
    app.state.repository = repository or StateRepository(pipeline.embedder, settings.storage)
    app.state.locks = UserLocks()

    @app.exception_handler(RequestValidationError)
    async def validation_error_handler(request: Request, exc: RequestValidationError) -> ORJSONResponse:
        errors = [
            {"loc": list(error.get("loc", ())), "msg": error.get("msg", "")} for error in exc.errors()
        ]
        return ORJSONResponse(
            status_code=status.HTTP_400_BAD_REQUEST,
            content={"error": "malformed request body", "details": errors},
        )

    @app.exception_handler(PipelineFailure)
    async def pipeline_failure_handler(request: Request, exc: PipelineFailure) -> ORJSONResponse:
        return ORJSONResponse(
            status_code=status.HTTP_502_BAD_GATEWAY,
            content={"error": str(exc), "diagnostic_id": exc.diagnostic_id},
        )

    @app.get("/healthz", tags=["Health"], response_class=PlainTextResponse, summary="Liveness probe")
    async def healthz() -> str:
        return "ok"

    @app.post(
        "/v1/answer",
        response_model=AnswerResponse,
        tags=["Answer"],
        summary="Answer a question",
        description=(
            "Runs one round for the user: rewrite, boundary check, retrieval or memory, filtering, "
            "reading and learning. The round joins the user's open session, or starts one."
        ),
        responses={
            400: {
                "description": "Malformed request body.",
                "content": {"application/json": {"example": {"error": "malformed request body"}}},
            },
            502: {
                "description": "A pipeline stage failed.",
                "content": {
                    "application/json": {
                        "example": {"error": "ReaderFailed: backend unavailable", "diagnostic_id": "3f2a9c"}
                    }
                },
            },
        },
    )
    async def answer(
        payload: AnswerRequest = Body(...),
        session: AsyncSession = Depends(get_db_session),
    ) -> AnswerResponse:
        user_id = payload.user_id
        async with app.state.locks.hold(user_id):
            state = app.state.repository.get(user_id)
            rows = await open_turns(session, user_id)
            session_id = rows[0].session_id if rows else f"{user_id}-{uuid.uuid4().hex[:12]}"
            runner = SessionRunner.resume(app.state.pipeline, state, session_id, as_turns(rows), app.state.repository)
            try:
                trace = await runner.ask(payload.question)
            except RecallError as exc:
                diagnostic_id = uuid.uuid4().hex[:12]
                logger.exception("round failed", extra={"user_id": user_id, "diagnostic_id": diagnostic_id})
                raise PipelineFailure(f"{exc.__class__.__name__}: {exc}", diagnostic_id) from exc
            await add_turn(session, user_id, session_id, runner.turns[-1])
        return AnswerResponse(
            answer=trace.answer.text if trace.answer else "",
            rewritten_question=trace.rewritten_question,
            trace=trace,
        )

    @app.post(
        "/v1/session/end",
        response_model=SessionEndResponse,
        tags=["Session"],
        summary="End the user's open session",
        description="Updates the user profile from the open session's turns and closes the session.",
    )
    async def end_session(
        payload: SessionEndRequest = Body(...),
        session: AsyncSession = Depends(get_db_session),
    ) -> SessionEndResponse:
        user_id = payload.user_id
        async with app.state.locks.hold(user_id):
            state = app.state.repository.get(user_id)
            rows = await open_turns(session, user_id)
            if not rows:
                return SessionEndResponse(status="no_open_session", profile=state.profile)
            session_id = rows[0].session_id
            runner = SessionRunner.resume(app.state.pipeline, state, session_id, as_turns(rows), app.state.repository)
            try:
                profile = await runner.end()
            except RecallError as exc:
                diagnostic_id = uuid.uuid4().hex[:12]
                logger.exception("session end failed", extra={"user_id": user_id, "diagnostic_id": diagnostic_id})
                raise PipelineFailure(f"{exc.__class__.__name__}: {exc}", diagnostic_id) from exc
            closed = await close_session(session, user_id, session_id)
        return SessionEndResponse(status="ok", session_id=session_id, turns=closed, profile=profile)

    return app
