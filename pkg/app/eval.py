"""Evaluation harness: answer metrics, datasets, pairwise judging, efficiency and MSMTQA generation."""
from __future__ import annotations

import asyncio
import logging
import random
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Literal, NamedTuple

import orjson
from pydantic import ValidationError

from app import prompts
from app.errors import (
    DatasetMalformed,
    EmptyEvaluation,
    JudgeUnavailable,
    LLMError,
    MetricInconsistency,
    SampleTooLarge,
    UnparseableOutput,
)
from app.learner import MemoryStore
from app.llm import LLMGateway
from app.pipeline import Component, Pipeline, run_session
from app.reader import serialize_profile
from app.schemas import (
    Attitude,
    EfficiencyReport,
    JudgeMode,
    JudgeOutcome,
    JudgeVerdict,
    MetricReport,
    MsmtqaCorpus,
    MsmtqaRound,
    MsmtqaSession,
    MsmtqaUser,
    PersonaSpec,
    QaItem,
    RoundTrace,
    UserProfile,
)
from app.settings import DEFAULT_THEMES
from app.state import UserState
from app.utils import atomic_write, dumps

logger = logging.getLogger(__name__)

DatasetFormat = Literal["qa_jsonl", "msmtqa_json"]

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCTUATION = set(string.punctuation)
_TWO_PLACES = Decimal("0.01")


# answer metrics


def normalize_answer(text: str) -> str:
    lowered = text.lower()
    no_punct = "".join(ch for ch in lowered if ch not in _PUNCTUATION)
    no_articles = _ARTICLES.sub(" ", no_punct)
    return " ".join(no_articles.split())


def _gold_keys(golds: list[str]) -> list[str]:
    # a gold such as "The" normalizes to nothing and would match every prediction
    return [key for key in map(normalize_answer, golds) if key]


def em(pred: str, golds: list[str]) -> int:
    normalized = normalize_answer(pred)
    return int(any(normalized == key for key in _gold_keys(golds)))


def token_prf(pred: str, golds: list[str]) -> tuple[float, float]:
    """Token-overlap precision and recall against the gold with the best F1."""
    pred_tokens = normalize_answer(pred).split()
    if not pred_tokens:
        return 0.0, 0.0
    best, best_f1 = (0.0, 0.0), -1.0
    for gold in golds:
        gold_tokens = normalize_answer(gold).split()
        overlap = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
        if overlap == 0 or not gold_tokens:
            precision = recall = f1 = 0.0
        else:
            precision = overlap / len(pred_tokens)
            recall = overlap / len(gold_tokens)
            f1 = 2 * precision * recall / (precision + recall)
        if f1 > best_f1:
            best, best_f1 = (precision, recall), f1
    return best


def hit_rate(pred: str, golds: list[str]) -> int:
    normalized = normalize_answer(pred)
    return int(any(key in normalized for key in _gold_keys(golds)))


class ItemScore(NamedTuple):
    em: int
    precision: float
    recall: float
    hit: int


def score_item(pred: str, golds: list[str]) -> ItemScore:
    if not golds:
        raise ValueError("golds must not be empty")
    precision, recall = token_prf(pred, golds)
    return ItemScore(em(pred, golds), precision, recall, hit_rate(pred, golds))


def percent(value: float) -> str:
    """Half-up rounding to two decimals, e.g. 40.505 -> "40.51"."""
    return str(Decimal(repr(value)).quantize(_TWO_PLACES, rounding=ROUND_HALF_UP))


def check_consistency(report: MetricReport, scores: list[ItemScore] | None = None) -> MetricReport:
    """Exact match implies a hit, per item and in aggregate."""
    for position, score in enumerate(scores or []):
        if score.em > score.hit:
            raise MetricInconsistency(f"item {position} has EM without a hit")
    if report.hit_rate + 1e-9 < report.em:
        raise MetricInconsistency(f"hit rate {report.hit_rate} below EM {report.em}")
    return report


def aggregate(items: list[tuple[str, list[str]]]) -> MetricReport:
    if not items:
        raise EmptyEvaluation("no items to aggregate")
    scores = [score_item(pred, golds) for pred, golds in items]
    n = len(scores)
    report = MetricReport(
        em=100 * sum(score.em for score in scores) / n,
        precision=100 * sum(score.precision for score in scores) / n,
        recall=100 * sum(score.recall for score in scores) / n,
        hit_rate=100 * sum(score.hit for score in scores) / n,
        n=n,
    )
    return check_consistency(report, scores)


# datasets


def _load_qa_jsonl(path: Path) -> list[QaItem]:
    items: list[QaItem] = []
    with path.open("rb") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                row = orjson.loads(line)
                items.append(QaItem(id=str(row["id"]), question=row["question"], gold_answers=row["answers"]))
            except (orjson.JSONDecodeError, ValidationError, KeyError, TypeError) as exc:
                raise DatasetMalformed(line_number, str(exc)) from exc
    return items


def load_corpus_file(path: Path) -> MsmtqaCorpus:
    try:
        return MsmtqaCorpus(**orjson.loads(path.read_bytes()))
    except orjson.JSONDecodeError as exc:
        raise DatasetMalformed(exc.lineno, exc.msg) from exc
    except (ValidationError, TypeError) as exc:
        raise DatasetMalformed(1, str(exc)) from exc


def msmtqa_items(corpus: MsmtqaCorpus) -> list[QaItem]:
    """One item per user turn; the assistant turn is the reference answer."""
    return [
        QaItem(
            id=f"{session.session_id}-r{position}",
            question=turn.user,
            gold_answers=[turn.assistant],
        )
        for user in corpus.users
        for session in user.sessions
        for position, turn in enumerate(session.rounds)
    ]


def load_dataset(path: Path, fmt: DatasetFormat = "qa_jsonl", sample: tuple[int, int] | None = None) -> list[QaItem]:
    try:
        if fmt == "qa_jsonl":
            items = _load_qa_jsonl(path)
        else:
            items = msmtqa_items(load_corpus_file(path))
    except OSError as exc:
        raise DatasetMalformed(0, f"cannot read {path}: {exc}") from exc
    if sample is None:
        return items
    n, seed = sample
    if n > len(items):
        raise SampleTooLarge(f"cannot sample {n} items from {len(items)}")
    return random.Random(seed).sample(items, n)


# pairwise judging


def _winner(raw: object) -> str:
    value = str(raw).strip().upper()
    return value if value in {"A", "B"} else "TIE"


async def _judge_once(
    gateway: LLMGateway, question: str, answer_a: str, answer_b: str, aspects: str, profile_section: str
) -> str:
    variables = {
        "question": question,
        "answer_a": answer_a,
        "answer_b": answer_b,
        "aspects": aspects,
        "profile_section": profile_section,
    }
    try:
        parsed = await gateway.ask_structured(prompts.JUDGE, variables, ["winner"])
    except LLMError as exc:
        raise JudgeUnavailable(f"judge call failed: {exc}") from exc
    return _winner(parsed["winner"])


async def judge_pairwise(
    gateway: LLMGateway,
    question: str,
    answer_a: str,
    answer_b: str,
    profile: UserProfile | None = None,
    mode: JudgeMode = JudgeMode.WITHOUT_PERSONALIZATION,
    double_pass: bool = True,
) -> JudgeVerdict:
    """Outcome is for ``answer_b`` against ``answer_a``.

    The double pass swaps positions; when the passes disagree the verdict is a tie.
    """
    if not answer_a.strip() or not answer_b.strip():
        raise ValueError("both answers must be non-empty")
    if mode is JudgeMode.WITH_PERSONALIZATION:
        aspects = prompts.JUDGE_PERSONALIZED_ASPECTS
        profile_section = f"User Profile:\n{serialize_profile(profile or UserProfile())}\n\n"
    else:
        aspects, profile_section = prompts.JUDGE_ASPECTS, ""

    first = await _judge_once(gateway, question, answer_a, answer_b, aspects, profile_section)
    outcome = {"B": JudgeOutcome.WIN, "A": JudgeOutcome.LOSS}.get(first, JudgeOutcome.TIE)
    if double_pass:
        second = await _judge_once(gateway, question, answer_b, answer_a, aspects, profile_section)
        swapped = {"A": JudgeOutcome.WIN, "B": JudgeOutcome.LOSS}.get(second, JudgeOutcome.TIE)
        if swapped is not outcome:
            outcome = JudgeOutcome.TIE
    return JudgeVerdict(outcome=outcome, mode=mode)


# efficiency


def efficiency_report(traces: list[RoundTrace], verdicts: list[JudgeVerdict] | None = None) -> EfficiencyReport:
    """Means over answered rounds; rounds that ended in an error are left out."""
    answered = [trace for trace in traces if trace.error is None]
    if not answered:
        raise EmptyEvaluation("no answered rounds to summarize")
    n = len(answered)
    report = EfficiencyReport(
        n=n,
        time_cost_ms=sum(trace.elapsed_ms for trace in answered) / n,
        external_knowledge=sum(trace.external_knowledge_count for trace in answered) / n,
        memory_knowledge=sum(trace.memory_knowledge_count for trace in answered) / n,
        irrelevant_knowledge=sum(trace.irrelevant_knowledge_count for trace in answered) / n,
    )
    if verdicts:
        counts = Counter(verdict.outcome for verdict in verdicts)
        report.win_rate = 100 * counts[JudgeOutcome.WIN] / len(verdicts)
        report.loss_rate = 100 * counts[JudgeOutcome.LOSS] / len(verdicts)
        report.tie_rate = 100 * counts[JudgeOutcome.TIE] / len(verdicts)
    return report


def _table(headers: list[str], rows: list[list[str]], numeric_from: int) -> str:
    widths = [max(len(cell) for cell in column) for column in zip(headers, *rows)]

    def _line(cells: list[str]) -> str:
        return "  ".join(
            cell.rjust(width) if position >= numeric_from else cell.ljust(width)
            for position, (cell, width) in enumerate(zip(cells, widths))
        ).rstrip()

    return "\n".join([_line(headers), *(_line(row) for row in rows)]) + "\n"


def format_metric_table(rows: list[tuple[str, str, MetricReport]]) -> str:
    headers = ["Method", "Dataset", "EM", "Precision", "Recall", "Hit Rate"]
    cells = [
        [method, dataset, percent(report.em), percent(report.precision), percent(report.recall), percent(report.hit_rate)]
        for method, dataset, report in rows
    ]
    return _table(headers, cells, numeric_from=2)


def format_efficiency_table(rows: list[tuple[float, EfficiencyReport]]) -> str:
    headers = ["Tau", "Time Cost (ms)", "External", "Memory", "Irrelevant", "Win", "Loss", "Tie"]

    def _rate(value: float | None) -> str:
        return "-" if value is None else percent(value)

    cells = [
        [
            f"{tau:.2f}",
            percent(report.time_cost_ms),
            percent(report.external_knowledge),
            percent(report.memory_knowledge),
            percent(report.irrelevant_knowledge),
            _rate(report.win_rate),
            _rate(report.loss_rate),
            _rate(report.tie_rate),
        ]
        for tau, report in rows
    ]
    return _table(headers, cells, numeric_from=1)


# runners


@dataclass
class EvalResult:
    method: str
    dataset: str
    report: MetricReport
    predictions: list[dict] = field(default_factory=list)
    traces: list[RoundTrace] = field(default_factory=list)

    def as_json(self) -> dict:
        return {
            "method": self.method,
            "dataset": self.dataset,
            "report": self.report.model_dump(mode="json"),
            "display": {
                "em": percent(self.report.em),
                "precision": percent(self.report.precision),
                "recall": percent(self.report.recall),
                "hit_rate": percent(self.report.hit_rate),
            },
            "predictions": self.predictions,
        }


async def evaluate(
    pipeline: Pipeline, items: list[QaItem], method: str, dataset: str, concurrency: int = 4
) -> EvalResult:
    """One-round answering; every item starts from an empty in-process memory."""
    if not items:
        raise EmptyEvaluation("dataset has no items")
    semaphore = asyncio.Semaphore(concurrency)

    async def _one(item: QaItem) -> RoundTrace:
        async with semaphore:
            state = UserState(user_id=item.id, memory=MemoryStore(pipeline.embedder))
            _, trace = await pipeline.answer_question(item.question, state, round_index=0, session_id=item.id)
            return trace

    traces = await asyncio.gather(*(_one(item) for item in items))
    pairs = [(trace.answer.text if trace.answer else "", item.gold_answers) for item, trace in zip(items, traces)]
    report = aggregate(pairs)
    predictions = [{"id": item.id, "prediction": pred, "answers": item.gold_answers} for item, (pred, _) in zip(items, pairs)]
    logger.info("evaluation finished", extra={"method": method, "dataset": dataset, "n": report.n})
    return EvalResult(method, dataset, report, predictions, list(traces))


@dataclass
class TauSweepRow:
    tau: float
    report: EfficiencyReport
    traces: list[RoundTrace]
    verdicts: list[JudgeVerdict]


async def run_tau_sweep(
    pipeline: Pipeline,
    questions: list[str],
    taus: list[float],
    judge_mode: JudgeMode = JudgeMode.WITHOUT_PERSONALIZATION,
    double_pass: bool = True,
    user_id: str = "sweep",
) -> tuple[EfficiencyReport, list[TauSweepRow]]:
    """First pass at tau 1.0 seeds memory; each tau then re-answers with learning off and a cleared profile."""
    if not questions:
        raise EmptyEvaluation("no questions for the sweep")
    memory = MemoryStore(pipeline.embedder)
    first_state = UserState(user_id=user_id, memory=memory)
    seed_cfg = pipeline.cfg.with_tau(1.0).model_copy(
        update={"components": pipeline.cfg.components | {Component.LEARNER}}
    )
    seed_pipeline = pipeline.with_config(seed_cfg)
    _, baseline_traces, _ = await run_session(seed_pipeline, questions, first_state, session_id=f"{user_id}-seed")
    baseline = efficiency_report(baseline_traces)
    logger.info("sweep memory seeded", extra={"records": len(memory)})

    rows: list[TauSweepRow] = []
    for tau in taus:
        cfg = pipeline.cfg.with_tau(tau).model_copy(
            update={"components": pipeline.cfg.components - {Component.LEARNER}}
        )
        state = UserState(user_id=user_id, memory=memory, profile=UserProfile())
        _, traces, _ = await run_session(pipeline.with_config(cfg), questions, state, session_id=f"{user_id}-tau{tau:g}")
        pairs = [
            (question, first.answer.text, second.answer.text)
            for question, first, second in zip(questions, baseline_traces, traces)
            if first.answer is not None and second.answer is not None
        ]
        verdicts = list(
            await asyncio.gather(
                *(
                    judge_pairwise(pipeline.gateway, question, a, b, state.profile, judge_mode, double_pass)
                    for question, a, b in pairs
                )
            )
        )
        rows.append(TauSweepRow(tau, efficiency_report(traces, verdicts), traces, verdicts))
    return baseline, rows


# MSMTQA generation


def default_personas(themes: list[str] | None = None, count: int = 12, seed: int = 7) -> list[PersonaSpec]:
    themes = themes or list(DEFAULT_THEMES)
    rng = random.Random(seed)
    personas = []
    for persona_id in range(1, count + 1):
        topics = rng.sample(themes, k=min(len(themes), rng.randint(2, 4)))
        weights = {attitude: round(rng.uniform(0.2, 1.0), 3) for attitude in Attitude}
        personas.append(
            PersonaSpec(
                persona_id=persona_id,
                topics=topics,
                attitude_policy=weights,
                description=f"User {persona_id}, curious about {', '.join(topics)}.",
            )
        )
    return personas


class SessionPlan(NamedTuple):
    session_id: str
    theme: str
    attitudes: list[Attitude]


def session_schedule(persona: PersonaSpec, sessions: int, rounds: int, seed: int) -> list[SessionPlan]:
    """Seeded theme and per-round attitude choices for one persona."""
    rng = random.Random(seed * 1009 + persona.persona_id)
    attitudes = list(Attitude)
    weights = [persona.attitude_policy.get(attitude, 0.0) for attitude in attitudes]
    return [
        SessionPlan(
            session_id=f"p{persona.persona_id:02d}-s{index:02d}",
            theme=rng.choice(persona.topics),
            attitudes=rng.choices(attitudes, weights=weights, k=rounds),
        )
        for index in range(sessions)
    ]


def _history(user: MsmtqaUser) -> str:
    lines = [f"- {session.theme}: {session.rounds[0].user}" for session in user.sessions if session.rounds]
    return "\n".join(lines) or "(none)"


async def _generate_session(gateway: LLMGateway, persona: PersonaSpec, plan: SessionPlan, user: MsmtqaUser) -> MsmtqaSession:
    variables = {
        "persona": persona.description or f"User {persona.persona_id}",
        "theme": plan.theme,
        "rounds": str(len(plan.attitudes)),
        "attitudes": ", ".join(attitude.value for attitude in plan.attitudes),
        "history": _history(user),
    }
    parsed = await gateway.ask_structured(prompts.MSMTQA, variables, ["rounds"])
    raw_rounds = parsed["rounds"]
    if not isinstance(raw_rounds, list) or len(raw_rounds) < len(plan.attitudes):
        raise UnparseableOutput(f"expected {len(plan.attitudes)} rounds for {plan.session_id}")
    rounds = []
    for raw, attitude in zip(raw_rounds, plan.attitudes):
        if not isinstance(raw, dict) or not isinstance(raw.get("user"), str) or not isinstance(raw.get("assistant"), str):
            raise UnparseableOutput(f"malformed round in {plan.session_id}")
        rounds.append(MsmtqaRound(user=raw["user"], assistant=raw["assistant"], attitude=attitude))
    return MsmtqaSession(session_id=plan.session_id, theme=plan.theme, rounds=rounds)


def _persist_corpus(corpus: MsmtqaCorpus, out_path: Path | None) -> None:
    if out_path is not None:
        atomic_write(out_path, dumps(corpus.model_dump(mode="json")))


async def generate_msmtqa(
    gateway: LLMGateway,
    personas: list[PersonaSpec],
    sessions_per_user: int,
    rounds_per_session: int,
    topic_seed: int,
    out_path: Path | None = None,
) -> MsmtqaCorpus:
    """Generate sessions persona by persona, persisting after each one.

    Sessions already present in ``out_path`` are kept and skipped. A backend
    failure stops generation and returns the partial corpus with
    ``complete=False``.
    """
    if not personas:
        raise ValueError("at least one persona is required")
    if len({persona.persona_id for persona in personas}) != len(personas):
        raise ValueError("persona ids must be unique")
    existing = load_corpus_file(out_path) if out_path is not None and out_path.exists() else MsmtqaCorpus()
    done = {user.persona_id: user for user in existing.users}
    corpus = MsmtqaCorpus(complete=False)

    for persona in personas:
        user = done.get(persona.persona_id) or MsmtqaUser(persona_id=persona.persona_id)
        corpus.users.append(user)
        finished = {session.session_id for session in user.sessions}
        for plan in session_schedule(persona, sessions_per_user, rounds_per_session, topic_seed):
            if plan.session_id in finished:
                continue
            try:
                session = await _generate_session(gateway, persona, plan, user)
            except LLMError as exc:
                logger.error("generation stopped", extra={"session": plan.session_id, "reason": str(exc)})
                _persist_corpus(corpus, out_path)
                return corpus
            user.sessions.append(session)
            _persist_corpus(corpus, out_path)

    corpus.complete = True
    _persist_corpus(corpus, out_path)
    return corpus
