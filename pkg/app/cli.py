"""Command line entry point: eval, tau-sweep, generate, chat and serve."""
from __future__ import annotations

import argparse
import asyncio
import logging
import sys
import uuid
from pathlib import Path
from typing import Any, Awaitable, TextIO, TypeVar

from app.errors import ConfigError, RecallError
from app.eval import (
    default_personas,
    evaluate,
    format_efficiency_table,
    format_metric_table,
    generate_msmtqa,
    load_dataset,
    percent,
    run_tau_sweep,
)
from app.llm import LLMGateway, create_gateway
from app.pipeline import EVAL_SETTINGS, Pipeline, SessionRunner, create_pipeline, write_traces
from app.schemas import JudgeMode, RoundTrace
from app.settings import Settings, load_settings
from app.state import StateRepository, check_user_id
from app.utils import atomic_write, dumps

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(levelname)-5.5s [%(name)s] %(message)s"
DEFAULT_TAUS = [0.2, 0.4, 0.6, 0.8]

T = TypeVar("T")


def configure_logging(level: str = "WARNING") -> None:
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, stream=sys.stderr, force=True)


def _set(target: dict[str, Any], section: str, key: str, value: Any) -> None:
    if value is not None:
        target.setdefault(section, {})[key] = value


def overrides_from_args(args: argparse.Namespace) -> dict[str, Any]:
    """Only flags the user actually passed override the config file."""
    overrides: dict[str, Any] = {}
    _set(overrides, "llm", "backend", args.backend)
    _set(overrides, "llm", "mock_script", args.mock_script)
    _set(overrides, "trigger", "tau", args.tau)
    _set(overrides, "trigger", "theta", args.theta)
    _set(overrides, "retriever", "top_k", args.top_k)
    _set(overrides, "eval", "sample", args.sample)
    _set(overrides, "eval", "seed", args.seed)
    _set(overrides, "storage", "trace_out", args.trace_out)
    _set(overrides, "pipeline", "term_dict", args.term_dict)
    if args.retrieve_rewritten:
        _set(overrides, "pipeline", "retrieve_rewritten", True)
    if args.profile_per_round:
        _set(overrides, "pipeline", "profile_update", "round")
    return overrides


def _write_report(path: Path | None, payload: Any) -> None:
    if path is not None:
        atomic_write(path, dumps(payload))


def _write_traces(settings: Settings, traces: list[RoundTrace]) -> None:
    if settings.storage.trace_out is not None and traces:
        write_traces(settings.storage.trace_out, traces)


def round_summary(trace: RoundTrace) -> str:
    if trace.error:
        return f"[round {trace.round_index}] error: {trace.error}"
    return (
        f"[round {trace.round_index}] queries={len(trace.queries)} external={trace.external_knowledge_count} "
        f"memory={trace.memory_knowledge_count} irrelevant={trace.irrelevant_knowledge_count} "
        f"backoff={'yes' if trace.backoff else 'no'} {trace.elapsed_ms} ms"
    )


async def _closing(owner: Pipeline | LLMGateway, work: Awaitable[T]) -> T:
    try:
        return await work
    finally:
        await owner.aclose()


def cmd_eval(args: argparse.Namespace, settings: Settings) -> int:
    pipeline = create_pipeline(settings)
    pipeline = pipeline.with_config(pipeline.cfg.for_setting(args.setting))
    sample = (settings.eval.sample, settings.eval.seed) if settings.eval.sample else None
    items = load_dataset(args.dataset, args.format, sample)
    dataset_name = args.dataset_name or args.dataset.stem
    work = evaluate(pipeline, items, args.setting, dataset_name, settings.eval.concurrency)
    result = asyncio.run(_closing(pipeline, work))
    print(format_metric_table([(result.method, result.dataset, result.report)]), end="")
    _write_report(args.report_out, result.as_json())
    _write_traces(settings, result.traces)
    return 0


def cmd_tau_sweep(args: argparse.Namespace, settings: Settings) -> int:
    pipeline = create_pipeline(settings)
    items = load_dataset(args.questions, args.format)
    questions = [item.question for item in items]
    mode = JudgeMode(args.judge_mode or settings.eval.judge_mode)
    double_pass = settings.eval.judge_double_pass and not args.single_pass
    work = run_tau_sweep(pipeline, questions, args.taus, mode, double_pass)
    baseline, rows = asyncio.run(_closing(pipeline, work))
    print(
        f"first pass (tau=1.00): n={baseline.n} time={percent(baseline.time_cost_ms)} ms "
        f"external={percent(baseline.external_knowledge)}"
    )
    print(format_efficiency_table([(row.tau, row.report) for row in rows]), end="")
    _write_report(
        args.report_out,
        {
            "first_pass": baseline.model_dump(mode="json"),
            "taus": [
                {
                    "tau": row.tau,
                    "report": row.report.model_dump(mode="json"),
                    "verdicts": [verdict.outcome.value for verdict in row.verdicts],
                }
                for row in rows
            ],
        },
    )
    _write_traces(settings, [trace for row in rows for trace in row.traces])
    return 0


def cmd_generate(args: argparse.Namespace, settings: Settings) -> int:
    gateway = create_gateway(settings)
    personas = default_personas(settings.eval.themes, args.personas, settings.eval.seed)
    work = generate_msmtqa(gateway, personas, args.sessions, args.rounds, args.topic_seed, args.out)
    corpus = asyncio.run(_closing(gateway, work))
    sessions = sum(len(user.sessions) for user in corpus.users)
    if not corpus.complete:
        print(f"generation incomplete after {sessions} sessions; rerun with the same --out to resume", file=sys.stderr)
        return 1
    print(f"generated {sessions} sessions for {len(corpus.users)} users into {args.out}")
    return 0


async def chat_loop(
    settings: Settings, user_id: str, stdin: TextIO, stdout: TextIO, session_id: str | None = None
) -> SessionRunner:
    pipeline = create_pipeline(settings)
    repository = StateRepository(pipeline.embedder, settings.storage)
    state = repository.get(user_id)
    runner = SessionRunner(pipeline, state, session_id or f"{user_id}-{uuid.uuid4().hex[:12]}", repository)
    try:
        for line in stdin:
            question = line.strip()
            if not question:
                continue
            if question in {"exit", "quit"}:
                break
            trace = await runner.ask_or_trace(question)
            if trace.answer is not None:
                print(trace.answer.text, file=stdout)
            print(round_summary(trace), file=stdout)
        await runner.end()
    finally:
        await pipeline.aclose()
    _write_traces(settings, runner.traces)
    for warning in runner.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return runner


def cmd_chat(args: argparse.Namespace, settings: Settings) -> int:
    user_id = check_user_id(args.user)
    asyncio.run(chat_loop(settings, user_id, sys.stdin, sys.stdout))
    return 0


def parse_bind(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {value!r}")
    return host, int(port)


def cmd_serve(args: argparse.Namespace, settings: Settings) -> int:
    import uvicorn

    from app.main import create_app

    host, port = args.bind or (settings.server.host, settings.server.port)
    uvicorn.run(create_app(settings), host=host, port=port, log_level=args.log_level.lower())
    return 0


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="TOML config file")
    parser.add_argument("--backend", choices=["http", "mock"], default=None)
    parser.add_argument("--mock-script", type=Path, default=None)
    parser.add_argument("--tau", type=float, default=None)
    parser.add_argument("--theta", type=int, default=None)
    parser.add_argument("--top-k", type=int, default=None)
    parser.add_argument("--sample", type=int, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--trace-out", type=Path, default=None)
    parser.add_argument("--term-dict", type=Path, default=None)
    parser.add_argument("--retrieve-rewritten", action="store_true")
    parser.add_argument("--profile-per-round", action="store_true")
    parser.add_argument("--log-level", default="WARNING")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="recallqa", description="Experience-enhanced retrieval-augmented answering")
    sub = parser.add_subparsers(dest="command", required=True)

    ev = sub.add_parser("eval", help="One-round accuracy evaluation of a baseline setting")
    _common(ev)
    ev.add_argument("--dataset", type=Path, required=True)
    ev.add_argument("--format", choices=["qa_jsonl", "msmtqa_json"], default="qa_jsonl")
    ev.add_argument("--setting", choices=sorted(EVAL_SETTINGS), default="rewriter_plus_filter")
    ev.add_argument("--dataset-name", default=None)
    ev.add_argument("--report-out", type=Path, default=None)
    ev.set_defaults(func=cmd_eval)

    sweep = sub.add_parser("tau-sweep", help="Efficiency and win/loss/tie per similarity threshold")
    _common(sweep)
    sweep.add_argument("--questions", type=Path, required=True)
    sweep.add_argument("--format", choices=["qa_jsonl", "msmtqa_json"], default="qa_jsonl")
    sweep.add_argument("--taus", type=float, nargs="+", default=DEFAULT_TAUS)
    sweep.add_argument("--judge-mode", choices=[mode.value for mode in JudgeMode], default=None)
    sweep.add_argument("--single-pass", action="store_true", help="Judge once without swapping positions")
    sweep.add_argument("--report-out", type=Path, default=None)
    sweep.set_defaults(func=cmd_tau_sweep)

    gen = sub.add_parser("generate", help="Generate a simulated multi-session corpus")
    _common(gen)
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--personas", type=int, default=12)
    gen.add_argument("--sessions", type=int, default=5)
    gen.add_argument("--rounds", type=int, default=4)
    gen.add_argument("--topic-seed", type=int, default=7)
    gen.set_defaults(func=cmd_generate)

    chat = sub.add_parser("chat", help="Interactive session on stdin")
    _common(chat)
    chat.add_argument("--user", default="default")
    chat.set_defaults(func=cmd_chat)

    serve = sub.add_parser("serve", help="HTTP answering service")
    _common(serve)
    serve.add_argument("--bind", type=parse_bind, default=None, help="HOST:PORT")
    serve.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        settings = load_settings(args.config, overrides_from_args(args))
        settings.check_paths(search=args.command != "generate")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    try:
        return args.func(args, settings)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (RecallError, ValueError) as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
