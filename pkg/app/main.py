"""Command-line entry point: index, build-bench, run, report, solve-one."""

import argparse
import json
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

from rich.console import Console
from rich.markup import escape
from rich.table import Table

from app import __version__
from app.agent import CompletionAgent
from app.models import IterationRecord, RunManifest
from app.services.bench import (
    aggregate,
    build_benchmark,
    collect_results,
    emit_report,
    load_tasks,
    render_report,
    run_benchmark,
    write_tasks,
)
from app.services.corpus_index import RepoIndexBuilder, build_index, ingest_repo, save_index
from app.services.experience import ExperienceCache, LoopState
from app.services.llm_engine import build_gateways
from app.services.metrics import NORMALIZATION
from app.tools.actor import ACTOR_TEMPLATE_VERSION
from app.tools.reflector import REFLECTOR_TEMPLATE_VERSION
from app.utils.config import Settings, load_settings
from app.utils.exceptions import BuildError, ConfigError, IngestError, RepoGenError
from app.utils.logging_config import logger, set_console_level, setup_logging


EXIT_OK = 0
EXIT_TASK_ERRORS = 1
EXIT_USAGE = 2

MODE_FLAGS = {
    "full": "full",
    "no-reflect": "no_reflect_no_experience",
    "no-evaluator": "no_evaluator",
    "baseline": "no_retrieval",
}

console = Console(stderr=True)


def _settings(args: argparse.Namespace, **overrides) -> Settings:
    """Layer flags over config file over environment."""
    flags = {
        "MODE": MODE_FLAGS[args.mode] if getattr(args, "mode", None) else None,
        "BLIND": True if getattr(args, "blind", False) else None,
        "FINAL": getattr(args, "final", None),
    }
    flags.update({k.upper(): v for k, v in overrides.items()})
    settings = load_settings(getattr(args, "config", None), flags)
    setup_logging(settings.log_level, settings.log_dir or None)
    if getattr(args, "trace", False):
        set_console_level("DEBUG")
    return settings


def cmd_index(args: argparse.Namespace) -> int:
    settings = _settings(args, window_size=args.window, stride=args.stride)
    params = settings.index_params()
    files = ingest_repo(args.repo)
    index = build_index(files, params)
    save_index(index, args.out)
    console.print(
        f"[green]Indexed {len(files)} files into {len(index)} chunks[/green] "
        f"(window={params.window_size}, stride={params.stride}) -> {args.out}"
    )
    return EXIT_OK


def cmd_build_bench(args: argparse.Namespace) -> int:
    _settings(args)
    try:
        tasks, meta = build_benchmark(
            args.repo,
            args.name,
            count=args.count,
            seed=args.seed,
            distinct_lines=not args.allow_duplicates,
        )
    except BuildError as e:
        console.print(f"{e} (eligible lines: {e.eligible})", style="red", markup=False)
        return EXIT_TASK_ERRORS

    write_tasks(tasks, args.out, append=args.append)
    meta_path = Path(f"{args.out}.meta.jsonl")
    with open(meta_path, "a" if args.append else "w", encoding="utf-8") as f:
        f.write(json.dumps(meta.model_dump(mode="json"), sort_keys=True) + "\n")
    console.print(
        f"[green]Wrote {len(tasks)} tasks[/green] for {args.name} "
        f"({meta.stats.python_files} files, {meta.stats.code_lines} code lines) -> {args.out}"
    )
    return EXIT_OK


MANIFEST_KEYS = ("loop_config", "actor_backend", "reflector_backend", "index_params")


def _new_manifest(run_dir: Path, settings: Settings, tasks_path: str, repos_dir: str) -> RunManifest:
    return RunManifest(
        run_id=run_dir.name,
        tool_version=__version__,
        loop_config=settings.loop_config(),
        actor_backend=settings.backend_config("actor"),
        reflector_backend=settings.backend_config("reflector"),
        index_params=settings.index_params(),
        tasks_path=tasks_path,
        repos_dir=repos_dir,
        template_versions={"actor": ACTOR_TEMPLATE_VERSION, "reflector": REFLECTOR_TEMPLATE_VERSION},
        normalization=NORMALIZATION,
        started_at=datetime.now(timezone.utc).isoformat(),
    )


def _open_manifest(run_dir: Path, settings: Settings, tasks_path: str, repos_dir: str, force: bool) -> RunManifest:
    """
    Return the run's manifest, writing it only for a new run or under --force.

    An existing manifest is never rewritten on resume; a config that differs
    from it in the loop, backend or index settings is refused.
    """
    manifest = _new_manifest(run_dir, settings, tasks_path, repos_dir)
    path = run_dir / "manifest.json"
    if path.is_file() and not force:
        try:
            existing = RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
        except ValueError as e:
            raise ConfigError(f"Unreadable manifest {path}: {e}") from e
        changed = [key for key in MANIFEST_KEYS if getattr(existing, key) != getattr(manifest, key)]
        if changed:
            raise ConfigError(
                f"Run directory {run_dir} was started with different {', '.join(changed)}; "
                "use a new --out-dir or --force to rerun every task"
            )
        return existing

    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "manifest.json", "w", encoding="utf-8") as f:
        f.write(manifest.model_dump_json(indent=2))
    return manifest


def cmd_run(args: argparse.Namespace) -> int:
    settings = _settings(args)
    tasks = load_tasks(args.tasks)
    run_dir = Path(args.out_dir)
    manifest = _open_manifest(run_dir, settings, args.tasks, args.repos, args.force)

    gateways = build_gateways(
        manifest.actor_backend,
        manifest.reflector_backend,
        answers={t.task_id: t.ground_truth for t in tasks},
    )
    logger.info(f"Run {manifest.run_id}: {len(tasks)} tasks, mode={manifest.loop_config.mode}")
    try:
        results = run_benchmark(
            tasks,
            args.repos,
            config=manifest.loop_config,
            run_dir=str(run_dir),
            index_params=manifest.index_params,
            workers=args.workers,
            force=args.force,
            gateways=gateways,
        )
    except KeyboardInterrupt:
        console.print("[yellow]Interrupted; completed run logs are kept and will be skipped on resume[/yellow]")
        return EXIT_TASK_ERRORS

    failed = [r for r in results if r.failed]
    report = aggregate(results, config=manifest.loop_config.model_dump())
    console.print(render_report(report, "markdown"), markup=False, highlight=False)
    if failed:
        console.print(f"[red]{len(failed)} of {len(results)} tasks failed[/red]")
        return EXIT_TASK_ERRORS
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    _settings(args)
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise ConfigError(f"Run directory not found: {args.run_dir}")
    config: Dict[str, object] = {}
    manifest_path = run_dir / "manifest.json"
    if manifest_path.is_file():
        config = json.loads(manifest_path.read_text(encoding="utf-8")).get("loop_config", {})

    report = aggregate(collect_results(str(run_dir)), config=config)
    if args.out:
        emit_report(report, args.format, args.out)
        console.print(f"[green]Report with {len(report.per_repo)} repositories -> {args.out}[/green]")
    else:
        sys.stdout.write(render_report(report, args.format))

    table = Table(title=f"Run {run_dir.name}")
    for column in ("Repository", "EM", "ES", "Tasks"):
        table.add_column(column)
    for repo, score in report.per_repo.items():
        table.add_row(repo, f"{score.mean_em:.4f}", f"{score.mean_es:.4f}", str(score.task_count))
    console.print(table)
    return EXIT_OK


def _print_iteration(rec: IterationRecord, state: LoopState) -> None:
    console.print(f"\n[bold cyan]─── Iteration {rec.iteration} ───[/bold cyan]")
    console.print("[bold]Retrieval target:[/bold]")
    for line in rec.target_lines:
        console.print(f"  {line}", style="dim", markup=False, highlight=False)
    for entry in rec.retrieval_trace:
        console.print(f"  {entry.file_path}:{entry.start_line}-{entry.end_line}  score={entry.score:.4f}")
    console.print("[bold]Prompt:[/bold]")
    console.print(rec.prompt_rendered, markup=False, highlight=False)
    console.print(f"[bold]Generated:[/bold] {escape(repr(rec.generated_line))}")
    console.print(f"  EM: {rec.em}   ES: {rec.es:.4f}   no_imp_cnt: {state.no_imp_cnt}   best_es: {state.best_es:.4f}")
    if rec.feedback is not None:
        console.print("[bold]Feedback suggestions:[/bold]")
        for line in rec.feedback.suggestions:
            console.print(f"  {line}", markup=False, highlight=False)


def cmd_solve_one(args: argparse.Namespace) -> int:
    settings = _settings(args)
    tasks = [t for t in load_tasks(args.tasks) if t.task_id == args.task_id]
    if not tasks:
        raise ConfigError(f"Task {args.task_id} not found in {args.tasks}")
    task = tasks[0]

    index = RepoIndexBuilder(str(Path(args.repos) / task.repo_name), settings.index_params()).build_for_task(task)
    gateways = build_gateways(
        settings.backend_config("actor"),
        settings.backend_config("reflector"),
        answers={task.task_id: task.ground_truth},
    )
    agent = CompletionAgent(gateways, settings.loop_config())
    console.print(f"[bold]Task {task.task_id}[/bold] ground truth: {escape(repr(task.ground_truth))}")
    result = agent.run_task(
        task,
        index,
        experience=ExperienceCache(args.out_dir),
        on_iteration=_print_iteration,
    )
    color = "green" if result.final_record.em == 1 else "yellow"
    console.print(
        f"\n[{color}]Stopped: {result.stop_reason} after {result.iterations_run} iterations; "
        f"final iteration {result.final_record.iteration}: {escape(repr(result.final_record.generated_line))} "
        f"(EM {result.final_record.em}, ES {result.final_record.es:.4f})[/{color}]"
    )
    if result.error:
        console.print(result.error, style="red", markup=False)
    return EXIT_TASK_ERRORS if result.failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="repogen-reflex",
        description="Repository-level line completion with retrieval, generation, evaluation and reflection",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="key=value run config file (dotenv syntax)")
        p.add_argument("--trace", action="store_true", help="debug console logging")

    def loop_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--mode", choices=sorted(MODE_FLAGS), help="loop variant (default: full)")
        p.add_argument("--blind", action="store_true", help="withhold ground truth from the loop")
        p.add_argument("--final", choices=["best", "last"], help="which iteration is reported")

    p = sub.add_parser("index", help="build and save a chunk index")
    common(p)
    p.add_argument("--repo", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int)
    p.add_argument("--stride", type=int)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("build-bench", help="sample completion tasks from a repository")
    common(p)
    p.add_argument("--repo", required=True)
    p.add_argument("--name", required=True)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--append", action="store_true", help="append to an existing task file")
    p.add_argument("--allow-duplicates", action="store_true", help="allow repeated ground-truth lines")
    p.set_defaults(func=cmd_build_bench)

    p = sub.add_parser("run", help="run the loop over a task file")
    common(p)
    loop_flags(p)
    p.add_argument("--tasks", required=True)
    p.add_argument("--repos", required=True)
    p.add_argument("--out-dir", required=True, help="run directory (runs/<run-id>)")
    p.add_argument("--force", action="store_true", help="rerun tasks that already have complete logs")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="aggregate a run directory")
    common(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--format", choices=["markdown", "csv", "jsonl"], default="markdown")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("solve-one", help="run one task with a per-iteration trace")
    common(p)
    loop_flags(p)
    p.add_argument("--tasks", required=True)
    p.add_argument("--task-id", required=True)
    p.add_argument("--repos", required=True)
    p.add_argument("--out-dir", help="optional run directory for the task's log")
    p.set_defaults(func=cmd_solve_one)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments and dispatch.

    Returns:
        0 on success, 1 when tasks failed, 2 on usage or configuration errors
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE

    try:
        return args.func(args)
    except ConfigError as e:
        console.print(f"Configuration error: {e}", style="red", markup=False)
        return EXIT_USAGE
    except (IngestError, OSError) as e:
        console.print(str(e), style="red", markup=False)
        return EXIT_USAGE
    except RepoGenError as e:
        logger.error(f"{type(e).__name__}: {e}", extra={"error_type": type(e).__name__})
        return EXIT_TASK_ERRORS


if __name__ == "__main__":
    sys.exit(main())
