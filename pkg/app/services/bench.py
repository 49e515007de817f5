"""Benchmark harness: build line-completion tasks, run them, aggregate EM/ES per repository."""

import csv
import io
import json
import os
import random
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from pydantic import BaseModel, Field

from app.agent import CompletionAgent
from app.models import BackendConfig, CompletionTask, IndexParams, IterationRecord, LoopConfig, LoopResult, SourceFile
from app.services.corpus_index import IngestFilters, RepoIndexBuilder, fingerprint_files, ingest_repo
from app.services.experience import ExperienceCache, load_run_log, result_from_log, run_log_path
from app.services.llm_engine import Gateways, build_gateways
from app.utils.exceptions import BuildError, IngestError
from app.utils.logging_config import log_error, logger


STOP_REASONS = ("exact_match", "stagnation", "max_iter", "backend_error", "task_error")

_TRIPLE_QUOTE_RE = re.compile(r'"""|\'\'\'')
_DOCSTRING_OPEN_RE = re.compile(r'^[rRbBuUfF]{0,2}("""|\'\'\')')


class RepoStats(BaseModel):
    """Size of a repository's Python content."""

    repo_name: str
    python_files: int
    code_lines: int


class BenchMeta(BaseModel):
    """Provenance of a built benchmark, written next to the task file."""

    repo_name: str
    count: int
    seed: int
    eligible: int
    distinct_lines: bool
    repo_fingerprint: str
    stats: RepoStats


class RepoScore(BaseModel):
    """One report row."""

    mean_em: float = 0.0
    mean_es: float = 0.0
    task_count: int = 0
    stop_reasons: Dict[str, int] = Field(default_factory=lambda: {r: 0 for r in STOP_REASONS})


class BenchReport(BaseModel):
    """Per-repository means plus the configuration the results came from."""

    per_repo: Dict[str, RepoScore] = Field(default_factory=dict)
    config: Dict[str, object] = Field(default_factory=dict)


# ---------------------------------------------------------------------------
# Building
# ---------------------------------------------------------------------------

def docstring_lines(lines: List[str]) -> set:
    """
    1-based numbers of lines that sit inside a triple-quoted string.

    Simple paired-delimiter scan: a line is inside when a string is open at
    its start or when it only opens one. Quotes inside ordinary strings and
    comments are not tracked.
    """
    inside = set()
    open_delim: Optional[str] = None
    for number, line in enumerate(lines, start=1):
        if open_delim is not None:
            inside.add(number)
        stripped = line.strip()
        if open_delim is None and _DOCSTRING_OPEN_RE.match(stripped):
            inside.add(number)
        for match in _TRIPLE_QUOTE_RE.finditer(line):
            delim = match.group(0)
            if open_delim is None:
                open_delim = delim
            elif delim == open_delim:
                open_delim = None
    return inside


def eligible_lines(file: SourceFile) -> List[Tuple[int, str]]:
    """(line_no, text) of lines fit to be completion targets: not blank, not comments, not in docstrings."""
    in_strings = docstring_lines(file.lines)
    out = []
    for number, text in enumerate(file.lines, start=1):
        stripped = text.strip()
        if not stripped or stripped.startswith("#") or number in in_strings:
            continue
        out.append((number, text))
    return out


def _repo_stats(files: List[SourceFile], repo_name: str) -> RepoStats:
    return RepoStats(
        repo_name=repo_name,
        python_files=len(files),
        code_lines=sum(1 for f in files for line in f.lines if line.strip()),
    )


def describe_repo(repo_root: str, repo_name: Optional[str] = None) -> RepoStats:
    """Python file count and non-blank Python line count of a repository."""
    return _repo_stats(ingest_repo(repo_root), repo_name or Path(repo_root).name)


def build_benchmark(
    repo_root: str,
    repo_name: str,
    count: int = 200,
    seed: int = 0,
    distinct_lines: bool = True,
    filters: Optional[IngestFilters] = None,
) -> Tuple[List[CompletionTask], BenchMeta]:
    """
    Sample completion targets uniformly without replacement from a repository.

    Args:
        repo_root: Local clone
        repo_name: Name used in task ids and reports
        count: Number of tasks
        seed: Sampler seed; equal (contents, seed, count) give equal tasks
        distinct_lines: Keep only the first occurrence of each stripped line text
        filters: Ingestion filters (default: Python sources)

    Returns:
        (tasks sorted by file and line, build metadata)

    Raises:
        BuildError: fewer eligible lines than count
    """
    files = ingest_repo(repo_root, filters=filters)
    fingerprint = fingerprint_files(files)

    candidates: List[Tuple[SourceFile, int, str]] = []
    seen = set()
    for f in files:
        for line_no, text in eligible_lines(f):
            key = text.strip()
            if distinct_lines:
                if key in seen:
                    continue
                seen.add(key)
            candidates.append((f, line_no, text))

    if len(candidates) < count:
        raise BuildError(
            f"{repo_name}: only {len(candidates)} eligible lines, {count} requested",
            eligible=len(candidates),
        )

    picked = random.Random(seed).sample(candidates, count)
    picked.sort(key=lambda c: (c[0].path, c[1]))
    tasks = [
        CompletionTask(
            task_id=f"{repo_name}/{f.path}:{line_no}",
            repo_name=repo_name,
            file_path=f.path,
            line_no=line_no,
            prefix=f.lines[: line_no - 1],
            ground_truth=text,
            created_meta={"sampler_seed": seed, "repo_fingerprint": fingerprint},
        )
        for f, line_no, text in picked
    ]
    stats = _repo_stats(files, repo_name)
    meta = BenchMeta(
        repo_name=repo_name,
        count=count,
        seed=seed,
        eligible=len(candidates),
        distinct_lines=distinct_lines,
        repo_fingerprint=fingerprint,
        stats=stats,
    )
    logger.info(f"Built {len(tasks)} tasks for {repo_name} from {len(candidates)} eligible lines")
    return tasks, meta


def write_tasks(tasks: Iterable[CompletionTask], out_path: str, append: bool = False) -> None:
    """Write tasks as JSONL, one object per line."""
    path = Path(out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if append else "w", encoding="utf-8") as f:
        for task in tasks:
            f.write(json.dumps(task.model_dump(mode="json"), sort_keys=True, ensure_ascii=False) + "\n")


def load_tasks(in_path: str) -> List[CompletionTask]:
    """Read a task JSONL file."""
    tasks = []
    with open(in_path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                tasks.append(CompletionTask(**json.loads(line)))
    return tasks


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

class _Builders:
    """Lazily created RepoIndexBuilder per repository, shared by worker threads."""

    def __init__(self, repos_dir: str, params: IndexParams):
        self.repos_dir = Path(repos_dir)
        self.params = params
        self._builders: Dict[str, object] = {}
        self._lock = threading.Lock()

    def get(self, repo_name: str) -> RepoIndexBuilder:
        with self._lock:
            cached = self._builders.get(repo_name)
            if cached is None:
                try:
                    cached = RepoIndexBuilder(str(self.repos_dir / repo_name), self.params)
                except IngestError as e:
                    cached = e
                self._builders[repo_name] = cached
        if isinstance(cached, IngestError):
            raise cached
        return cached


def _task_error(task: CompletionTask, message: str) -> LoopResult:
    return LoopResult(
        task_id=task.task_id,
        repo_name=task.repo_name,
        final_record=IterationRecord.empty(),
        stop_reason="task_error",
        iterations_run=0,
        error=message,
    )


def run_benchmark(
    tasks: List[CompletionTask],
    repos_dir: str,
    config: Optional[LoopConfig] = None,
    actor_config: Optional[BackendConfig] = None,
    reflector_config: Optional[BackendConfig] = None,
    run_dir: Optional[str] = None,
    index_params: Optional[IndexParams] = None,
    workers: Optional[int] = None,
    force: bool = False,
    gateways: Optional[Gateways] = None,
) -> List[LoopResult]:
    """
    Run the completion loop over every task, in parallel across tasks.

    Args:
        tasks: Tasks to run; repositories are looked up as repos_dir/<repo_name>
        repos_dir: Directory holding one clone per repository
        config: Loop configuration
        actor_config: Actor backend (ignored when gateways is given)
        reflector_config: Reflector backend (ignored when gateways is given)
        run_dir: Run-log directory; tasks with a complete log are skipped unless force
        index_params: Chunk geometry
        workers: Worker threads (default: processor count)
        force: Rerun tasks that already have complete logs
        gateways: Prebuilt gateways

    Returns:
        One LoopResult per task, in task order. Missing repositories yield
        'task_error' results; backend failures yield 'backend_error' results.
    """
    config = config or LoopConfig()
    if gateways is None:
        answers = {t.task_id: t.ground_truth for t in tasks}
        gateways = build_gateways(actor_config or BackendConfig(), reflector_config or BackendConfig(), answers=answers)
    agent = CompletionAgent(gateways, config)
    experience = ExperienceCache(run_dir)
    builders = _Builders(repos_dir, index_params or IndexParams())

    def solve(task: CompletionTask) -> LoopResult:
        if run_dir and not force:
            path = run_log_path(run_dir, task.task_id)
            if path.is_file():
                log = load_run_log(str(path))
                if log.complete:
                    logger.info(f"Skipping {task.task_id}: run log complete", extra={"task_id": task.task_id})
                    return result_from_log(log)
        try:
            index = builders.get(task.repo_name).build_for_task(task)
        except IngestError as e:
            log_error("IngestError", str(e), task_id=task.task_id)
            result = _task_error(task, str(e))
            experience.start_task(task)
            experience.finish_task(result)
            return result
        return agent.run_task(task, index, experience=experience)

    max_workers = workers or os.cpu_count() or 1
    executor = ThreadPoolExecutor(max_workers=max_workers)
    futures = [executor.submit(solve, task) for task in tasks]
    try:
        results = [f.result() for f in futures]
    except KeyboardInterrupt:
        logger.warning("Interrupted: cancelling pending tasks; finished run logs are kept")
        executor.shutdown(wait=True, cancel_futures=True)
        raise
    executor.shutdown(wait=True)
    return results


def collect_results(run_dir: str) -> List[LoopResult]:
    """LoopResults of every complete run log in a run directory, sorted by task id."""
    results = []
    for path in sorted(Path(run_dir).glob("*.log")):
        log = load_run_log(str(path))
        if log.complete:
            results.append(result_from_log(log))
    results.sort(key=lambda r: r.task_id)
    return results


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------

def aggregate(results: Iterable[LoopResult], config: Optional[Dict[str, object]] = None) -> BenchReport:
    """
    Per-repository arithmetic means of the final records' EM and ES.

    Failed tasks count with their best-so-far (or empty) record.
    """
    grouped: Dict[str, List[LoopResult]] = {}
    for r in results:
        grouped.setdefault(r.repo_name, []).append(r)

    per_repo = {}
    for repo in sorted(grouped):
        rows = grouped[repo]
        histogram = {reason: 0 for reason in STOP_REASONS}
        for r in rows:
            histogram[r.stop_reason] += 1
        per_repo[repo] = RepoScore(
            mean_em=sum(r.final_record.em for r in rows) / len(rows),
            mean_es=sum(r.final_record.es for r in rows) / len(rows),
            task_count=len(rows),
            stop_reasons=histogram,
        )
    return BenchReport(per_repo=per_repo, config=dict(config or {}))


def _markdown(report: BenchReport) -> str:
    header = "| Repository | EM | ES | Tasks | " + " | ".join(STOP_REASONS) + " |"
    rule = "|" + "---|" * (4 + len(STOP_REASONS))
    rows = [header, rule]
    for repo, score in report.per_repo.items():
        counts = " | ".join(str(score.stop_reasons.get(r, 0)) for r in STOP_REASONS)
        rows.append(f"| {repo} | {score.mean_em:.4f} | {score.mean_es:.4f} | {score.task_count} | {counts} |")
    return "\n".join(rows) + "\n"


def _csv(report: BenchReport) -> str:
    buffer = io.StringIO()
    buffer.write(f"# config: {json.dumps(report.config, sort_keys=True)}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["repo", "mean_em", "mean_es", "task_count", *STOP_REASONS])
    for repo, score in report.per_repo.items():
        writer.writerow([
            repo,
            repr(score.mean_em),
            repr(score.mean_es),
            score.task_count,
            *(score.stop_reasons.get(r, 0) for r in STOP_REASONS),
        ])
    return buffer.getvalue()


def _jsonl(report: BenchReport) -> str:
    lines = [json.dumps({"type": "config", "config": report.config}, sort_keys=True)]
    for repo, score in report.per_repo.items():
        lines.append(json.dumps({"type": "repo", "repo": repo, **score.model_dump()}, sort_keys=True))
    return "\n".join(lines) + "\n"


_RENDERERS = {"markdown": _markdown, "csv": _csv, "jsonl": _jsonl}


def render_report(report: BenchReport, fmt: str = "markdown") -> str:
    if fmt not in _RENDERERS:
        raise ValueError(f"Unknown report format: {fmt}")
    return _RENDERERS[fmt](report)


def emit_report(report: BenchReport, fmt: str, out_path: str) -> None:
    """
    Write a report file. Identical reports give byte-identical files.

    Args:
        report: Aggregated report
        fmt: 'markdown', 'csv' or 'jsonl'
        out_path: Destination file
    """
    text = render_report(report, fmt)
    path = Path(out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def load_report_csv(in_path: str) -> BenchReport:
    """Read a CSV report written by emit_report."""
    with open(in_path, "r", encoding="utf-8", newline="") as f:
        first = f.readline()
        if first.startswith("# config: "):
            config = json.loads(first[len("# config: "):])
        else:
            config = {}
            f.seek(0)
        reader = csv.DictReader(f)
        per_repo = {}
        for row in reader:
            per_repo[row["repo"]] = RepoScore(
                mean_em=float(row["mean_em"]),
                mean_es=float(row["mean_es"]),
                task_count=int(row["task_count"]),
                stop_reasons={r: int(row[r]) for r in STOP_REASONS},
            )
    return BenchReport(per_repo=per_repo, config=config)
