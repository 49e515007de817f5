"""Experience cache: per-task iteration history plus the JSONL run log."""

import json
import threading
from pathlib import Path
from typing import Dict, List, Optional
from urllib.parse import quote

from pydantic import BaseModel, Field

from app.models import CompletionTask, IterationRecord, LoopResult
from app.utils.exceptions import ContractViolation, NotRun
from app.utils.logging_config import logger


RUN_LOG_SCHEMA_VERSION = 1


class LoopState(BaseModel):
    """Stopping-rule state after an iteration."""

    no_imp_cnt: int = 0
    best_em: int = 0
    best_es: float = 0.0


class RunLog(BaseModel):
    """A parsed run-log file."""

    header: Dict[str, object] = Field(default_factory=dict)
    records: List[IterationRecord] = Field(default_factory=list)
    loop_states: List[Optional[LoopState]] = Field(default_factory=list)
    result: Optional[Dict[str, object]] = None

    @property
    def complete(self) -> bool:
        return self.result is not None


def run_log_path(run_dir: str, task_id: str) -> Path:
    """runs/<run-id>/<task-id>.log with the task id percent-encoded into one file name."""
    return Path(run_dir) / f"{quote(task_id, safe='')}.log"


def _dump(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n"


class ExperienceCache:
    """
    Append-only iteration records keyed by task id.

    When run_dir is given every header, record and result is also appended
    to that task's run log. One writer per task; distinct tasks may write
    concurrently.
    """

    def __init__(self, run_dir: Optional[str] = None):
        self.run_dir = run_dir
        self._records: Dict[str, List[IterationRecord]] = {}
        self._lock = threading.Lock()
        if run_dir:
            Path(run_dir).mkdir(parents=True, exist_ok=True)

    def _append(self, task_id: str, obj: dict, mode: str = "a") -> None:
        if not self.run_dir:
            return
        with open(run_log_path(self.run_dir, task_id), mode, encoding="utf-8") as f:
            f.write(_dump(obj))

    def start_task(self, task: CompletionTask) -> None:
        """Reset the task's history and (re)create its run log with a header line."""
        with self._lock:
            self._records[task.task_id] = []
        self._append(
            task.task_id,
            {
                "type": "header",
                "schema_version": RUN_LOG_SCHEMA_VERSION,
                "task_id": task.task_id,
                "repo_name": task.repo_name,
                "file_path": task.file_path,
                "line_no": task.line_no,
            },
            mode="w",
        )

    def record(self, task_id: str, rec: IterationRecord, loop_state: Optional[LoopState] = None) -> None:
        """
        Append one iteration record.

        Args:
            task_id: Task key
            rec: Record whose iteration equals the current record count
            loop_state: Stopping-rule state after this iteration, logged alongside

        Raises:
            ContractViolation: rec.iteration is out of order
        """
        with self._lock:
            records = self._records.setdefault(task_id, [])
            if rec.iteration != len(records):
                raise ContractViolation(
                    f"Task {task_id}: expected iteration {len(records)}, got {rec.iteration}"
                )
            records.append(rec)
        self._append(
            task_id,
            {
                "type": "iteration",
                "record": rec.model_dump(mode="json"),
                "loop_state": loop_state.model_dump() if loop_state else None,
            },
        )

    def finish_task(self, result: LoopResult) -> None:
        """Write the result line that marks the task's log complete and drop its in-memory records."""
        self._append(
            result.task_id,
            {
                "type": "result",
                "stop_reason": result.stop_reason,
                "iterations_run": result.iterations_run,
                "best_iteration": result.best_iteration,
                "last_iteration": result.last_iteration,
                "final_iteration": result.final_record.iteration if result.iterations_run else None,
                "error": result.error,
            },
        )
        with self._lock:
            self._records.pop(result.task_id, None)

    def records(self, task_id: str) -> List[IterationRecord]:
        with self._lock:
            return list(self._records.get(task_id, []))

    def latest_suggestions(self, task_id: str) -> List[str]:
        """Suggestions of the most recent record that carries feedback; [] if none."""
        for rec in reversed(self.records(task_id)):
            if rec.feedback is not None:
                return list(rec.feedback.suggestions)
        return []

    def best(self, task_id: str) -> IterationRecord:
        """
        Record maximizing (em, es); the earliest iteration wins ties.

        Raises:
            NotRun: task has no records
        """
        records = self.records(task_id)
        if not records:
            raise NotRun(f"Task {task_id} has no iteration records")
        best = records[0]
        for rec in records[1:]:
            if (rec.em, rec.es) > (best.em, best.es):
                best = rec
        return best

    def last(self, task_id: str) -> IterationRecord:
        records = self.records(task_id)
        if not records:
            raise NotRun(f"Task {task_id} has no iteration records")
        return records[-1]


def load_run_log(path: str) -> RunLog:
    """
    Parse a run-log file. A truncated trailing line (crashed run) is skipped.

    Args:
        path: Run-log file

    Returns:
        RunLog; complete is False when no result line was written
    """
    log = RunLog()
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
            except json.JSONDecodeError:
                logger.warning(f"Skipping unreadable run-log line {number} in {path}")
                continue
            kind = entry.get("type")
            if kind == "header":
                log.header = entry
            elif kind == "iteration":
                log.records.append(IterationRecord(**entry["record"]))
                state = entry.get("loop_state")
                log.loop_states.append(LoopState(**state) if state else None)
            elif kind == "result":
                log.result = entry
    return log


def is_task_complete(run_dir: str, task_id: str) -> bool:
    """True if the task's run log exists and ends with a result line."""
    path = run_log_path(run_dir, task_id)
    if not path.is_file():
        return False
    try:
        return load_run_log(str(path)).complete
    except (OSError, ValueError) as e:
        logger.warning(f"Run log for {task_id} unreadable, rerunning: {e}")
        return False


def result_from_log(log: RunLog) -> LoopResult:
    """Rebuild the LoopResult of a completed run log (used when resuming a run)."""
    if not log.complete:
        raise NotRun(f"Run log for {log.header.get('task_id')} has no result line")
    final_iteration = log.result.get("final_iteration")
    if final_iteration is not None and final_iteration < len(log.records):
        final_record = log.records[final_iteration]
    else:
        final_record = IterationRecord.empty()
    return LoopResult(
        task_id=str(log.header.get("task_id", "")),
        repo_name=str(log.header.get("repo_name", "")),
        final_record=final_record,
        stop_reason=log.result["stop_reason"],
        iterations_run=log.result["iterations_run"],
        best_iteration=log.result.get("best_iteration"),
        last_iteration=log.result.get("last_iteration"),
        error=log.result.get("error"),
    )
