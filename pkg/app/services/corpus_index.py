"""Repository ingestion, line-window chunking and the immutable chunk index."""

import hashlib
import json
import os
import re
import threading
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field

from app.models import Chunk, CompletionTask, IndexParams, SourceFile
from app.utils.exceptions import IngestError
from app.utils.logging_config import logger


INDEX_SCHEMA_VERSION = 1

_TOKEN_RE = re.compile(r"[A-Za-z0-9_]+")


class IngestFilters(BaseModel):
    """Which files of a repository snapshot are indexed."""

    model_config = ConfigDict(frozen=True)

    extensions: Tuple[str, ...] = (".py",)
    exclude_dirs: Tuple[str, ...] = (".git", "__pycache__", ".venv", "venv", "node_modules", ".tox")


class IngestWarning(BaseModel):
    """A file skipped during ingestion."""

    path: str
    reason: str


class CorpusIndex(BaseModel):
    """Immutable searchable set of chunks."""

    model_config = ConfigDict(frozen=True)

    chunks: Tuple[Chunk, ...] = Field(default_factory=tuple)
    params: IndexParams = Field(default_factory=IndexParams)
    source_fingerprint: str = ""

    def __len__(self) -> int:
        return len(self.chunks)


def tokenize(text: str) -> frozenset:
    """
    Split text into its set of lowercased identifier-like tokens.

    Tokens are maximal runs of [A-Za-z0-9_].

    Examples:
        tokenize("def foo(bar):") == {"def", "foo", "bar"}
        tokenize("Foo foo FOO") == {"foo"}
    """
    return frozenset(_TOKEN_RE.findall(text.lower()))


def read_source_lines(path: Path) -> List[str]:
    """
    Read a UTF-8 text file as newline-stripped lines.

    Only "\n" (and a trailing "\r") ends a line, so line numbers agree with
    editors. Files containing NUL bytes are treated as binary.
    """
    raw = Path(path).read_bytes()
    if b"\x00" in raw:
        raise UnicodeDecodeError("utf-8", raw, 0, 1, "binary content")
    lines = raw.decode("utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [line[:-1] if line.endswith("\r") else line for line in lines]


def ingest_repo(
    root: str,
    task: Optional[CompletionTask] = None,
    filters: Optional[IngestFilters] = None,
    warnings: Optional[List[IngestWarning]] = None,
) -> List[SourceFile]:
    """
    Read every matching source file under a repository root.

    For the task's own file only the lines strictly before the completion
    line are kept, so the hidden line never reaches the index.

    Args:
        root: Repository directory
        task: Optional completion task whose file gets truncated
        filters: Extension and directory filters (default: Python sources)
        warnings: Optional list collecting one IngestWarning per skipped file

    Returns:
        SourceFiles sorted by repo-relative path
    """
    filters = filters or IngestFilters()
    root_path = Path(root)
    if not root_path.is_dir() or not os.access(root_path, os.R_OK | os.X_OK):
        raise IngestError(f"Repository root is missing or unreadable: {root}")

    files: List[SourceFile] = []
    for dirpath, dirnames, filenames in os.walk(root_path):
        dirnames[:] = sorted(d for d in dirnames if d not in filters.exclude_dirs)
        for filename in sorted(filenames):
            if not filename.endswith(filters.extensions):
                continue
            file_path = Path(dirpath) / filename
            rel_path = file_path.relative_to(root_path).as_posix()
            try:
                lines = read_source_lines(file_path)
            except (UnicodeDecodeError, OSError) as e:
                reason = f"undecodable: {e.reason}" if isinstance(e, UnicodeDecodeError) else f"unreadable: {e}"
                logger.warning(f"Skipping {rel_path}: {reason}")
                if warnings is not None:
                    warnings.append(IngestWarning(path=rel_path, reason=reason))
                continue

            if task is not None and rel_path == task.file_path:
                lines = lines[: task.line_no - 1]
            files.append(SourceFile(path=rel_path, lines=lines))

    files.sort(key=lambda f: f.path)
    return files


def chunk_file(file: SourceFile, window_size: int, stride: int) -> List[Chunk]:
    """
    Cut a file into fixed-stride line windows.

    Windows start at lines 1, 1+stride, 1+2*stride, ... for every start
    inside the file; windows running past the end are shortened.

    Args:
        file: Source file
        window_size: Lines per window
        stride: Lines between window starts (1 <= stride <= window_size)

    Returns:
        Chunks in start_line order
    """
    if window_size < 1 or not 1 <= stride <= window_size:
        raise ValueError(f"Invalid chunk geometry: window={window_size} stride={stride}")

    chunks = []
    total = len(file.lines)
    for start in range(0, total, stride):
        end = min(start + window_size, total)
        text = "\n".join(file.lines[start:end])
        chunks.append(Chunk(
            file_path=file.path,
            start_line=start + 1,
            end_line=end,
            text=text,
            token_set=tokenize(text),
        ))
    return chunks


def _file_digest(file: SourceFile) -> str:
    digest = hashlib.sha256()
    digest.update(file.path.encode("utf-8"))
    digest.update(b"\x00")
    digest.update("\n".join(file.lines).encode("utf-8"))
    return digest.hexdigest()


def _fingerprint(digests: Iterable[str]) -> str:
    combined = hashlib.sha256()
    for d in digests:
        combined.update(d.encode("ascii"))
    return combined.hexdigest()


def fingerprint_files(files: List[SourceFile]) -> str:
    """Content hash over (path, lines) of the files, independent of their order."""
    return _fingerprint(_file_digest(f) for f in sorted(files, key=lambda f: f.path))


def build_index(files: List[SourceFile], params: Optional[IndexParams] = None) -> CorpusIndex:
    """
    Build an immutable index from source files.

    Chunk order is file path ascending, then start line ascending; the
    fingerprint depends only on file paths and contents.

    Args:
        files: Source files (any order)
        params: Chunk geometry

    Returns:
        CorpusIndex
    """
    params = params or IndexParams()
    ordered = sorted(files, key=lambda f: f.path)
    chunks: List[Chunk] = []
    for f in ordered:
        chunks.extend(chunk_file(f, params.window_size, params.stride))
    fingerprint = _fingerprint(_file_digest(f) for f in ordered)
    logger.debug(f"Built index: {len(ordered)} files, {len(chunks)} chunks")
    return CorpusIndex(chunks=tuple(chunks), params=params, source_fingerprint=fingerprint)


class RepoIndexBuilder:
    """
    Per-repository index factory for many tasks.

    Ingests the repository once and caches each file's chunks, so building a
    task index only re-chunks the task's own truncated file.
    """

    def __init__(self, root: str, params: Optional[IndexParams] = None, filters: Optional[IngestFilters] = None):
        self.root = root
        self.params = params or IndexParams()
        self.filters = filters or IngestFilters()
        self.warnings: List[IngestWarning] = []
        self._files: Dict[str, SourceFile] = {
            f.path: f for f in ingest_repo(root, filters=self.filters, warnings=self.warnings)
        }
        self._chunks: Dict[str, List[Chunk]] = {}
        self._digests: Dict[str, str] = {}
        self._lock = threading.Lock()

    @property
    def files(self) -> List[SourceFile]:
        return [self._files[p] for p in sorted(self._files)]

    def _cached(self, path: str) -> Tuple[List[Chunk], str]:
        with self._lock:
            if path not in self._chunks:
                f = self._files[path]
                self._chunks[path] = chunk_file(f, self.params.window_size, self.params.stride)
                self._digests[path] = _file_digest(f)
            return self._chunks[path], self._digests[path]

    def build_for_task(self, task: Optional[CompletionTask] = None) -> CorpusIndex:
        """Index equal to build_index(ingest_repo(root, task), params)."""
        chunks: List[Chunk] = []
        digests: List[str] = []
        for path in sorted(self._files):
            if task is not None and path == task.file_path:
                truncated = SourceFile(path=path, lines=self._files[path].lines[: task.line_no - 1])
                chunks.extend(chunk_file(truncated, self.params.window_size, self.params.stride))
                digests.append(_file_digest(truncated))
            else:
                file_chunks, digest = self._cached(path)
                chunks.extend(file_chunks)
                digests.append(digest)
        return CorpusIndex(chunks=tuple(chunks), params=self.params, source_fingerprint=_fingerprint(digests))


def save_index(index: CorpusIndex, out_path: str) -> None:
    """
    Write the index as line-delimited JSON.

    The first record is a header with params and fingerprint; every following
    record is one chunk with its tokens sorted.
    """
    path = Path(out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        header = {
            "type": "header",
            "schema_version": INDEX_SCHEMA_VERSION,
            "window_size": index.params.window_size,
            "stride": index.params.stride,
            "fingerprint": index.source_fingerprint,
            "chunk_count": len(index.chunks),
        }
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for chunk in index.chunks:
            record = {
                "file_path": chunk.file_path,
                "start_line": chunk.start_line,
                "end_line": chunk.end_line,
                "text": chunk.text,
                "tokens": sorted(chunk.token_set),
            }
            f.write(json.dumps(record, sort_keys=True) + "\n")


def load_index(in_path: str) -> CorpusIndex:
    """Read an index written by save_index."""
    with open(in_path, "r", encoding="utf-8") as f:
        header = json.loads(f.readline())
        if header.get("type") != "header":
            raise ValueError(f"{in_path} does not start with an index header")
        chunks = []
        for line in f:
            if not line.strip():
                continue
            record = json.loads(line)
            chunks.append(Chunk(
                file_path=record["file_path"],
                start_line=record["start_line"],
                end_line=record["end_line"],
                text=record["text"],
                token_set=frozenset(record["tokens"]),
            ))
    params = IndexParams(window_size=header["window_size"], stride=header["stride"])
    return CorpusIndex(chunks=tuple(chunks), params=params, source_fingerprint=header["fingerprint"])
