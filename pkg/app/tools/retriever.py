"""Retrieval targets and Jaccard top-k chunk retrieval."""

import heapq
from typing import List

from pydantic import BaseModel, ConfigDict, Field

from app.models import Chunk, TraceEntry
from app.services.corpus_index import CorpusIndex, tokenize


class RetrievalTarget(BaseModel):
    """The n-line query block: x feedback lines stacked above the last n-x prefix lines."""

    model_config = ConfigDict(frozen=True)

    lines: List[str] = Field(default_factory=list)
    token_set: frozenset[str] = frozenset()
    feedback_line_count: int = 0

    @classmethod
    def from_lines(cls, lines: List[str], feedback_line_count: int = 0) -> "RetrievalTarget":
        return cls(lines=lines, token_set=tokenize("\n".join(lines)), feedback_line_count=feedback_line_count)


class RetrievedSnippet(BaseModel):
    """A chunk and its Jaccard score against the target."""

    model_config = ConfigDict(frozen=True)

    chunk: Chunk
    score: float

    def trace_entry(self) -> TraceEntry:
        return TraceEntry(
            file_path=self.chunk.file_path,
            start_line=self.chunk.start_line,
            end_line=self.chunk.end_line,
            score=self.score,
        )


def _code_lines(prefix_lines: List[str]) -> List[str]:
    return [line for line in prefix_lines if line.strip()]


def _last(lines: List[str], count: int) -> List[str]:
    # lines[-0:] would return everything
    return lines[-count:] if count > 0 else []


def build_initial_target(prefix_lines: List[str], n: int) -> RetrievalTarget:
    """
    First-iteration target: the last n non-blank lines of the unfinished code.

    Args:
        prefix_lines: File lines before the completion point
        n: Target length in lines

    Returns:
        RetrievalTarget with feedback_line_count == 0
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    return RetrievalTarget.from_lines(_last(_code_lines(prefix_lines), n))


def build_feedback_target(suggestions: List[str], prefix_lines: List[str], n: int, x_cap: int) -> RetrievalTarget:
    """
    Feedback-augmented target: x suggestion lines followed by the last n-x prefix lines.

    x = min(len(suggestions), x_cap). With no suggestions this equals
    build_initial_target(prefix_lines, n).

    Args:
        suggestions: Reflector suggestion lines, used verbatim
        prefix_lines: File lines before the completion point
        n: Target length in lines
        x_cap: Upper bound on feedback lines (<= n)

    Returns:
        RetrievalTarget
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if x_cap > n:
        raise ValueError(f"x_cap ({x_cap}) must not exceed n ({n})")
    x = min(len(suggestions), max(x_cap, 0))
    if x == 0:
        return build_initial_target(prefix_lines, n)
    lines = list(suggestions[:x]) + _last(_code_lines(prefix_lines), n - x)
    return RetrievalTarget.from_lines(lines, feedback_line_count=x)


def jaccard(a: frozenset, b: frozenset) -> float:
    """
    |a & b| / |a | b|; 0.0 when both sets are empty.

    Examples:
        jaccard({"a", "b", "c"}, {"b", "c", "d"}) == 0.5
    """
    union = len(a | b)
    if union == 0:
        return 0.0
    return len(a & b) / union


def retrieve(index: CorpusIndex, target: RetrievalTarget, k: int) -> List[RetrievedSnippet]:
    """
    Top-k chunks by descending Jaccard score.

    Ties are broken by file path, then start line, ascending. Every chunk is
    scored, so the result equals the first k of a full sort.

    Args:
        index: Corpus index
        target: Retrieval target
        k: Number of snippets

    Returns:
        Up to k snippets, best first
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    query = target.token_set
    scored = (
        (-jaccard(query, chunk.token_set), chunk.file_path, chunk.start_line, position)
        for position, chunk in enumerate(index.chunks)
    )
    top = heapq.nsmallest(k, scored)
    return [RetrievedSnippet(chunk=index.chunks[pos], score=-neg) for neg, _, _, pos in top]
