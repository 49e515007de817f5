"""Actor: completion prompt assembly, generation and single-line post-processing."""

from typing import List, Optional

from pydantic import BaseModel, Field

from app.services.llm_engine import GenRequest, LLMGateway
from app.tools.retriever import RetrievedSnippet
from app.utils.exceptions import BackendUnavailable


# Bumped whenever the rendered layout changes; recorded in run manifests
ACTOR_TEMPLATE_VERSION = "actor-v1"

BLOCK_SEPARATOR = "\n\n"


class SnippetBlock(BaseModel):
    """A retrieved chunk as it appears in the prompt."""

    file_path: str
    start_line: int
    end_line: int
    text: str
    score: float = 0.0

    def render(self) -> str:
        return f"# {self.file_path}:{self.start_line}-{self.end_line}\n{self.text}"


class CompletionPrompt(BaseModel):
    """Snippet blocks followed by the tail of the unfinished code."""

    snippet_blocks: List[SnippetBlock] = Field(default_factory=list)
    prefix_tail: List[str] = Field(default_factory=list)
    rendered: str = ""


class ActorParams(BaseModel):
    """Decoding parameters for the actor."""

    max_new_tokens: int = 128
    temperature: float = 0.0
    stop_sequences: List[str] = Field(default_factory=list)


def _render(blocks: List[SnippetBlock], tail: str) -> str:
    parts = [b.render() for b in blocks]
    if tail:
        parts.append(tail)
    return BLOCK_SEPARATOR.join(parts)


def _fit_tail(prefix_lines: List[str], prefix_tail_len: int, budget: int) -> List[str]:
    tail = list(prefix_lines[-prefix_tail_len:]) if prefix_lines else []
    while len(tail) > 1 and len("\n".join(tail)) > budget:
        tail.pop(0)
    if len(tail) == 1 and len(tail[0]) > budget:
        # keep the end of an overlong final line
        tail = [tail[0][-budget:]]
    return tail


def assemble_completion_prompt(
    snippets: List[RetrievedSnippet],
    prefix_lines: List[str],
    budget: int = 6000,
    prefix_tail_len: int = 30,
    snippet_order: str = "desc",
) -> CompletionPrompt:
    """
    Render retrieved snippets followed by the last lines of the unfinished code.

    Each snippet is a "# path:start-end" header line plus the chunk text;
    blocks are separated by blank lines. When the budget (characters) would
    be exceeded the lowest-scored snippets are dropped first, then the
    oldest prefix-tail lines, never going below one prefix line.

    Args:
        snippets: Retrieved snippets (any order)
        prefix_lines: File lines before the completion point
        budget: Maximum rendered length in characters
        prefix_tail_len: Prefix lines to include
        snippet_order: 'desc' renders best first, 'asc' renders best last

    Returns:
        CompletionPrompt
    """
    if budget <= 0:
        raise ValueError("budget must be > 0")

    tail_lines = _fit_tail(prefix_lines, prefix_tail_len, budget)
    tail = "\n".join(tail_lines)

    ranked = sorted(
        snippets,
        key=lambda s: (-s.score, s.chunk.file_path, s.chunk.start_line),
    )
    blocks = [
        SnippetBlock(
            file_path=s.chunk.file_path,
            start_line=s.chunk.start_line,
            end_line=s.chunk.end_line,
            text=s.chunk.text,
            score=s.score,
        )
        for s in ranked
    ]

    # keep the longest best-first run that fits
    used = len(tail)
    kept: List[SnippetBlock] = []
    for block in blocks:
        cost = len(block.render()) + (len(BLOCK_SEPARATOR) if (kept or tail) else 0)
        if used + cost > budget:
            break
        kept.append(block)
        used += cost

    ordered = kept if snippet_order == "desc" else list(reversed(kept))
    return CompletionPrompt(snippet_blocks=ordered, prefix_tail=tail_lines, rendered=_render(ordered, tail))


def generate_completion(
    gateway: LLMGateway,
    prompt: CompletionPrompt,
    params: Optional[ActorParams] = None,
    task_id: Optional[str] = None,
) -> str:
    """
    Ask the actor backend to continue the prompt.

    Args:
        gateway: Actor gateway
        prompt: Assembled completion prompt
        params: Decoding parameters
        task_id: Attached to requests and to BackendUnavailable

    Returns:
        Backend text verbatim
    """
    params = params or ActorParams()
    req = GenRequest(
        role_tag="actor",
        prompt=prompt.rendered or "\n",
        max_new_tokens=params.max_new_tokens,
        temperature=params.temperature,
        stop_sequences=params.stop_sequences,
        task_id=task_id,
    )
    try:
        return gateway.generate(req).text
    except BackendUnavailable as e:
        if e.task_id is None:
            e.task_id = task_id
        raise


def postprocess_line(raw: str) -> str:
    """
    First non-blank line of the model output, skipping markdown fence lines.

    Examples:
        postprocess_line("return x\\nreturn y") == "return x"
        postprocess_line("```python\\nreturn x\\n```") == "return x"
    """
    for line in raw.splitlines():
        stripped = line.strip()
        if not stripped or stripped.startswith("```"):
            continue
        return line.rstrip()
    return ""
