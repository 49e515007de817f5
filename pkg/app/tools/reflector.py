"""Reflector: builds the self-review prompt and parses the reply into Feedback."""

import keyword
import re
from typing import List, Optional

from app.models import Feedback
from app.services.llm_engine import GenRequest, LLMGateway
from app.utils.exceptions import BackendUnavailable


REFLECTOR_TEMPLATE_VERSION = "reflector-v1"

EMPTY_MARKER = "(empty)"

SECTION_EVALUATION = "Evaluation Analysis"
SECTION_CONTEXT = "Contextual Analysis"
SECTION_SUGGESTIONS = "Specific Suggestions"

REFLECTION_TEMPLATE = """You are reviewing one line of code written by a code completion model.

### Completion prompt
{initial_prompt}

### Generated code
{generated}
{scores}
### Instructions
Review the generated line against the completion prompt and reply in exactly three sections:

Evaluation Analysis:
{evaluation_hint}

Contextual Analysis:
Explain which parts of the surrounding code and retrieved snippets the line should depend on, and what context is missing.

Specific Suggestions:
List plain lines of code, one per line and without explanations, that would help find the right context or that the correct line is likely to resemble.
"""

_EVALUATION_HINT_SCORED = "Interpret the evaluator scores above and explain what is wrong with the generated line."
_EVALUATION_HINT_BLIND = "Judge from the code alone whether the generated line is correct and explain any problems."

_HEADER_RE = re.compile(
    r"^[\s#*>\-\d.)]*(evaluation analysis|contextual analysis|specific suggestions)\b[\s*_:]*(.*)$",
    re.IGNORECASE,
)
_BULLET_RE = re.compile(r"^(?:[-*+•]\s+|\d+[.)]\s+)")
_CODE_CHARS = set("=():.")


def assemble_reflection_prompt(
    initial_prompt: str,
    generated: str,
    em: int,
    es: float,
    scores_visible: bool = True,
) -> str:
    """
    Concatenate the completion prompt, the generated line and (optionally) its scores.

    Args:
        initial_prompt: Rendered completion prompt of this iteration
        generated: Post-processed generated line
        em: Exact match (0 or 1)
        es: Edit similarity in [0, 1]
        scores_visible: False hides all score text (evaluator-ablated runs)

    Returns:
        Rendered reflection prompt
    """
    scores = f"\n### Evaluator scores\nEM: {em}\nES: {es:.4f}\n" if scores_visible else ""
    return REFLECTION_TEMPLATE.format(
        initial_prompt=initial_prompt,
        generated=generated if generated.strip() else EMPTY_MARKER,
        scores=scores,
        evaluation_hint=_EVALUATION_HINT_SCORED if scores_visible else _EVALUATION_HINT_BLIND,
    )


def reflect(
    gateway: LLMGateway,
    prompt: str,
    max_new_tokens: int = 512,
    temperature: float = 0.0,
    task_id: Optional[str] = None,
) -> str:
    """
    Send the reflection prompt; returns raw reply text (possibly empty).

    Raises:
        BackendUnavailable: reflector backend failed after retries
    """
    req = GenRequest(
        role_tag="reflector",
        prompt=prompt,
        max_new_tokens=max_new_tokens,
        temperature=temperature,
        task_id=task_id,
    )
    try:
        return gateway.generate(req).text
    except BackendUnavailable as e:
        if e.task_id is None:
            e.task_id = task_id
        raise


def _clean_code_line(line: str) -> str:
    text = _BULLET_RE.sub("", line.strip()).strip()
    if len(text) >= 2 and text.startswith("`") and text.endswith("`"):
        text = text.strip("`").strip()
    return text


def _looks_like_code(line: str) -> bool:
    if any(ch in _CODE_CHARS for ch in line):
        return True
    first = line.split(maxsplit=1)[0] if line.split() else ""
    return first in keyword.kwlist


def _code_lines(lines: List[str]) -> List[str]:
    out = []
    for line in lines:
        if line.strip().startswith("```"):
            continue
        cleaned = _clean_code_line(line)
        if cleaned:
            out.append(cleaned)
    return out


def parse_feedback(raw: str, x_cap: Optional[int] = None) -> Feedback:
    """
    Split a reflector reply into its three sections.

    Headers are matched case-insensitively at line start and may carry
    markdown decoration, numbering or a trailing colon. Text after the colon
    on a header line belongs to that section. Without any header the reply
    is scanned for code-looking lines instead. Never raises.

    Args:
        raw: Reflector reply, kept verbatim in Feedback.raw
        x_cap: Maximum number of suggestions kept (None keeps all)

    Returns:
        Feedback
    """
    sections = {}
    current = None
    for line in (raw or "").splitlines():
        match = _HEADER_RE.match(line)
        if match:
            current = match.group(1).lower()
            sections.setdefault(current, [])
            rest = match.group(2).strip().rstrip("*_").strip()
            if rest:
                sections[current].append(rest)
            continue
        if current is not None:
            sections[current].append(line)

    if not sections:
        suggestions = [line for line in _code_lines((raw or "").splitlines()) if _looks_like_code(line)]
        evaluation = context = ""
    else:
        evaluation = "\n".join(sections.get(SECTION_EVALUATION.lower(), [])).strip()
        context = "\n".join(sections.get(SECTION_CONTEXT.lower(), [])).strip()
        suggestions = _code_lines(sections.get(SECTION_SUGGESTIONS.lower(), []))

    if x_cap is not None:
        suggestions = suggestions[: max(x_cap, 0)]
    return Feedback(
        evaluation_analysis=evaluation,
        contextual_analysis=context,
        suggestions=suggestions,
        raw=raw or "",
    )


def render_feedback(feedback: Feedback) -> str:
    """Render Feedback back into the three-section reply format."""
    suggestions = "\n".join(feedback.suggestions)
    return (
        f"{SECTION_EVALUATION}:\n{feedback.evaluation_analysis}\n\n"
        f"{SECTION_CONTEXT}:\n{feedback.contextual_analysis}\n\n"
        f"{SECTION_SUGGESTIONS}:\n{suggestions}\n"
    )
