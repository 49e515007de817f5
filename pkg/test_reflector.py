"""Tests for the reflection prompt and feedback parsing."""

import random
from pathlib import Path

import pytest

from app.models import Feedback
from app.services.llm_engine import LLMGateway
from app.tools.reflector import EMPTY_MARKER, assemble_reflection_prompt, parse_feedback, reflect, render_feedback
from app.utils.exceptions import BackendUnavailable

GOLDEN_DIR = Path(__file__).parent / "data" / "golden"

WELL_FORMED = """**Evaluation Analysis:** The line returns the wrong variable.
It ignores the cache.

## Contextual Analysis
The helper in utils.py builds the cache.

Specific Suggestions:
1. `cache = build_cache(items)`
- return cache[key]
```python
value = cache.get(key)
```
"""


def test_reflection_prompt_matches_golden_render():
    rendered = assemble_reflection_prompt("PROMPT", "x = 1", 0, 0.875, scores_visible=True)
    assert rendered == (GOLDEN_DIR / "reflector_prompt.txt").read_text(encoding="utf-8")


def test_reflection_prompt_order_and_scores():
    rendered = assemble_reflection_prompt("PROMPT BODY", "return y", 0, 0.87, scores_visible=True)
    assert rendered.index("PROMPT BODY") < rendered.index("return y") < rendered.index("EM: 0")
    assert "ES: 0.8700" in rendered
    for header in ("Evaluation Analysis", "Contextual Analysis", "Specific Suggestions"):
        assert header in rendered


def test_reflection_prompt_hides_scores():
    rendered = assemble_reflection_prompt("PROMPT", "return y", 0, 0.87, scores_visible=False)
    assert "EM:" not in rendered
    assert "ES:" not in rendered
    assert "0.87" not in rendered


def test_reflection_prompt_marks_empty_generation():
    rendered = assemble_reflection_prompt("PROMPT", "", 0, 0.0)
    assert f"### Generated code\n{EMPTY_MARKER}\n" in rendered


def test_parse_well_formed_reply():
    feedback = parse_feedback(WELL_FORMED)
    assert feedback.evaluation_analysis == "The line returns the wrong variable.\nIt ignores the cache."
    assert feedback.contextual_analysis == "The helper in utils.py builds the cache."
    assert feedback.suggestions == ["cache = build_cache(items)", "return cache[key]", "value = cache.get(key)"]
    assert feedback.raw == WELL_FORMED


def test_parse_caps_suggestions():
    assert len(parse_feedback(WELL_FORMED, x_cap=2).suggestions) == 2
    assert parse_feedback(WELL_FORMED, x_cap=0).suggestions == []


def test_parse_empty_reply():
    assert parse_feedback("") == Feedback()


def test_parse_headerless_reply_falls_back_to_code_lines():
    feedback = parse_feedback("Maybe look here\nx = compute()\nreturn x\nthanks")
    assert feedback.evaluation_analysis == ""
    assert feedback.contextual_analysis == ""
    assert feedback.suggestions == ["x = compute()", "return x"]


def test_parse_headers_are_case_insensitive():
    feedback = parse_feedback("EVALUATION ANALYSIS\nbad\nspecific suggestions:\nfoo(1)")
    assert feedback.evaluation_analysis == "bad"
    assert feedback.suggestions == ["foo(1)"]


def test_render_then_parse_round_trip():
    original = Feedback(
        evaluation_analysis="Wrong name.",
        contextual_analysis="See the helper in utils.py.",
        suggestions=["a = b(1)", "return a"],
    )
    parsed = parse_feedback(render_feedback(original))
    assert parsed.evaluation_analysis == original.evaluation_analysis
    assert parsed.contextual_analysis == original.contextual_analysis
    assert parsed.suggestions == original.suggestions


def test_parser_is_total():
    rng = random.Random(3)
    alphabet = "ab =():.#*-`\n1 Specific Suggestions Evaluation"
    for _ in range(500):
        raw = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 80)))
        feedback = parse_feedback(raw, x_cap=3)
        assert feedback.raw == raw
        assert len(feedback.suggestions) <= 3
        assert all(s and s == s.strip() for s in feedback.suggestions)


def test_reflect_returns_raw_text(scripted_gateways):
    gateways = scripted_gateways([], [WELL_FORMED, ""])
    assert reflect(gateways.reflector, "prompt") == WELL_FORMED
    assert reflect(gateways.reflector, "prompt") == ""


def test_reflect_backend_down(fake_server, http_config):
    fake_server.status = 503
    with pytest.raises(BackendUnavailable):
        reflect(LLMGateway(http_config), "prompt", task_id="t")
