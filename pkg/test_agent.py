"""Loop controller tests: stopping rules, ablation modes and the feedback effect."""

import pytest

from app.agent import CompletionAgent, run_task
from app.models import BackendConfig, IndexParams, LoopConfig, SourceFile
from app.services.corpus_index import RepoIndexBuilder, build_index
from app.services.experience import ExperienceCache, load_run_log, run_log_path
from app.services.llm_engine import Gateways, LLMGateway, ScriptedBackend, ScriptedResponse
from conftest import make_task

SUGGESTION_REPLY = "Evaluation Analysis:\nwrong\n\nContextual Analysis:\nnone\n\nSpecific Suggestions:\nfoo = bar()\n"

PREFIX = ["import os", "def load(path):", "    data = read(path)"]


@pytest.fixture
def toy_index():
    files = [
        SourceFile(path="util.py", lines=["def read(path):", "    with open(path) as f:", "        return f.read()"]),
        SourceFile(path="t.py", lines=PREFIX),
    ]
    return build_index(files, IndexParams(window_size=4, stride=2))


class RecordingBackend(ScriptedBackend):
    """Scripted backend that keeps every prompt it sees."""

    def __init__(self, responses):
        super().__init__(responses)
        self.prompts = []

    def complete(self, req):
        self.prompts.append((req.role_tag, req.prompt))
        return super().complete(req)


def _gateways(actor, reflector=()):
    backend = RecordingBackend(
        [ScriptedResponse(role_tag="actor", text=t) for t in actor]
        + [ScriptedResponse(role_tag="reflector", text=t) for t in reflector]
    )
    config = BackendConfig()
    return Gateways(actor=LLMGateway(config, backend=backend), reflector=LLMGateway(config, backend=backend)), backend


def _es_line(truth_len: int, wrong: int) -> str:
    return "a" * wrong + "b" * (truth_len - wrong)


def test_stops_immediately_on_exact_match(toy_index):
    gateways, backend = _gateways(["    return data"])
    task = make_task(PREFIX, "    return data")
    result = run_task(task, toy_index, gateways, LoopConfig())
    assert result.stop_reason == "exact_match"
    assert result.iterations_run == 1
    assert result.final_record.em == 1
    assert result.final_record.es == 1.0
    assert [role for role, _ in backend.prompts] == ["actor"]


def test_stops_on_exact_match_after_reflection(toy_index):
    gateways, backend = _gateways(["pass", "return None", "return data"], [SUGGESTION_REPLY] * 2)
    result = run_task(make_task(PREFIX, "return data"), toy_index, gateways, LoopConfig())
    assert result.stop_reason == "exact_match"
    assert result.iterations_run == 3
    assert result.final_record.iteration == 2
    assert backend.remaining("reflector") == 0


def test_stagnation_after_three_small_gains(toy_index, tmp_path):
    truth = "b" * 1000
    actor = [_es_line(1000, d) for d in (500, 495, 493, 491)]
    gateways, backend = _gateways(actor, [SUGGESTION_REPLY] * 3)
    task = make_task(PREFIX, truth)
    result = run_task(task, toy_index, gateways, LoopConfig(), experience=ExperienceCache(str(tmp_path)))

    assert result.stop_reason == "stagnation"
    assert result.iterations_run == 4
    assert backend.remaining("reflector") == 0
    assert result.final_record.iteration == 3
    assert result.best_iteration == 3
    assert result.last_iteration == 3

    log = load_run_log(str(run_log_path(str(tmp_path), task.task_id)))
    assert [s.no_imp_cnt for s in log.loop_states] == [0, 1, 2, 3]
    assert [s.best_es for s in log.loop_states] == [0.5, 0.5, 0.5, 0.5]


def test_no_imp_count_replays_from_es_sequence(toy_index, tmp_path):
    truth = "b" * 1000
    wrong = [800, 700, 695, 650, 648, 646, 644]
    gateways, _ = _gateways([_es_line(1000, d) for d in wrong], [SUGGESTION_REPLY] * 10)
    task = make_task(PREFIX, truth)
    config = LoopConfig()
    run_task(task, toy_index, gateways, config, experience=ExperienceCache(str(tmp_path)))
    log = load_run_log(str(run_log_path(str(tmp_path), task.task_id)))

    best_es, count, expected = 0.0, 0, []
    for rec in log.records:
        if rec.es - best_es < config.es_epsilon:
            count += 1
        else:
            count, best_es = 0, rec.es
        expected.append(count)
    assert [s.no_imp_cnt for s in log.loop_states] == expected
    assert expected == [0, 0, 1, 0, 1, 2, 3]
    assert log.result["stop_reason"] == "stagnation"


def test_hard_stop_at_max_iter(toy_index):
    actor = [_es_line(100, 90 - 2 * i) for i in range(10)]
    gateways, backend = _gateways(actor, [SUGGESTION_REPLY] * 10)
    result = run_task(make_task(PREFIX, "b" * 100), toy_index, gateways, LoopConfig())
    assert result.stop_reason == "max_iter"
    assert result.iterations_run == 10
    assert backend.remaining("reflector") == 0
    assert result.final_record.iteration == 9


def test_final_last_reports_last_iteration(toy_index):
    actor = [_es_line(100, d) for d in (10, 50, 60)]
    gateways, _ = _gateways(actor, [SUGGESTION_REPLY] * 3)
    result = run_task(make_task(PREFIX, "b" * 100), toy_index, gateways, LoopConfig(max_iter=3, final="last"))
    assert result.final_record.iteration == 2
    assert result.best_iteration == 0


def test_no_reflect_mode_runs_one_pass(toy_index):
    gateways, backend = _gateways(["pass", "pass"], [SUGGESTION_REPLY])
    result = run_task(make_task(PREFIX, "return data"), toy_index, gateways, LoopConfig(mode="no_reflect_no_experience"))
    assert result.iterations_run == 1
    assert result.stop_reason == "max_iter"
    assert [role for role, _ in backend.prompts] == ["actor"]


def test_baseline_mode_prompts_with_prefix_only(toy_index, tmp_path, monkeypatch):
    def no_retrieval(*args, **kwargs):
        raise AssertionError("retrieve called in baseline mode")

    monkeypatch.setattr("app.agent.retrieve", no_retrieval)
    gateways, backend = _gateways(["pass", "pass"], [SUGGESTION_REPLY])
    task = make_task(PREFIX, "return data")
    result = run_task(task, toy_index, gateways, LoopConfig(mode="no_retrieval"), experience=ExperienceCache(str(tmp_path)))

    assert result.iterations_run == 1
    assert result.stop_reason == "max_iter"
    assert backend.prompts == [("actor", "\n".join(PREFIX))]
    assert backend.remaining("reflector") == 1
    log = load_run_log(str(run_log_path(str(tmp_path), task.task_id)))
    assert log.records[0].retrieval_trace == []
    assert log.records[0].target_lines == []


def test_baseline_mode_stops_on_exact_match(toy_index):
    gateways, _ = _gateways(["return data"])
    result = run_task(make_task(PREFIX, "return data"), toy_index, gateways, LoopConfig(mode="no_retrieval"))
    assert result.stop_reason == "exact_match"
    assert result.iterations_run == 1


def test_no_evaluator_mode_hides_scores_and_ignores_exact_match(toy_index):
    gateways, backend = _gateways(["return data"] * 3, [SUGGESTION_REPLY] * 3)
    result = run_task(make_task(PREFIX, "return data"), toy_index, gateways, LoopConfig(max_iter=3, mode="no_evaluator"))
    assert result.stop_reason == "max_iter"
    assert result.iterations_run == 3
    assert result.final_record.iteration == 2
    reflections = [prompt for role, prompt in backend.prompts if role == "reflector"]
    assert len(reflections) == 3
    assert all("EM:" not in p and "ES:" not in p for p in reflections)


def test_blind_mode_behaves_like_no_evaluator(toy_index):
    gateways, backend = _gateways(["return data"] * 2, [SUGGESTION_REPLY] * 2)
    result = run_task(make_task(PREFIX, "return data"), toy_index, gateways, LoopConfig(max_iter=2, blind=True))
    assert result.iterations_run == 2
    assert all("EM:" not in p for role, p in backend.prompts if role == "reflector")


def test_backend_failure_keeps_best_record(toy_index):
    gateways, _ = _gateways([_es_line(10, 2), _es_line(10, 5)], [SUGGESTION_REPLY])
    result = run_task(make_task(PREFIX, "b" * 10), toy_index, gateways, LoopConfig())
    assert result.stop_reason == "backend_error"
    assert result.failed
    assert result.iterations_run == 2
    assert result.final_record.iteration == 0
    assert result.error


def test_backend_failure_on_first_call(toy_index):
    gateways, _ = _gateways([])
    result = run_task(make_task(PREFIX, "return data"), toy_index, gateways, LoopConfig())
    assert result.stop_reason == "backend_error"
    assert result.iterations_run == 0
    assert result.final_record.generated_line == ""
    assert result.final_record.em == 0


def test_iteration_callback_sees_every_record(toy_index):
    gateways, _ = _gateways(["pass", "return data"], [SUGGESTION_REPLY])
    seen = []
    CompletionAgent(gateways, LoopConfig()).run_task(
        make_task(PREFIX, "return data"), toy_index, on_iteration=lambda rec, state: seen.append(rec.iteration)
    )
    assert seen == [0, 1]


FEEDBACK_REPO = {
    "t.py": "def handler(request):\n    payload = parse(request)\n    return render_invoice(payload)\n",
    "billing/invoice.py": "ZEBRA = zebra_marker_helper()  # MARKER_CHUNK\n",
    "other.py": "value = parse(blob, extra, more)\n",
}
FEEDBACK_TRUTH = "    return render_invoice(payload)"


def _feedback_setup(make_repo):
    root = make_repo(FEEDBACK_REPO, name="feedback")
    task = make_task(
        ["def handler(request):", "    payload = parse(request)"],
        FEEDBACK_TRUTH,
        task_id="feedback/t.py:3",
        repo_name="feedback",
    )
    index = RepoIndexBuilder(str(root), IndexParams(window_size=20, stride=10)).build_for_task(task)
    backend = ScriptedBackend(
        [ScriptedResponse(role_tag="actor", text=FEEDBACK_TRUTH, match="MARKER_CHUNK")]
        + [ScriptedResponse(role_tag="actor", text="return None") for _ in range(5)]
        + [ScriptedResponse(role_tag="reflector", text="Specific Suggestions:\nzebra_marker_helper()") for _ in range(5)]
    )
    config = BackendConfig()
    gateways = Gateways(actor=LLMGateway(config, backend=backend), reflector=LLMGateway(config, backend=backend))
    return task, index, gateways


def test_feedback_reaches_chunk_plain_retrieval_misses(make_repo):
    config = LoopConfig(n=4, k=2)

    task, index, gateways = _feedback_setup(make_repo)
    full = run_task(task, index, gateways, config)
    assert full.final_record.em == 1
    assert full.stop_reason == "exact_match"
    assert full.iterations_run <= 3

    task, index, gateways = _feedback_setup(make_repo)
    single = run_task(task, index, gateways, config.model_copy(update={"mode": "no_reflect_no_experience"}))
    assert single.final_record.em == 0
    assert full.final_record.em > single.final_record.em
