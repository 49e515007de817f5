"""Iterative retrieve-generate-evaluate-reflect agent for line-level code completion."""

from typing import Callable, List, Optional

from app.models import CompletionTask, Feedback, IterationRecord, LoopConfig, LoopResult
from app.services.corpus_index import CorpusIndex
from app.services.experience import ExperienceCache, LoopState
from app.services.llm_engine import Gateways
from app.services.metrics import evaluate
from app.tools.actor import ActorParams, assemble_completion_prompt, generate_completion, postprocess_line
from app.tools.reflector import assemble_reflection_prompt, parse_feedback, reflect
from app.tools.retriever import RetrievalTarget, build_feedback_target, build_initial_target, retrieve
from app.utils.exceptions import BackendUnavailable, ScriptExhausted
from app.utils.logging_config import log_error, log_iteration, log_retrieval, log_task_result, logger


IterationCallback = Callable[[IterationRecord, LoopState], None]


class _ReflectionFailed(Exception):
    """Carries the reflector error after the unreflected record was stored."""

    def __init__(self, cause: Exception):
        super().__init__(str(cause))
        self.cause = cause


class CompletionAgent:
    """
    Runs the completion loop for one task at a time.

    Each iteration retrieves snippets (plain target on iteration 0, feedback
    target afterwards), asks the actor for the next line, scores it against
    the ground truth, and asks the reflector for feedback that steers the
    next retrieval. The loop stops on an exact match, after no_imp_thres
    iterations without an ES gain of at least es_epsilon, or at max_iter.

    Tasks share nothing but the index and the gateways, so one agent may
    serve several worker threads.
    """

    def __init__(self, gateways: Gateways, config: Optional[LoopConfig] = None):
        """
        Initialize the agent.

        Args:
            gateways: Actor and reflector gateways
            config: Loop configuration (defaults when omitted)
        """
        self.gateways = gateways
        self.config = config or LoopConfig()
        self.actor_params = ActorParams(
            max_new_tokens=self.config.actor_max_new_tokens,
            temperature=self.config.temperature,
        )

    def _target(self, task: CompletionTask, iteration: int, experience: ExperienceCache):
        cfg = self.config
        if cfg.mode == "no_retrieval":
            return RetrievalTarget()
        if iteration == 0 or cfg.single_pass:
            return build_initial_target(task.prefix, cfg.n)
        suggestions = experience.latest_suggestions(task.task_id)
        return build_feedback_target(suggestions, task.prefix, cfg.n, cfg.effective_x_cap)

    def _reflect(self, task: CompletionTask, prompt: str, line: str, em: int, es: float) -> Feedback:
        cfg = self.config
        reflection_prompt = assemble_reflection_prompt(
            prompt, line, em, es, scores_visible=cfg.evaluator_enabled
        )
        raw = reflect(
            self.gateways.reflector,
            reflection_prompt,
            max_new_tokens=cfg.reflector_max_new_tokens,
            temperature=cfg.temperature,
            task_id=task.task_id,
        )
        return parse_feedback(raw, x_cap=cfg.effective_x_cap)

    def run_task(
        self,
        task: CompletionTask,
        index: CorpusIndex,
        experience: Optional[ExperienceCache] = None,
        on_iteration: Optional[IterationCallback] = None,
    ) -> LoopResult:
        """
        Run the loop for one task.

        Args:
            task: Completion task
            index: Index of the task's repository, built without the target file's suffix
            experience: Cache (and run log) for this run; a private one is used when omitted
            on_iteration: Called after each stored record

        Returns:
            LoopResult; backend failures yield stop_reason 'backend_error'
        """
        cfg = self.config
        experience = experience if experience is not None else ExperienceCache()
        experience.start_task(task)

        state = LoopState()
        stop_reason = "max_iter"
        error: Optional[str] = None

        try:
            for iteration in range(cfg.max_iter):
                target = self._target(task, iteration, experience)
                snippets = [] if cfg.mode == "no_retrieval" else retrieve(index, target, cfg.k)
                trace = [s.trace_entry() for s in snippets]
                log_retrieval(task.task_id, iteration, target.lines, trace)

                prompt = assemble_completion_prompt(
                    snippets,
                    task.prefix,
                    budget=cfg.prompt_budget,
                    prefix_tail_len=cfg.prefix_tail_len,
                    snippet_order=cfg.snippet_order,
                )
                raw = generate_completion(self.gateways.actor, prompt, self.actor_params, task_id=task.task_id)
                line = postprocess_line(raw)
                scores = evaluate(line, task.ground_truth)
                log_iteration(task.task_id, iteration, scores.em, scores.es, line)

                stop: Optional[str] = None
                if cfg.evaluator_enabled:
                    if scores.em == 1:
                        stop = "exact_match"
                    else:
                        if scores.es - state.best_es < cfg.es_epsilon:
                            state = state.model_copy(update={"no_imp_cnt": state.no_imp_cnt + 1})
                        else:
                            state = LoopState(no_imp_cnt=0, best_em=scores.em, best_es=scores.es)
                        if state.no_imp_cnt >= cfg.no_imp_thres:
                            stop = "stagnation"
                if stop is None and cfg.single_pass:
                    stop = "max_iter"

                def store(feedback: Optional[Feedback]) -> None:
                    rec = IterationRecord(
                        iteration=iteration,
                        prompt_rendered=prompt.rendered,
                        generated_line=line,
                        em=scores.em,
                        es=scores.es,
                        feedback=feedback,
                        retrieval_trace=trace,
                        target_lines=target.lines,
                        raw_generation=raw,
                    )
                    experience.record(task.task_id, rec, state)
                    if on_iteration is not None:
                        on_iteration(rec, state)

                if stop is not None:
                    store(None)
                    stop_reason = stop
                    break

                try:
                    feedback = self._reflect(task, prompt.rendered, line, scores.em, scores.es)
                except (BackendUnavailable, ScriptExhausted) as e:
                    store(None)
                    raise _ReflectionFailed(e)
                store(feedback)
        except _ReflectionFailed as e:
            stop_reason, error = "backend_error", str(e.cause)
            log_error("BackendUnavailable", error, task_id=task.task_id)
        except (BackendUnavailable, ScriptExhausted) as e:
            stop_reason, error = "backend_error", str(e)
            log_error(type(e).__name__, error, task_id=task.task_id)

        result = self._result(task, experience, stop_reason, error)
        experience.finish_task(result)
        log_task_result(
            task.task_id, result.stop_reason, result.iterations_run, result.final_record.em, result.final_record.es
        )
        return result

    def _result(self, task: CompletionTask, experience: ExperienceCache, stop_reason: str,
                error: Optional[str]) -> LoopResult:
        records: List[IterationRecord] = experience.records(task.task_id)
        if not records:
            return LoopResult(
                task_id=task.task_id,
                repo_name=task.repo_name,
                final_record=IterationRecord.empty(),
                stop_reason=stop_reason,
                iterations_run=0,
                error=error,
            )
        best = experience.best(task.task_id)
        last = records[-1]
        if stop_reason == "backend_error" and self.config.evaluator_enabled:
            final = best
        else:
            final = best if self.config.effective_final == "best" else last
        if best.iteration != last.iteration:
            logger.debug(
                f"Task {task.task_id}: best iteration {best.iteration} (ES {best.es:.4f}), "
                f"last iteration {last.iteration} (ES {last.es:.4f})",
                extra={"task_id": task.task_id},
            )
        return LoopResult(
            task_id=task.task_id,
            repo_name=task.repo_name,
            final_record=final,
            stop_reason=stop_reason,
            iterations_run=len(records),
            best_iteration=best.iteration,
            last_iteration=last.iteration,
            error=error,
        )


def run_task(
    task: CompletionTask,
    index: CorpusIndex,
    gateways: Gateways,
    config: Optional[LoopConfig] = None,
    experience: Optional[ExperienceCache] = None,
) -> LoopResult:
    """Run one task with a throwaway agent."""
    return CompletionAgent(gateways, config).run_task(task, index, experience=experience)
