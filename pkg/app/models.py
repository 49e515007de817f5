"""Shared domain models for the retrieval-generation-reflection pipeline."""

from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


LoopMode = Literal["full", "no_reflect_no_experience", "no_evaluator", "no_retrieval"]
StopReason = Literal["exact_match", "stagnation", "max_iter", "backend_error", "task_error"]
BackendKind = Literal["http_chat", "ollama", "scripted", "oracle"]
RoleTag = Literal["actor", "reflector"]


class SourceFile(BaseModel):
    """A repository file as ordered, newline-stripped lines."""

    model_config = ConfigDict(frozen=True)

    path: str
    lines: List[str]


class Chunk(BaseModel):
    """A contiguous window of source lines; the unit of retrieval."""

    model_config = ConfigDict(frozen=True)

    file_path: str
    start_line: int
    end_line: int
    text: str
    token_set: frozenset[str]

    @property
    def line_count(self) -> int:
        return self.end_line - self.start_line + 1


class IndexParams(BaseModel):
    """Chunk geometry: window length and stride, both in lines."""

    model_config = ConfigDict(frozen=True)

    window_size: int = 20
    stride: int = 10

    @model_validator(mode="after")
    def _check_geometry(self) -> "IndexParams":
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if not 1 <= self.stride <= self.window_size:
            raise ValueError("stride must satisfy 1 <= stride <= window_size")
        return self


class CompletionTask(BaseModel):
    """One benchmark sample: the code before a line and the hidden line itself."""

    model_config = ConfigDict(frozen=True)

    task_id: str
    repo_name: str
    file_path: str
    line_no: int = Field(ge=1)
    prefix: List[str]
    ground_truth: str
    created_meta: Dict[str, object] = Field(default_factory=dict)

    @field_validator("ground_truth")
    @classmethod
    def _not_blank_or_comment(cls, value: str) -> str:
        stripped = value.strip()
        if not stripped:
            raise ValueError("ground_truth must not be blank")
        if stripped.startswith("#"):
            raise ValueError("ground_truth must not be a comment-only line")
        return value


class Feedback(BaseModel):
    """Structured reflector reply."""

    evaluation_analysis: str = ""
    contextual_analysis: str = ""
    suggestions: List[str] = Field(default_factory=list)
    raw: str = ""


class TraceEntry(BaseModel):
    """One retrieved chunk as recorded in the run log."""

    file_path: str
    start_line: int
    end_line: int
    score: float


class IterationRecord(BaseModel):
    """One pass of the loop: prompt, prediction, scores and reflector feedback."""

    model_config = ConfigDict(frozen=True)

    iteration: int = Field(ge=0)
    prompt_rendered: str
    generated_line: str
    em: int
    es: float
    feedback: Optional[Feedback] = None
    retrieval_trace: List[TraceEntry] = Field(default_factory=list)
    target_lines: List[str] = Field(default_factory=list)
    raw_generation: str = ""

    @classmethod
    def empty(cls) -> "IterationRecord":
        """Placeholder used when a task fails before its first generation."""
        return cls(iteration=0, prompt_rendered="", generated_line="", em=0, es=0.0)


class LoopConfig(BaseModel):
    """Loop constants plus retrieval, prompt, decoding and ablation parameters."""

    model_config = ConfigDict(frozen=True)

    max_iter: int = 10
    no_imp_thres: int = 3
    es_epsilon: float = 0.01
    n: int = 10
    k: int = 10
    x_cap: Optional[int] = None
    mode: LoopMode = "full"
    final: Literal["best", "last"] = "best"
    blind: bool = False
    prompt_budget: int = 6000
    prefix_tail_len: int = 30
    snippet_order: Literal["desc", "asc"] = "desc"
    actor_max_new_tokens: int = 128
    reflector_max_new_tokens: int = 512
    temperature: float = 0.0

    @model_validator(mode="after")
    def _check_ranges(self) -> "LoopConfig":
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.no_imp_thres < 1:
            raise ValueError("no_imp_thres must be >= 1")
        if not 0.0 < self.es_epsilon < 1.0:
            raise ValueError("es_epsilon must be in (0, 1)")
        if self.n < 1 or self.k < 1:
            raise ValueError("n and k must be >= 1")
        if self.x_cap is not None and not 0 <= self.x_cap <= self.n:
            raise ValueError("x_cap must satisfy 0 <= x_cap <= n")
        if self.prompt_budget <= 0 or self.prefix_tail_len < 1:
            raise ValueError("prompt_budget must be > 0 and prefix_tail_len >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        return self

    @property
    def effective_x_cap(self) -> int:
        return self.n // 2 if self.x_cap is None else self.x_cap

    @property
    def single_pass(self) -> bool:
        return self.mode in ("no_reflect_no_experience", "no_retrieval")

    @property
    def evaluator_enabled(self) -> bool:
        return self.mode != "no_evaluator" and not self.blind

    @property
    def effective_final(self) -> str:
        return self.final if self.evaluator_enabled else "last"


class BackendConfig(BaseModel):
    """How to reach one text-generation backend. Never holds secrets."""

    model_config = ConfigDict(frozen=True)

    kind: BackendKind = "scripted"
    endpoint_url: Optional[str] = None
    model_name: Optional[str] = None
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    retry_backoff: float = 1.0
    max_concurrent: int = 4
    script_path: Optional[str] = None
    sentinel: str = "__ORACLE_SENTINEL__"
    system_prompt: Optional[str] = None

    @model_validator(mode="after")
    def _check_remote(self) -> "BackendConfig":
        if self.kind in ("http_chat", "ollama") and not (self.endpoint_url and self.model_name):
            raise ValueError(f"{self.kind} backend requires endpoint_url and model_name")
        if self.max_retries < 0 or self.retry_backoff < 0 or self.timeout <= 0:
            raise ValueError("max_retries/retry_backoff must be >= 0 and timeout > 0")
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")
        return self

    def backoff_schedule(self) -> List[float]:
        """Delays slept between attempts: retry_backoff, 2x, 4x, ..."""
        return [self.retry_backoff * (2 ** i) for i in range(self.max_retries)]


class LoopResult(BaseModel):
    """Outcome of one task's loop."""

    task_id: str
    repo_name: str = ""
    final_record: IterationRecord
    stop_reason: StopReason
    iterations_run: int
    best_iteration: Optional[int] = None
    last_iteration: Optional[int] = None
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.stop_reason in ("backend_error", "task_error")


class RunManifest(BaseModel):
    """Everything needed to re-execute a run; written before any backend call."""

    model_config = ConfigDict(frozen=True)

    run_id: str
    tool_version: str
    loop_config: LoopConfig
    actor_backend: BackendConfig
    reflector_backend: BackendConfig
    index_params: IndexParams
    tasks_path: str
    repos_dir: str
    template_versions: Dict[str, str]
    normalization: str = "strip"
    started_at: str
