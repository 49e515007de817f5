"""Configuration management using pydantic-settings."""

from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import dotenv_values
from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app.models import BackendConfig, IndexParams, LoopConfig
from app.utils.exceptions import ConfigError


class Settings(BaseSettings):
    """Pipeline settings loaded from environment variables, .env and run config files."""

    model_config = SettingsConfigDict(
        env_file=".env",
        case_sensitive=False,
        populate_by_name=True,
        extra="ignore",
    )

    # Loop
    max_iter: int = Field(default=10, alias="MAX_ITER")
    no_imp_thres: int = Field(default=3, alias="NO_IMP_THRES")
    es_epsilon: float = Field(default=0.01, alias="ES_EPSILON")
    mode: str = Field(default="full", alias="MODE")
    final: str = Field(default="best", alias="FINAL")
    blind: bool = Field(default=False, alias="BLIND")

    # Retrieval
    target_lines: int = Field(default=10, alias="TARGET_LINES")
    top_k: int = Field(default=10, alias="TOP_K")
    x_cap: Optional[int] = Field(default=None, alias="X_CAP")
    window_size: int = Field(default=20, alias="WINDOW_SIZE")
    stride: int = Field(default=10, alias="STRIDE")

    # Prompt
    prompt_budget: int = Field(default=6000, alias="PROMPT_BUDGET")
    prefix_tail_len: int = Field(default=30, alias="PREFIX_TAIL_LEN")
    snippet_order: str = Field(default="desc", alias="SNIPPET_ORDER")

    # Decoding
    temperature: float = Field(default=0.0, alias="TEMPERATURE")
    actor_max_new_tokens: int = Field(default=128, alias="ACTOR_MAX_NEW_TOKENS")
    reflector_max_new_tokens: int = Field(default=512, alias="REFLECTOR_MAX_NEW_TOKENS")

    # Backends
    actor_backend: str = Field(default="scripted", alias="ACTOR_BACKEND")
    actor_endpoint_url: Optional[str] = Field(default=None, alias="ACTOR_ENDPOINT_URL")
    actor_model_name: Optional[str] = Field(default=None, alias="ACTOR_MODEL_NAME")
    actor_script_path: Optional[str] = Field(default=None, alias="ACTOR_SCRIPT_PATH")
    actor_system_prompt: Optional[str] = Field(default=None, alias="ACTOR_SYSTEM_PROMPT")
    reflector_backend: str = Field(default="scripted", alias="REFLECTOR_BACKEND")
    reflector_endpoint_url: Optional[str] = Field(default=None, alias="REFLECTOR_ENDPOINT_URL")
    reflector_model_name: Optional[str] = Field(default=None, alias="REFLECTOR_MODEL_NAME")
    reflector_script_path: Optional[str] = Field(default=None, alias="REFLECTOR_SCRIPT_PATH")
    reflector_system_prompt: Optional[str] = Field(default=None, alias="REFLECTOR_SYSTEM_PROMPT")
    api_key_env: str = Field(default="OPENAI_API_KEY", alias="API_KEY_ENV")
    request_timeout: float = Field(default=60.0, alias="REQUEST_TIMEOUT")
    max_retries: int = Field(default=3, alias="MAX_RETRIES")
    retry_backoff: float = Field(default=1.0, alias="RETRY_BACKOFF")
    max_concurrent_requests: int = Field(default=4, alias="MAX_CONCURRENT_REQUESTS")
    oracle_sentinel: str = Field(default="__ORACLE_SENTINEL__", alias="ORACLE_SENTINEL")

    # App
    app_name: str = Field(default="repogen-reflex", alias="APP_NAME")
    log_level: str = Field(default="INFO", alias="LOG_LEVEL")
    log_dir: str = Field(default="logs", alias="LOG_DIR")

    def loop_config(self) -> LoopConfig:
        """Build the typed loop configuration."""
        try:
            return LoopConfig(
                max_iter=self.max_iter,
                no_imp_thres=self.no_imp_thres,
                es_epsilon=self.es_epsilon,
                n=self.target_lines,
                k=self.top_k,
                x_cap=self.x_cap,
                mode=self.mode,
                final=self.final,
                blind=self.blind,
                prompt_budget=self.prompt_budget,
                prefix_tail_len=self.prefix_tail_len,
                snippet_order=self.snippet_order,
                actor_max_new_tokens=self.actor_max_new_tokens,
                reflector_max_new_tokens=self.reflector_max_new_tokens,
                temperature=self.temperature,
            )
        except ValidationError as e:
            raise ConfigError(f"Invalid loop configuration: {e}") from e

    def index_params(self) -> IndexParams:
        """Build the chunk geometry."""
        try:
            return IndexParams(window_size=self.window_size, stride=self.stride)
        except ValidationError as e:
            raise ConfigError(f"Invalid index parameters: {e}") from e

    def backend_config(self, role: str) -> BackendConfig:
        """
        Build the backend configuration for one role.

        Args:
            role: 'actor' or 'reflector'

        Returns:
            BackendConfig for that role
        """
        if role not in ("actor", "reflector"):
            raise ConfigError(f"Unknown backend role: {role}")
        try:
            return BackendConfig(
                kind=getattr(self, f"{role}_backend"),
                endpoint_url=getattr(self, f"{role}_endpoint_url"),
                model_name=getattr(self, f"{role}_model_name"),
                script_path=getattr(self, f"{role}_script_path"),
                system_prompt=getattr(self, f"{role}_system_prompt"),
                api_key_env=self.api_key_env,
                timeout=self.request_timeout,
                max_retries=self.max_retries,
                retry_backoff=self.retry_backoff,
                max_concurrent=self.max_concurrent_requests,
                sentinel=self.oracle_sentinel,
            )
        except ValidationError as e:
            raise ConfigError(f"Invalid {role} backend configuration: {e}") from e


def load_settings(config_file: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> Settings:
    """
    Layer defaults < environment < config file < explicit overrides.

    Args:
        config_file: Optional key=value run config (dotenv syntax)
        overrides: Values from CLI flags; None entries are ignored

    Returns:
        Settings instance
    """
    values: Dict[str, Any] = {}
    if config_file:
        path = Path(config_file)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {config_file}")
        values.update({k.upper(): v for k, v in dotenv_values(path).items() if v is not None})
    if overrides:
        values.update({k.upper(): v for k, v in overrides.items() if v is not None})
    try:
        return Settings(**values)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def _bootstrap_settings() -> Settings:
    """Import-time settings; invalid values are reported later by load_settings."""
    try:
        return Settings()
    except ValidationError:
        return Settings.model_construct()


# Global settings instance
settings = _bootstrap_settings()
