"""
TriDomain Retrieval Configuration Management
Handles runtime settings using Pydantic Settings
"""

from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import Field, field_validator, model_validator
from typing import Optional


class Settings(BaseSettings):
    """Runtime settings with validation"""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
        validate_default=True
    )

    # Environment
    environment: str = Field(default="development", pattern="^(development|production|test)$")
    log_level: str = Field(default="INFO", pattern="^(DEBUG|INFO|WARNING|ERROR|CRITICAL)$")

    # Remote LLM summarizer (HTTP JSON: {prompt, max_tokens} -> {completion})
    llm_endpoint_url: Optional[str] = Field(default=None)
    llm_api_key: Optional[str] = Field(default=None)
    llm_model: str = Field(default="chat-13b")
    llm_max_tokens: int = Field(default=256, ge=16, le=4096)
    llm_timeout: float = Field(default=60.0, gt=0.0, le=300.0)
    llm_max_retries: int = Field(default=3, ge=1, le=10)
    llm_backoff_min: float = Field(default=1.0, ge=0.0, le=60.0)
    llm_backoff_max: float = Field(default=10.0, ge=0.0, le=120.0)
    llm_max_concurrency: int = Field(default=4, ge=1, le=64)

    # Summarization
    summarizer_keywords: int = Field(default=5, ge=1, le=50)

    # Evaluation
    similarity_block_size: int = Field(default=1024, ge=1, le=1_000_000)
    distance_pair_cap: int = Field(default=1_000_000, ge=1)
    distance_seed: int = Field(default=0)

    # Workers
    worker_concurrency: int = Field(default=4, ge=1, le=64)

    # Testing
    pytest_markers: str = Field(default="integration,performance")

    @field_validator("llm_endpoint_url")
    @classmethod
    def validate_endpoint(cls, v: Optional[str]) -> Optional[str]:
        """Endpoint must be an http(s) URL when provided"""
        if v is not None and not v.startswith(("http://", "https://")):
            raise ValueError("llm_endpoint_url must start with http:// or https://")
        return v

    @model_validator(mode="after")
    def validate_llm_config(self) -> "Settings":
        """Validate LLM configuration after all fields are set"""
        # Development and test runs use the mock summarizer
        if self.environment == "production" and not self.llm_endpoint_url:
            raise ValueError("LLM_ENDPOINT_URL required in production")
        if self.llm_backoff_max < self.llm_backoff_min:
            raise ValueError("llm_backoff_max must be >= llm_backoff_min")
        return self

    @property
    def is_production(self) -> bool:
        """Check if running in production"""
        return self.environment == "production"

    @property
    def is_test(self) -> bool:
        """Check if running in test"""
        return self.environment == "test"

    @property
    def llm_configured(self) -> bool:
        """Check if a remote LLM endpoint is available"""
        return self.llm_endpoint_url is not None


# Global settings instance
settings = Settings()
