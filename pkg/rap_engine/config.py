"""
rap-engine Configuration
Process-wide settings with environment variable support
"""

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Application settings, overridable via RAP_* environment variables."""

    model_config = SettingsConfigDict(env_prefix="RAP_", env_file=".env", case_sensitive=True, extra="ignore")

    # Application
    APP_NAME: str = "rap-engine"
    APP_VERSION: str = "1.0.0"

    # Logging
    LOG_LEVEL: str = Field(default="INFO")
    LOG_FORMAT: str = Field(default="text")  # json or text

    # Evaluation
    # Upper bound on the number of consistent queries held in one answer buffer
    BATCH_CAP: int = Field(default=2**20, ge=1)

    # Experiments
    RESULTS_DIR: str = Field(default="results")
    DEFAULT_TRIALS: int = Field(default=5, ge=1)
    DEFAULT_N_PRIME: int = Field(default=1000, ge=1)


# Global settings instance
settings = Settings()


def get_settings() -> Settings:
    """Get application settings."""
    return settings
