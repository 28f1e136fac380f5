"""
Environment configuration for the FlowSeed planner.
"""
from pathlib import Path
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Run-level configuration."""

    # Data paths
    DATA_DIR: Path = Path("./data")

    # Execution
    MAX_WORKERS: int = 4
    SEED: int = 0

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_TO_CONSOLE: bool = True

    # Dataset generation
    EXPERT_ATTEMPTS: int = 8

    # Feasibility
    GOAL_TOL: float = 0.1
    COLLISION_SUBSTEPS: int = 4

    # Initializer / benchmark
    N_SEEDS: int = 10

    # Training
    TRAIN_STEPS: int = 20000
    BATCH_SIZE: int = 64
    LEARNING_RATE: float = 3e-4
    WARMUP_FRACTION: float = 0.1
    CHECKPOINT_EVERY: int = 2000
    LOG_EVERY: int = 100

    class Config:
        env_file = ".env"
        env_file_encoding = "utf-8"
        case_sensitive = True


# Global settings instance
settings = Settings()


def get_settings() -> Settings:
    """Get application settings."""
    return settings
