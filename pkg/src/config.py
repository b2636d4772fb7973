from pydantic_settings import BaseSettings, SettingsConfigDict
import os
from dotenv import load_dotenv

# Load environment variables from .env file if it exists
if os.path.exists(".env"):
    load_dotenv()


class Settings(BaseSettings):
    """Workbench settings."""

    model_config = SettingsConfigDict(
        env_file=".env", env_file_encoding="utf-8", extra="ignore"
    )

    # Application
    ENVIRONMENT: str = "development"
    LOG_LEVEL: str = "INFO"

    # Evaluation
    RELIEF_SWARM_THREADS: int = 1

    # Files
    SCHEMA_VERSION: int = 1

    def is_test_environment(self) -> bool:
        """Check if we're in the test environment."""
        return self.ENVIRONMENT.lower() == "test"

    def evaluation_threads(self) -> int:
        """Worker count for evaluation episodes, never below one."""
        return max(1, self.RELIEF_SWARM_THREADS)


# Create a single instance of settings
settings = Settings()
