from pathlib import Path

from pydantic_settings import BaseSettings

from weakalign_det.__version__ import __version__

APP_VERSION = __version__

PACKAGE_DIR = Path(__file__).resolve().parent.parent


class Settings(BaseSettings):
    workers: int = 1
    torch_threads: int = 1
    ledger_url: str = "sqlite:///weakalign_runs.sqlite"
    log_level: str = "INFO"
    config_dir: Path | None = None

    model_config = {
        "env_prefix": "WEAKALIGN_",
        "env_file": ".env",
        "extra": "ignore"  # Ignore extra environment variables
    }

    @property
    def resolved_config_dir(self) -> Path:
        return self.config_dir or PACKAGE_DIR / "config"


settings = Settings()
