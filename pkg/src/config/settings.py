from pydantic_settings import BaseSettings, SettingsConfigDict
from logging import Logger, basicConfig, getLogger, INFO
from functools import lru_cache
from dotenv import load_dotenv
from pathlib import Path

load_dotenv()

basicConfig(
    level=INFO, format="%(asctime)s - %(levelname)s - %(funcName)s - %(message)s"
)
logger: Logger = getLogger(__name__)

TOOL_VERSION = "0.1.0"
PATH_ROOT: Path = Path(__file__).resolve().parents[2]
DEFAULT_ENCODING = "utf-8"
MANIFEST_NAME = "manifest.cfg"
SUMMARY_NAME = "summary.txt"
CHECKPOINT_NAME = "model.ckpt"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class LabSettings(BaseSettings):
    """Environment-level settings, read from MOVELAB_* variables and .env."""

    model_config = SettingsConfigDict(
        env_prefix="MOVELAB_", env_file=".env", extra="ignore"
    )

    output_dir: Path = Path("runs")
    configs_dir: Path = Path("configs")
    ledger_db: Path = Path("runs/ledger.sqlite")
    log_level: str = "INFO"
    default_seed: int = 0


@lru_cache(maxsize=1)
def get_settings() -> LabSettings:
    settings = LabSettings()
    logger.debug(f"Settings resolved: {settings.model_dump()}")
    return settings
