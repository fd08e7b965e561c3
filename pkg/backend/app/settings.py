"""
Runtime settings and logging setup
Process-level knobs come from the environment (or a .env file at the project root);
experiment parameters live in the JSON experiment config instead.
"""
import logging
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from pydantic_settings import BaseSettings, SettingsConfigDict

logger = logging.getLogger(__name__)

# Load from project root
ENV_PATH = Path(__file__).parent.parent.parent / '.env'
if ENV_PATH.exists():
    load_dotenv(ENV_PATH)

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


class RuntimeSettings(BaseSettings):
    """Environment-driven settings (prefix LATENT_LAB_)"""

    model_config = SettingsConfigDict(env_prefix="LATENT_LAB_", extra="ignore")

    log_level: str = "INFO"
    log_file: Optional[str] = None
    torch_threads: int = 1
    progress_bars: bool = False
    eval_workers: int = 1


_settings_instance: Optional[RuntimeSettings] = None


def get_settings() -> RuntimeSettings:
    """Get or create the global runtime settings"""
    global _settings_instance
    if _settings_instance is None:
        _settings_instance = RuntimeSettings()
    return _settings_instance


def configure_logging(settings: Optional[RuntimeSettings] = None) -> None:
    """Install the stream (and optional file) handlers used by the CLI"""
    settings = settings or get_settings()
    handlers: list = [logging.StreamHandler()]
    if settings.log_file:
        handlers.append(logging.FileHandler(settings.log_file, encoding='utf-8'))
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


_warned: set = set()


def warn_once(log: logging.Logger, key: str, message: str) -> None:
    """Log a warning the first time a given key is seen in this process"""
    if key in _warned:
        return
    _warned.add(key)
    log.warning(message)
