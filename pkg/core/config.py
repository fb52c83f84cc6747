"""Environment settings for runs; per-run training options live in runconfig."""
import os
from dataclasses import dataclass

from dotenv import load_dotenv

load_dotenv()

_OPENERS = ("${{", "${", "{{")
_CLOSERS = ("}}", "}")


def looks_like_placeholder(raw: str | None) -> bool:
    """True for unset, blank or templated values such as ``${AMFM_SEED}``."""
    value = (raw or "").strip()
    if not value:
        return True
    return value.startswith(_OPENERS) and value.endswith(_CLOSERS)


def _coalesce_env(name: str, default: str | None) -> str | None:
    """Return a usable environment value, falling back when unset or templated.

    Deployment templates sometimes export variables such as ``${AMFM_SEED}``
    verbatim when no value was provided. Those strings count as missing.
    """
    value = os.getenv(name)
    if looks_like_placeholder(value):
        return default
    return value.strip()


def _env_int(name: str) -> int | None:
    raw = _coalesce_env(name, None)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        return None


@dataclass(slots=True)
class Settings:
    seed_override: int | None = _env_int("AMFM_SEED")
    log_level: str = _coalesce_env("AMFM_LOG_LEVEL", "INFO")
    runs_dir: str = _coalesce_env("AMFM_RUNS_DIR", "runs")


settings = Settings()
