"""General utilities for logging and safe file output."""
from __future__ import annotations

import logging
import os
import tempfile
from pathlib import Path

from core.config import settings
from core.errors import ValidationError


logging.basicConfig(
    level=getattr(logging, settings.log_level.upper(), logging.INFO),
    format="%(asctime)s [%(levelname)s] %(name)s - %(message)s",
)
logger = logging.getLogger("amfm-asc")


def guard_overwrite(path: str | Path, force: bool) -> Path:
    """Refuse to clobber an existing file unless ``force`` is set."""
    target = Path(path)
    if target.exists() and not force:
        raise ValidationError(f"{target} already exists; pass --force to overwrite")
    target.parent.mkdir(parents=True, exist_ok=True)
    return target


def atomic_write_bytes(path: str | Path, payload: bytes) -> Path:
    """Write through a temp file in the same directory, then rename into place."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, target)
        return target
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def atomic_write_text(path: str | Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))
