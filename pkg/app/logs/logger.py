import logging
import sys
from typing import Any, Dict, Optional

from app.config import LOG_LEVEL

_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"

events = logging.getLogger("vlm.events")


def configure_logging(level: Optional[str] = None) -> None:
    """Route every `vlm.*` logger to stderr with one format."""
    root = logging.getLogger("vlm")
    root.setLevel((level or LOG_LEVEL).upper())
    if not any(getattr(h, "_vlm_handler", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(_FORMAT))
        handler._vlm_handler = True  # type: ignore[attr-defined]
        root.addHandler(handler)


def log_event(
    action: str,
    details: Dict[str, Any],
    logger: logging.Logger = events,
    level: int = logging.INFO,
) -> None:
    """One structured line per artifact written or input skipped."""
    fields = " ".join(f"{k}={v}" for k, v in details.items())
    logger.log(level, "[%s] %s", action, fields)
