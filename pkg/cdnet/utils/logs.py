import logging
import os
from pathlib import Path
from typing import Optional

LOG_FORMAT = '%(asctime)s %(levelname)s [%(name)s] %(message)s'


def validate_log_path(log_path: str) -> bool:
    """
    Validate that the given log path is valid and writable.

    Args:
        log_path: The path to validate

    Returns:
        bool: True if the path is valid and writable, False otherwise
    """
    try:
        path = Path(log_path)
        path.parent.mkdir(parents=True, exist_ok=True)

        if not path.exists():
            path.touch()
        elif not os.access(path, os.W_OK):
            return False

        return True
    except (OSError, PermissionError):
        return False


def setup_logging(level: str = 'INFO', log_path: Optional[str] = None) -> None:
    """Configure the root logger for a cdnet process"""
    handlers = [logging.StreamHandler()]
    log_path_ok = bool(log_path) and validate_log_path(log_path)
    if log_path_ok:
        handlers.append(logging.FileHandler(log_path))

    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT,
                        handlers=handlers, force=True)

    if log_path and not log_path_ok:
        logging.getLogger(__name__).warning(f"Log file not writable, ignoring: {log_path}")
