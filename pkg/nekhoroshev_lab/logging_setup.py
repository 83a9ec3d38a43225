"""
Logging Setup
Single loguru configuration shared by the engines and the command line
"""

import os
import sys
from pathlib import Path
from typing import Optional

from loguru import logger

LOG_FORMAT = "{time:YYYY-MM-DD HH:mm:ss} | {level} | {extra[component]} | {message}"

logger.configure(extra={'component': 'nekhoroshev_lab'})


def configure_logging(level: Optional[str] = None, log_file: Optional[Path] = None) -> None:
    """Install the stderr sink (and optionally a run-log file sink)"""
    level = (level or os.getenv("NEKHOROSHEV_LOG_LEVEL", "INFO")).upper()
    logger.remove()
    logger.add(sys.stderr, level=level, format=LOG_FORMAT)
    if log_file is not None:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        logger.add(str(log_file), level="DEBUG", format=LOG_FORMAT, mode="w")


def get_logger(component: str):
    return logger.bind(component=component)
