#!/usr/bin/env python3
"""
Logging setup
Library modules log through loguru with a bound `source`; this installs the sinks.
"""

import sys
from pathlib import Path
from typing import Optional, Union

from loguru import logger

LOG_FORMAT = (
    "<green>{time:HH:mm:ss}</green> | <level>{level: <7}</level> | "
    "<cyan>{extra[source]}</cyan> - {message}"
)


def configure_logging(level: str = "INFO", log_file: Optional[Union[str, Path]] = None) -> None:
    """Replace loguru's default sink with a stderr sink (and optional file sink)"""
    logger.remove()
    logger.configure(extra={"source": "stereoseg"})
    logger.add(sys.stderr, level=level.upper(), format=LOG_FORMAT)
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        logger.add(str(log_file), level="DEBUG", format=LOG_FORMAT, enqueue=False)
