"""
Utility functions for hrpose.

This module contains logging setup, seeded random sub-streams and other
utility functions used throughout the toolkit.
"""

import json
import logging
import sys
from pathlib import Path
from typing import Dict, Iterable, Optional

import numpy as np

from .config import LOG_LEVEL, LOG_FORMAT

# Attributes every LogRecord carries; anything else was passed via `extra=`
_RESERVED_RECORD_KEYS = set(vars(logging.LogRecord('', 0, '', 0, '', None, None))) | {'message', 'asctime'}

RNG_STREAMS = ('init', 'augmentation', 'data_order')


class JsonLinesFormatter(logging.Formatter):
    """Format each record as one JSON object per line."""

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            'time': self.formatTime(record),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
        }
        for key, value in vars(record).items():
            if key not in _RESERVED_RECORD_KEYS:
                payload[key] = value
        if record.exc_info:
            payload['exception'] = self.formatException(record.exc_info)
        return json.dumps(payload, default=str)


def setup_logging(
    level: Optional[str] = None,
    log_file: Optional[Path] = None,
    json_lines: bool = False
) -> logging.Logger:
    """
    Set up logging configuration for the hrpose package.

    Args:
        level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: Optional path to log file
        json_lines: Emit one JSON object per line instead of plain text

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger('hrpose')
    logger.setLevel(level or LOG_LEVEL)

    # Clear any existing handlers
    logger.handlers.clear()

    formatter = JsonLinesFormatter() if json_lines else logging.Formatter(LOG_FORMAT)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(level or logging.INFO)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger


def ensure_directories(*extra: Path) -> None:
    """
    Ensure all required output directories exist.
    """
    from .config import OUTPUT_DIR, CHECKPOINT_DIR, RESULTS_DIR, REPORTS_DIR

    for directory in [OUTPUT_DIR, CHECKPOINT_DIR, RESULTS_DIR, REPORTS_DIR, *extra]:
        Path(directory).mkdir(parents=True, exist_ok=True)


def spawn_streams(seed: int, names: Iterable[str] = RNG_STREAMS) -> Dict[str, np.random.Generator]:
    """
    Derive independent named random generators from one seed.

    The stream for a name depends only on the seed and the name's position in
    `names`, so adding a consumer of one stream never perturbs another.

    Args:
        seed: Root seed of the run
        names: Stream names in a fixed order

    Returns:
        Mapping of stream name to generator
    """
    names = list(names)
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def format_size(size) -> str:
    """Render a (height, width) pair in the HxW convention."""
    return f"{int(size[0])}x{int(size[1])}"
