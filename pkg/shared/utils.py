"""
Shared utility functions for the Cox lasso certification harness.
"""

import logging
import os
import sys
from typing import Optional

import numpy as np


def setup_logging(name: str, level: Optional[int] = None) -> logging.Logger:
    """
    Set up logging with consistent formatting.

    Args:
        name: Logger name (typically __name__)
        level: Logging level (default: COXLASSO_LOG_LEVEL or INFO)

    Returns:
        Configured logger instance
    """
    if level is None:
        level_name = os.environ.get("COXLASSO_LOG_LEVEL", "INFO").upper()
        level = getattr(logging, level_name, logging.INFO)

    logger = logging.getLogger(name)
    logger.setLevel(level)

    # Only add handler if none exists
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stdout)
        handler.setLevel(logging.DEBUG)

        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    return logger


def set_log_level(level_name: str) -> None:
    """Apply a level to every logger created through setup_logging."""
    level = getattr(logging, level_name.upper(), None)
    if not isinstance(level, int):
        raise ValueError(f"Unknown log level: {level_name}")
    for name in list(logging.root.manager.loggerDict):
        if name.startswith(("coxlasso", "shared")):
            logging.getLogger(name).setLevel(level)


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """
    Get a numpy generator for one named stream of a top-level seed.

    Streams are spawned through SeedSequence entropy, so (seed, 3, 17) always
    yields the same draws whichever thread or process asks for it.

    Args:
        seed: Top-level 64-bit seed
        stream: Integers identifying the stream (check id, replication, ...)

    Returns:
        numpy Generator instance
    """
    if seed < 0 or seed >= 2 ** 64:
        raise ValueError(f"Seed must be an unsigned 64-bit integer, got {seed}")
    for s in stream:
        if s < 0:
            raise ValueError(f"Stream ids must be nonnegative, got {stream}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))
