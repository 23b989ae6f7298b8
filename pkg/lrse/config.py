"""Environment-driven settings and logging setup."""

import logging
import os

# Worker threads for per-clip calibration forwards
THREADS = int(os.environ.get("LRSE_THREADS", "1"))

LOG_LEVEL = os.environ.get("LRSE_LOG_LEVEL", "INFO")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(level=None):
    """Installs a single stderr handler on the root logger.

    Args:
        level (str | int | None): Log level; falls back to `LRSE_LOG_LEVEL`.
    """
    logging.basicConfig(level=level or LOG_LEVEL, format=LOG_FORMAT, force=True)
