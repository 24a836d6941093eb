import logging
import os
import platform
from typing import Any, Dict, Optional

import numpy as np
import psutil

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_LEVEL_ENV = "AMTL_LOG_LEVEL"

LOG_LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def resolve_log_level(name: Optional[str] = None) -> int:
    """Level named by `name` or the AMTL_LOG_LEVEL environment variable; unknown names fall back to info."""
    if name is None:
        name = os.environ.get(LOG_LEVEL_ENV, "info")
    return LOG_LEVELS.get(name.strip().lower(), logging.INFO)


def setup_logging(level: Optional[str] = None):
    logging.basicConfig(level=resolve_log_level(level), format=LOG_FORMAT, force=True)


def system_info() -> Dict[str, Any]:
    return {
        "os": platform.system(),
        "os_release": platform.release(),
        "cpu_count_physical": psutil.cpu_count(logical=False),
        "cpu_count_logical": psutil.cpu_count(logical=True),
        "ram_total_gb": round(psutil.virtual_memory().total / (1024 ** 3), 2),
        "python_version": platform.python_version(),
        "numpy_version": np.__version__,
    }
