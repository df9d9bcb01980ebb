"""Configuration management for the MTLB toolkit."""
import logging
import os
from typing import Callable, Optional, TypeVar

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

T = TypeVar("T")


def _parse(cast: Callable[[str], T], raw: str) -> Optional[T]:
    """Malformed values become None so validate() can report them."""
    try:
        return cast(raw)
    except ValueError:
        return None


class Config:
    """Application configuration."""

    # Parallelism for sweeps (MTLB_THREADS caps it; default is the hardware count)
    THREADS_RAW = os.getenv("MTLB_THREADS", str(os.cpu_count() or 1))
    THREADS = _parse(int, THREADS_RAW)

    # Logging
    LOG_LEVEL = os.getenv("MTLB_LOG_LEVEL", "INFO").upper()

    # Where command outputs go when --output is not given
    OUTPUT_DIR = os.getenv("MTLB_OUTPUT_DIR", "mtlb_out")

    # Default relative tolerance for --tol
    ROOT_TOL_RAW = os.getenv("MTLB_ROOT_TOL", "1e-8")
    ROOT_TOL = _parse(float, ROOT_TOL_RAW)

    # Units recorded verbatim in every report
    UNITS = "gaussian"

    @classmethod
    def validate(cls):
        """Validate that the configuration is usable."""
        if cls.THREADS is None or cls.THREADS < 1:
            raise ValueError(f"MTLB_THREADS must be a positive integer, got {cls.THREADS_RAW!r}")
        if not isinstance(logging.getLevelName(cls.LOG_LEVEL), int):
            raise ValueError(f"MTLB_LOG_LEVEL is not a logging level: {cls.LOG_LEVEL}")
        if cls.ROOT_TOL is None or not cls.ROOT_TOL > 0:
            raise ValueError(f"MTLB_ROOT_TOL must be a positive number, got {cls.ROOT_TOL_RAW!r}")
        return True
