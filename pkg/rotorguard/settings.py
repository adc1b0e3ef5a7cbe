"""Process-level settings read from the environment."""

import os


def output_dir() -> str:
    """Directory where logs, aggregates and the run ledger are written."""
    return os.environ.get("ROTORGUARD_OUTPUT_DIR", os.path.join(os.getcwd(), "results"))


def db_path() -> str:
    """SQLite file backing the run ledger."""
    return os.environ.get("ROTORGUARD_DB", os.path.join(output_dir(), "rotorguard.db"))


def worker_count() -> int:
    """Number of worker processes used by benchmark suites."""
    try:
        return max(1, int(os.environ.get("ROTORGUARD_WORKERS", "1")))
    except ValueError:
        return 1


def log_level() -> str:
    return os.environ.get("ROTORGUARD_LOG_LEVEL", "INFO").upper()
