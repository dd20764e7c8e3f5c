# src/binfactor/utils/timestamp_utils.py
"""UTC timestamps for log file names and report metadata."""

from datetime import datetime, timezone


def get_iso8601_utc_timestamp() -> str:
    """Current time as ISO 8601 UTC with microseconds, e.g. "2024-01-15T10:30:45.123456Z"."""
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def format_timestamp_for_filename() -> str:
    """Current time as YYYYMMDD_HHMMSS."""
    return datetime.now(timezone.utc).strftime("%Y%m%d_%H%M%S")
