"""Small shared helpers."""
from __future__ import annotations

import os

THREADS_ENV = "SATT_THREADS"


def worker_count() -> int:
    """Worker cap for parallelizable batch work (dataset synthesis, scoring).

    Controlled by the SATT_THREADS environment variable; defaults to 1. All
    parallel work units are seeded independently, so the result never depends
    on this value.
    """
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, n)
