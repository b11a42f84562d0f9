"""Small shared helpers."""

from __future__ import annotations

import os


def resolve_threads(threads: int | None) -> int:
    """Worker count: explicit value, else MEMSE_THREADS, else CPU count."""
    if threads is not None:
        n = int(threads)
    else:
        env = os.environ.get("MEMSE_THREADS", "").strip()
        n = int(env) if env else (os.cpu_count() or 1)
    if n < 1:
        raise ValueError(f"thread count must be >= 1, got {n}")
    return n
