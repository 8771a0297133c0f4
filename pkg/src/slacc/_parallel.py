"""Deterministic map over independent work items, optionally in processes."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor


def parallel_map(fn, items, threads=1):
    """Apply ``fn`` over ``items``, preserving input order.

    ``threads <= 1`` runs serially in-process; more runs a process pool.
    Results are identical either way because every item carries its own
    seeded stream and the reduction order is fixed.
    """
    items = list(items)
    if threads is None or threads == 0:
        threads = os.cpu_count() or 1
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))
