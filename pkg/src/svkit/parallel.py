"""Deterministic parallel map: results come back in input order, so output
is byte-identical for any worker count."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor


def ordered_map(fn, items, jobs: int = 1) -> list:
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))
