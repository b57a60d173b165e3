"""Deterministic block-parallel map.

Work is cut into blocks whose boundaries depend only on the item count and
block size, never on the worker count, so results are bitwise identical for
any number of workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

DEFAULT_BLOCK = 2048


def block_slices(n_items, block_size=DEFAULT_BLOCK):
    return [slice(start, min(start + block_size, n_items)) for start in range(0, n_items, block_size)]


def map_blocks(func, n_items, workers=1, block_size=DEFAULT_BLOCK):
    """Apply ``func(slice)`` to every block; results in block order."""
    blocks = block_slices(n_items, block_size)
    if workers is None or workers <= 1 or len(blocks) <= 1:
        return [func(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, blocks))


def map_items(func, items, workers=1):
    """Ordered map over independent items."""
    items = list(items)
    if workers is None or workers <= 1 or len(items) <= 1:
        return [func(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))
