"""Index-ordered parallel map.

Results always come back in input order, so reductions downstream do not
depend on scheduling; ``threads=1`` runs inline.
"""

import os
from concurrent.futures import ThreadPoolExecutor

_threads = None


def set_threads(n):
    global _threads
    _threads = None if n is None else max(1, int(n))


def thread_count():
    if _threads is not None:
        return _threads
    return max(1, int(os.environ.get("SECHYP_THREADS", "1")))


def ordered_map(fn, items, threads=None):
    items = list(items)
    n = thread_count() if threads is None else max(1, int(threads))
    if n == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
