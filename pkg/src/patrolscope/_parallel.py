import os
from concurrent.futures import ProcessPoolExecutor

WORKERS_ENV = "PATROLSCOPE_WORKERS"


def resolve_workers(n_jobs=None) -> int:
    if n_jobs is None:
        n_jobs = int(os.environ.get(WORKERS_ENV, "1"))
    if n_jobs < 1:
        n_jobs = os.cpu_count() or 1
    return n_jobs


def ordered_map(func, items, n_jobs=None):
    """``list(map(func, items))``, optionally over a process pool.

    Output order always follows input order, so results do not depend on
    the worker count.
    """
    items = list(items)
    n_jobs = resolve_workers(n_jobs)
    if n_jobs == 1 or len(items) < 2:
        return [func(it) for it in items]
    chunksize = max(1, len(items) // (4 * n_jobs))
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(func, items, chunksize=chunksize))
