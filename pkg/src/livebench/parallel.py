"""Order-preserving process pool map."""

from concurrent.futures import ProcessPoolExecutor


def pmap(fn, tasks, jobs: int = 1) -> list:
    """Apply ``fn`` to every task, returning results in task order.

    ``jobs <= 1`` runs in-process.  Results never depend on ``jobs``.
    """
    tasks = list(tasks)
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
