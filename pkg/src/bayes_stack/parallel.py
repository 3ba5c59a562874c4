"""Thread budget shared by chain- and tree-level parallelism.

The ``BAYES_STACK_THREADS`` environment variable caps the number of worker
threads; without it the budget defaults to min(4, cpu_count). Work is always
partitioned so that results are independent of the number of workers.
"""

import os

THREADS_ENV_VAR = "BAYES_STACK_THREADS"


def thread_budget(n_tasks: int) -> int:
    """Number of worker threads to use for ``n_tasks`` independent tasks."""
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is not None:
        limit = max(1, int(raw))
    else:
        limit = min(4, os.cpu_count() or 1)
    return max(1, min(limit, n_tasks))
