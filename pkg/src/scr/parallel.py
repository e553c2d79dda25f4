"""Ordered thread-pool mapping with single-threaded BLAS.

Work is always split the same way regardless of the worker count, and results
come back in submission order, so outputs do not depend on ``threads``.
"""

from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

from threadpoolctl import threadpool_limits


@contextmanager
def single_threaded_blas():
    with threadpool_limits(limits=1):
        yield


def map_ordered(fn, items, threads=1):
    items = list(items)
    with single_threaded_blas():
        if threads is None or threads <= 1 or len(items) <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))


def chunks(seq, size):
    return [seq[i:i + size] for i in range(0, len(seq), size)]
