"""Fork-based data parallelism for mesh sweeps.

Problem data is inherited by forked workers, so only chunk payloads cross
process boundaries and user callables need not be picklable.
"""
from __future__ import annotations

import multiprocessing as mp
import os

WORKERS_ENV = "CONTMPC_WORKERS"

_TASK = None


def default_workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _call(payload):
    return _TASK(payload)


def map_chunks(fn, payloads, workers=None):
    """``[fn(p) for p in payloads]``, spread over ``workers`` forked processes."""
    global _TASK
    workers = default_workers() if workers is None else workers
    payloads = list(payloads)
    if workers <= 1 or len(payloads) <= 1:
        return [fn(p) for p in payloads]
    _TASK = fn
    try:
        with mp.get_context("fork").Pool(min(workers, len(payloads))) as pool:
            return pool.map(_call, payloads, chunksize=1)
    finally:
        _TASK = None
