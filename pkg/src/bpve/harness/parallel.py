"""Chunked replicate scheduling with worker-count independent random streams."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from typing import Callable

import numpy as np

DEFAULT_CHUNK = 2000


def chunk_bounds(reps: int, chunk_size: int = DEFAULT_CHUNK) -> list[tuple[int, int]]:
    """(start, size) of the fixed-size chunks covering replicates 0..reps-1."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    return [(s, min(chunk_size, reps - s)) for s in range(0, reps, chunk_size)]


def chunk_rng(seed, start: int, size: int) -> np.random.Generator:
    """Generator for the chunk of replicates start..start+size-1, a function of these numbers only.

    ``seed`` is an integer or a tuple of integers (for example (seed, N) to give
    every scale its own streams).
    """
    key = [int(x) for x in seed] if isinstance(seed, (tuple, list)) else [int(seed)]
    return np.random.default_rng(np.random.SeedSequence(key + [int(start), int(size)]))


def _run_one(args):
    fn, seed, start, size, payload = args
    return fn(chunk_rng(seed, start, size), size, payload)


def run_chunks(fn: Callable, reps: int, seed, payload=None, parallelism: int = 1,
               chunk_size: int = DEFAULT_CHUNK) -> list:
    """Apply ``fn(rng, size, payload)`` to every chunk and return the results in chunk order.

    Chunk boundaries and streams depend only on (seed, reps, chunk_size), so the
    output is identical for every degree of parallelism. ``fn`` must be a
    module-level function when ``parallelism`` exceeds 1.
    """
    jobs = [(fn, seed, start, size, payload) for start, size in chunk_bounds(reps, chunk_size)]
    if parallelism <= 1 or len(jobs) == 1:
        return [_run_one(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=int(parallelism)) as pool:
        return list(pool.map(_run_one, jobs))
