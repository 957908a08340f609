"""deterministic fan-out of independent repeats over a worker pool

Every repeat gets its own random stream, derived from the master seed and the
pair (stream, index) alone, so the number of workers never changes results.
Results come back ordered by repeat index.
"""

import logging
import multiprocessing
from dataclasses import dataclass
from typing import Any, Callable, Generic, Sequence, TypeVar

import numpy as np
from tqdm import tqdm

from transit_squeeze._exceptions import InvalidParameterError

logger: logging.Logger = logging.getLogger(__name__)

T = TypeVar("T")

# stream ids, combined with a batch index by `batch_stream`
STREAM_MAIN: int = 0
STREAM_SHOT_REFERENCE: int = 1
STREAM_PNL: int = 2
STREAM_HELD_OUT: int = 3
STREAM_TRAJECTORY: int = 4
_STREAMS_PER_BATCH: int = 16


def batch_stream(batch_index: int, role: int) -> int:
    """stream id for `role` inside batch `batch_index`"""
    return batch_index * _STREAMS_PER_BATCH + role


def repeat_generator(seed: int, stream: int, index: int) -> np.random.Generator:
    """random generator for repeat `index` of `stream`: child (stream, index) of the master seed"""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, index)))


@dataclass(frozen=True)
class _RepeatCall(Generic[T]):
    """picklable closure run inside the workers"""

    task: Callable[[np.random.Generator], T]
    seed: int
    stream: int

    def __call__(self, index: int) -> T:
        return self.task(repeat_generator(self.seed, self.stream, index))


def run_repeats(
    task: Callable[[np.random.Generator], T],
    n_repeats: int,
    seed: int,
    stream: int = STREAM_MAIN,
    workers: int = 1,
    progress: bool = False,
    desc: str = "repeats",
) -> list[T]:
    """run `task(rng)` once per repeat and return the results in repeat order

    # Parameters:
    - `task : Callable[[np.random.Generator], T]`
        must be picklable (module-level function, `functools.partial` of one,
        or a dataclass with `__call__`) when `workers > 1`
    - `n_repeats : int`
    - `seed : int`
        master seed
    - `stream : int`
        separates independent uses of the same master seed
        (defaults to `STREAM_MAIN`)
    - `workers : int`
        processes to use, 1 runs in-process (defaults to `1`)
    - `progress : bool`
        show a `tqdm` bar (defaults to `False`)

    # Returns:
    - `list[T]`
        one result per repeat, index order
    """
    if n_repeats < 1:
        raise InvalidParameterError(f"n_repeats must be at least 1, got {n_repeats = }")
    if workers < 1:
        raise InvalidParameterError(f"workers must be at least 1, got {workers = }")

    call: _RepeatCall[T] = _RepeatCall(task=task, seed=seed, stream=stream)
    indices: range = range(n_repeats)
    logger.debug(f"running {n_repeats} repeats on stream {stream} with {workers} worker(s)")

    if workers == 1:
        return [call(i) for i in tqdm(indices, desc=desc, disable=not progress, leave=False)]

    chunksize: int = max(1, n_repeats // (workers * 8))
    with multiprocessing.Pool(processes=workers) as pool:
        return list(
            tqdm(
                pool.imap(call, indices, chunksize=chunksize),
                total=n_repeats,
                desc=desc,
                disable=not progress,
                leave=False,
            )
        )


def stack_results(results: Sequence[Any], field: str) -> np.ndarray:
    """stack one NamedTuple field over repeats into an array with a leading repeat axis"""
    return np.stack([getattr(r, field) for r in results], axis=0)
