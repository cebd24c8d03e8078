import time
from collections.abc import Iterator
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, ConfigDict


class FrozenModel(BaseModel):
    """
    Base class of every configuration model.

    Instances are immutable and unknown keys are rejected.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)


def derive_seed(master_seed: int, *keys: int) -> int:
    """
    Derives a 64-bit seed from a master seed and integer keys (for example a sample index).

    The derivation only depends on its arguments, so sample `i` gets the same seed no matter
    how the samples are batched across runs or processes.
    """
    state = np.random.SeedSequence([master_seed, *keys]).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 32) | int(state[1])


@dataclass(slots=True)
class Stopwatch:
    """Mutable elapsed-time holder filled in by `timed()`."""

    seconds: float = 0.0
    """Elapsed wall time in seconds."""


@contextmanager
def timed() -> Iterator[Stopwatch]:
    """
    Context manager that measures the wall time of its body.

    Example:

    ```python
    with timed() as watch:
        solve()

    print(watch.seconds)
    ```
    """
    watch = Stopwatch()
    start = time.perf_counter()
    try:
        yield watch
    finally:
        watch.seconds = time.perf_counter() - start
