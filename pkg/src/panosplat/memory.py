"""Live-buffer accounting used to compare backward-pass schedules."""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np


def nbytes_of(*arrays) -> int:
    total = 0
    for a in arrays:
        if a is None:
            continue
        if isinstance(a, np.ndarray):
            total += a.nbytes
        elif hasattr(a, "nbytes"):
            total += int(a.nbytes)
        elif isinstance(a, (list, tuple)):
            total += nbytes_of(*a)
        elif isinstance(a, dict):
            total += nbytes_of(*a.values())
    return total


class MemoryMeter:
    """Counts bytes of buffers registered under string keys.

    Callers register a buffer when it becomes live and release it when it is no longer
    referenced; ``peak`` is the high-water mark of ``current``.
    """

    def __init__(self):
        self.current = 0
        self.peak = 0
        self._live: dict[str, int] = {}

    def hold(self, key: str, *arrays) -> int:
        if key in self._live:
            raise KeyError(f"buffer {key!r} is already live")
        n = nbytes_of(*arrays)
        self._live[key] = n
        self.current += n
        self.peak = max(self.peak, self.current)
        return n

    def release(self, key: str) -> None:
        self.current -= self._live.pop(key)
        assert self.current >= 0

    def discard(self, key: str) -> None:
        if key in self._live:
            self.release(key)

    def update(self, key: str, *arrays) -> int:
        """Re-measure a buffer that grew in place (registers it if new)."""
        self.discard(key)
        return self.hold(key, *arrays)

    def release_prefix(self, prefix: str) -> None:
        for key in [k for k in self._live if k.startswith(prefix)]:
            self.release(key)

    def is_live(self, key: str) -> bool:
        return key in self._live

    @contextmanager
    def scoped(self, key: str, *arrays):
        self.hold(key, *arrays)
        try:
            yield
        finally:
            self.release(key)

    def reset_peak(self) -> None:
        self.peak = self.current

    @property
    def live_keys(self) -> list[str]:
        return list(self._live)


class NullMeter(MemoryMeter):
    """Meter that records nothing; the default for library calls."""

    def hold(self, key: str, *arrays) -> int:
        return 0

    def release(self, key: str) -> None:
        pass

    def release_prefix(self, prefix: str) -> None:
        pass

    def discard(self, key: str) -> None:
        pass

    def update(self, key: str, *arrays) -> int:
        return 0

    def is_live(self, key: str) -> bool:
        return False


NULL_METER = NullMeter()
