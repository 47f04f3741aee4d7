"""Single-word atomic emulation for the nonblocking queue structures.

CPython exposes no CAS or fetch-and-add on plain attributes, so each
primitive here owns a private lock held only for the duration of one
read-modify-write.  No lock is ever held across algorithm steps, which
preserves the key nonblocking property: a thread suspended between
steps cannot prevent other threads from completing their operations.
"""

from __future__ import annotations

import threading
from typing import Any, Optional


class AtomicU64:
    """Unsigned counter with load/store/fetch_add/compare_and_swap."""

    __slots__ = ("_lock", "_value")

    def __init__(self, value: int = 0):
        self._lock = threading.Lock()
        self._value = value

    def load(self) -> int:
        return self._value

    def store(self, value: int) -> None:
        with self._lock:
            self._value = value

    def fetch_add(self, delta: int = 1) -> int:
        with self._lock:
            old = self._value
            self._value = old + delta
            return old

    def compare_and_swap(self, expected: int, new: int) -> bool:
        with self._lock:
            if self._value != expected:
                return False
            self._value = new
            return True

    def max_update(self, candidate: int) -> None:
        with self._lock:
            if candidate > self._value:
                self._value = candidate


class AtomicRef:
    """Object reference with load/compare_and_swap, identity-compared."""

    __slots__ = ("_lock", "_value")

    def __init__(self, value: Optional[Any] = None):
        self._lock = threading.Lock()
        self._value = value

    def load(self) -> Any:
        return self._value

    def store(self, value: Any) -> None:
        with self._lock:
            self._value = value

    def compare_and_swap(self, expected: Any, new: Any) -> bool:
        with self._lock:
            if self._value is not expected:
                return False
            self._value = new
            return True
