"""Reference counting with parent-held child references."""

from __future__ import annotations

from typing import List

from .errors import UsageError


class RefCounted:
    """Object with an explicit reference count, created with count 1.

    A parent that wants to keep a child alive calls `hold`; the retained
    reference is released automatically when the parent is destroyed.
    """

    def __init__(self) -> None:
        self._refcount = 1
        self._alive = True
        self._retained: List["RefCounted"] = []

    @property
    def refcount(self) -> int:
        return self._refcount

    @property
    def alive(self) -> bool:
        return self._alive

    def _check_alive(self) -> None:
        if not self._alive:
            raise UsageError(f"{self!r} used after destruction")

    def retain(self) -> int:
        self._check_alive()
        self._refcount += 1
        return self._refcount

    def release(self) -> int:
        self._check_alive()
        self._refcount -= 1
        if self._refcount == 0:
            self._alive = False
            self.on_destroy()
            children, self._retained = self._retained, []
            for child in children:
                child.release()
        return self._refcount

    def hold(self, child: "RefCounted") -> None:
        """Retain `child` on behalf of this object until destruction."""
        self._check_alive()
        child.retain()
        self._retained.append(child)

    def drop(self, child: "RefCounted") -> None:
        """Release one previously held reference to `child`."""
        self._check_alive()
        self._retained.remove(child)
        child.release()

    def on_destroy(self) -> None:
        """Hook for subclasses; runs once when the count reaches zero."""


def refcount_retain(obj: RefCounted) -> int:
    return obj.retain()


def refcount_release(obj: RefCounted) -> int:
    return obj.release()
