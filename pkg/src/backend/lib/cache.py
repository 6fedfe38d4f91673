from collections import OrderedDict
from collections.abc import Iterator
from typing import Generic, TypeVar

T = TypeVar("T")


class SubCache(Generic[T]):
    """LRU cache of deserialized sub-indexes keyed by sub id.

    Membership tests do not touch recency; only :meth:`get` and :meth:`put` do.
    A capacity of zero disables caching.
    """

    def __init__(self, capacity: int) -> None:
        if capacity < 0:
            raise ValueError("cache capacity cannot be negative")
        self.capacity = capacity
        self._entries: OrderedDict[int, T] = OrderedDict()
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    def get(self, sub_id: int) -> T | None:
        if sub_id not in self._entries:
            self.misses += 1
            return None
        self._entries.move_to_end(sub_id)
        self.hits += 1
        return self._entries[sub_id]

    def peek(self, sub_id: int) -> T | None:
        return self._entries.get(sub_id)

    def put(self, sub_id: int, value: T) -> int | None:
        """Insert or refresh ``sub_id``; returns the evicted id, if any."""
        if self.capacity == 0:
            return None
        if sub_id in self._entries:
            self._entries.move_to_end(sub_id)
            self._entries[sub_id] = value
            return None
        evicted = None
        if len(self._entries) >= self.capacity:
            evicted, _ = self._entries.popitem(last=False)
            self.evictions += 1
        self._entries[sub_id] = value
        return evicted

    def invalidate(self, sub_id: int) -> bool:
        return self._entries.pop(sub_id, None) is not None

    def clear(self) -> None:
        self._entries.clear()

    def resident(self) -> list[int]:
        """Sub ids from least to most recently used."""
        return list(self._entries)

    def __contains__(self, sub_id: object) -> bool:
        return sub_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[int]:
        return iter(self._entries)

    def stats(self) -> str:
        return f"Cache: {len(self)}/{self.capacity} | Hits: {self.hits} | Misses: {self.misses}"
