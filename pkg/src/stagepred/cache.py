"""Exec-time cache: exact-repeat memory keyed by the feature hash."""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import dataclass

SNAPSHOT_VERSION = 1


@dataclass(frozen=True, slots=True)
class CacheEntry:
    count: int
    mean: float
    m2: float
    last_time: float
    last_update_seq: int

    @property
    def variance(self) -> float:
        """Population variance of the observed exec-times."""
        return self.m2 / self.count

    def updated(self, x: float, seq: int) -> "CacheEntry":
        # Welford
        n = self.count + 1
        delta = x - self.mean
        mean = self.mean + delta / n
        m2 = self.m2 + delta * (x - mean)
        return CacheEntry(n, mean, max(m2, 0.0), x, seq)


def predict(entry: CacheEntry, alpha: float = 0.8) -> float:
    """Blend the running mean (robustness) with the latest observation (freshness).

    Written as a lerp from ``last_time`` so that a single observation, or a
    run of equal ones, predicts that value exactly for every alpha.
    """
    return entry.last_time + alpha * (entry.mean - entry.last_time)


class ExecCache:
    """Bounded map from cache key to running exec-time statistics.

    When full, the entry updated least recently (smallest ``last_update_seq``)
    is evicted. Entries are immutable and replaced wholesale on update, so a
    concurrent reader never sees a half-written entry; writers must be
    serialized by the caller.
    """

    def __init__(self, capacity: int = 2000, alpha: float = 0.8):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        self.capacity = int(capacity)
        self.alpha = float(alpha)
        # ordered by last_update_seq, oldest first
        self._entries: OrderedDict[int, CacheEntry] = OrderedDict()
        self._last_seq: int | None = None
        self.evictions = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key: int) -> bool:
        return key in self._entries

    @property
    def last_seq(self) -> int | None:
        return self._last_seq

    def lookup(self, key: int) -> CacheEntry | None:
        return self._entries.get(key)

    def predict(self, key: int) -> float | None:
        entry = self._entries.get(key)
        if entry is None:
            return None
        return predict(entry, self.alpha)

    def record(self, key: int, observed: float, seq: int) -> CacheEntry:
        if not (isinstance(observed, (int, float)) and math.isfinite(observed) and observed >= 0):
            raise ValueError(f"observed exec-time must be finite and >= 0, got {observed!r}")
        if self._last_seq is not None and seq <= self._last_seq:
            raise ValueError(f"seq must be strictly increasing ({seq} after {self._last_seq})")
        self._last_seq = seq
        entries = self._entries
        old = entries.get(key)
        if old is None:
            entry = CacheEntry(1, float(observed), 0.0, float(observed), seq)
            entries[key] = entry
            while len(entries) > self.capacity:
                entries.popitem(last=False)
                self.evictions += 1
        else:
            entry = old.updated(float(observed), seq)
            entries[key] = entry
            entries.move_to_end(key)
        return entry

    def entries(self) -> list[tuple[int, CacheEntry]]:
        return list(self._entries.items())

    # -- persistence ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "version": SNAPSHOT_VERSION,
            "capacity": self.capacity,
            "alpha": self.alpha,
            "entries": [
                {"key": k, "count": e.count, "mean": e.mean, "m2": e.m2, "last": e.last_time, "seq": e.last_update_seq}
                for k, e in self._entries.items()
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExecCache":
        if d.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported cache snapshot version {d.get('version')!r}")
        cache = cls(d["capacity"], d["alpha"])
        rows = sorted(d["entries"], key=lambda r: (r["seq"], r["key"]))
        for r in rows:
            cache._entries[int(r["key"])] = CacheEntry(
                int(r["count"]), float(r["mean"]), float(r["m2"]), float(r["last"]), int(r["seq"])
            )
        if rows:
            cache._last_seq = rows[-1]["seq"]
        while len(cache._entries) > cache.capacity:
            cache._entries.popitem(last=False)
        return cache

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ExecCache":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
