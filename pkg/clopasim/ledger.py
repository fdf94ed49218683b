"""Compute accounting for training and inference work."""

import threading
from dataclasses import dataclass, field


@dataclass
class ComputeEntry:
    category: str  # "gradient_update" | "forward_pass"
    algorithm: str
    run_id: int
    count: int
    detail: dict = field(default_factory=dict)


class ComputeBudgetExceeded(Exception):
    def __init__(self, limit: int, current: int, attempted: int):
        self.limit = limit
        self.current = current
        self.attempted = attempted
        super().__init__(
            f"Gradient-update budget {limit} would be exceeded: "
            f"current {current} + attempted {attempted} = {current + attempted}"
        )


class ComputeLedger:
    def __init__(self) -> None:
        self._entries: list[ComputeEntry] = []
        self._limit_updates: int | None = None
        self._lock = threading.Lock()

    def record(self, entry: ComputeEntry) -> None:
        with self._lock:
            if entry.category == "gradient_update" and self._limit_updates is not None:
                current = self._count("gradient_update")
                if current + entry.count > self._limit_updates:
                    raise ComputeBudgetExceeded(self._limit_updates, current, entry.count)
            self._entries.append(entry)

    def check_updates(self, planned: int) -> None:
        with self._lock:
            if self._limit_updates is not None:
                current = self._count("gradient_update")
                if current + planned > self._limit_updates:
                    raise ComputeBudgetExceeded(self._limit_updates, current, planned)

    def _count(self, category: str) -> int:
        return sum(e.count for e in self._entries if e.category == category)

    def totals_by_category(self) -> dict[str, int]:
        with self._lock:
            result: dict[str, int] = {}
            for e in self._entries:
                result[e.category] = result.get(e.category, 0) + e.count
            return result

    def totals_by_algorithm(self, category: str | None = None) -> dict[str, int]:
        with self._lock:
            result: dict[str, int] = {}
            for e in self._entries:
                if category is not None and e.category != category:
                    continue
                result[e.algorithm] = result.get(e.algorithm, 0) + e.count
            return result

    @property
    def entries(self) -> list[ComputeEntry]:
        with self._lock:
            return list(self._entries)

    @property
    def limit_updates(self) -> int | None:
        return self._limit_updates

    @limit_updates.setter
    def limit_updates(self, value: int | None) -> None:
        self._limit_updates = value

    def reset(self) -> None:
        with self._lock:
            self._entries.clear()
            self._limit_updates = None


# Module singleton
ledger = ComputeLedger()


def record_updates(algorithm: str, run_id: int, count: int, **detail) -> ComputeEntry:
    entry = ComputeEntry("gradient_update", algorithm, run_id, count, detail)
    ledger.record(entry)
    return entry


def record_forward_passes(algorithm: str, run_id: int, count: int, **detail) -> ComputeEntry:
    entry = ComputeEntry("forward_pass", algorithm, run_id, count, detail)
    ledger.record(entry)
    return entry
