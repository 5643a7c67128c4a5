"""Runtime byte accounting split into the four training memory categories.

The ledger counts logical tensor bytes (element count times the precision
width), not allocator overhead. Every buffer the engine materializes for
parameters, gradients, optimizer states, or activations is recorded here,
so per-category peaks can be compared against closed-form expectations.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

from .errors import AccountingError


class Category(Enum):
    PARAMS = "params"
    GRADIENTS = "gradients"
    OPTIM_STATES = "optim_states"
    ACTIVATIONS = "activations"


@dataclass(frozen=True)
class MemorySnapshot:
    """Immutable view of a ledger: current and peak bytes plus peak shares."""

    current: dict[str, int]
    peak: dict[str, int]
    peak_share_pct: dict[str, float]

    def total_peak(self) -> int:
        return sum(self.peak.values())

    def to_dict(self) -> dict:
        return {
            "current_bytes": dict(self.current),
            "peak_bytes": dict(self.peak),
            "peak_share_pct": dict(self.peak_share_pct),
        }


@dataclass
class MemoryLedger:
    """Single-writer per-run accounting of current/peak bytes per category."""

    track_events: bool = False
    current: dict[Category, int] = field(
        default_factory=lambda: {c: 0 for c in Category}
    )
    peak: dict[Category, int] = field(default_factory=lambda: {c: 0 for c in Category})
    events: list[tuple[int, Category, int]] = field(default_factory=list)
    _ordinal: int = 0

    def record(self, category: Category, delta_bytes: int) -> None:
        """Apply a signed byte delta; negative balances are accounting bugs."""
        balance = self.current[category] + delta_bytes
        if balance < 0:
            raise AccountingError(
                f"{category.value}: balance would go negative "
                f"({self.current[category]} + {delta_bytes})"
            )
        self.current[category] = balance
        if balance > self.peak[category]:
            self.peak[category] = balance
        if self.track_events:
            self.events.append((self._ordinal, category, delta_bytes))
        self._ordinal += 1

    def snapshot(self) -> MemorySnapshot:
        total_peak = sum(self.peak.values())
        share = {
            c.value: (100.0 * self.peak[c] / total_peak if total_peak else 0.0)
            for c in Category
        }
        return MemorySnapshot(
            current={c.value: self.current[c] for c in Category},
            peak={c.value: self.peak[c] for c in Category},
            peak_share_pct=share,
        )
