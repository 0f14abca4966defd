"""Splitting large event selections into bounded sub-queries."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class EventRange:
    """Events ``first`` .. ``stop - 1`` of ``run``."""

    run: int
    first: int
    stop: int

    def __post_init__(self):
        if self.first < 0 or self.stop < self.first:
            raise ValueError(f"bad range [{self.first}, {self.stop})")

    def __len__(self):
        return self.stop - self.first

    def events(self):
        return [(self.run, e) for e in range(self.first, self.stop)]


def split_query(selection, max_records_per_query):
    """Contiguous sub-ranges of at most ``max_records_per_query`` events whose
    concatenation is the selection. ``selection`` is an EventRange or a
    sequence of them."""
    if max_records_per_query <= 0:
        raise ValueError("max_records_per_query must be > 0")
    if isinstance(selection, EventRange):
        selection = [selection]
    out = []
    for r in selection:
        for first in range(r.first, r.stop, max_records_per_query):
            out.append(EventRange(r.run, first, min(first + max_records_per_query, r.stop)))
    return out
