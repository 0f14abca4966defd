"""Lease table: time-bounded Shared/Exclusive claims on named resources.

Only bookkeeping lives here. Rolling back a dead holder's work is the
catalog's job; the table just hands back the leases that ran out.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import replace

from .types import LockLease, LockMode


def compatible(a, b):
    return a is LockMode.SHARED and b is LockMode.SHARED


class LeaseTable:
    """Not thread-safe on its own; the catalog serializes access."""

    def __init__(self, first_id=1):
        self._ids = itertools.count(first_id)
        self._by_id = {}
        self._by_resource = {}
        # (expires_at, lease_id); entries made stale by renew/release are skipped
        self._heap = []

    def __len__(self):
        return len(self._by_id)

    def __iter__(self):
        return iter(list(self._by_id.values()))

    def get(self, lease_id):
        return self._by_id.get(lease_id)

    def on(self, resource):
        return list(self._by_resource.get(resource, {}).values())

    def blocking(self, resource, mode):
        return [l for l in self.on(resource) if not compatible(l.mode, mode)]

    def grant(self, holder, resource, mode, expires_at):
        lease = LockLease(next(self._ids), holder, resource, mode, expires_at)
        self._by_id[lease.lease_id] = lease
        self._by_resource.setdefault(resource, {})[lease.lease_id] = lease
        heapq.heappush(self._heap, (expires_at, lease.lease_id))
        return lease

    def extend(self, lease_id, expires_at):
        lease = self._by_id[lease_id]
        lease.expires_at = expires_at
        heapq.heappush(self._heap, (expires_at, lease_id))
        return replace(lease)

    def remove(self, lease_id):
        lease = self._by_id.pop(lease_id, None)
        if lease is not None:
            held = self._by_resource.get(lease.resource)
            if held is not None:
                held.pop(lease_id, None)
                if not held:
                    del self._by_resource[lease.resource]
        return lease

    def pop_expired(self, now):
        """Remove and return every lease with ``expires_at < now``.

        Work is proportional to the number of heap entries that fell due,
        not to the number of live leases.
        """
        out = []
        while self._heap and self._heap[0][0] < now:
            expires_at, lease_id = heapq.heappop(self._heap)
            lease = self._by_id.get(lease_id)
            if lease is None or lease.expires_at != expires_at:
                continue
            self.remove(lease_id)
            out.append(lease)
        return out
