"""Choosing a data server: from the catalog, or in the client library."""

from __future__ import annotations

import itertools
import logging
import threading
from dataclasses import dataclass, field

from ..errors import NoEndpoints, NotFound

log = logging.getLogger(__name__)


@dataclass(eq=False)
class Endpoint:
    """A data server address plus an advisory load gauge."""

    address: tuple
    weight: float = 1.0
    name: str = ""
    alive: bool = True
    open_requests: int = 0
    bytes: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        self.address = tuple(self.address)
        if not self.name:
            self.name = f"{self.address[0]}:{self.address[1]}"

    def begin(self):
        with self._lock:
            self.open_requests += 1

    def end(self, nbytes=0):
        with self._lock:
            self.open_requests -= 1
            self.bytes += nbytes

    def matches(self, hint):
        return hint in (self.name, f"{self.address[0]}:{self.address[1]}")


@dataclass
class Choice:
    endpoint: Endpoint
    fallback: bool = False
    warning: str = ""


class ClientLibrary:
    """Client-side balancing over the endpoint list: round-robin by default,
    or least-loaded by open requests (ties broken round-robin)."""

    name = "client-library"

    def __init__(self, mode="round-robin"):
        if mode not in ("round-robin", "least-loaded"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self._cursor = itertools.count()

    def choose(self, file_id, endpoints):
        live = [e for e in endpoints if e.alive] or list(endpoints)
        if not live:
            raise NoEndpoints("endpoint list is empty")
        start = next(self._cursor)
        if self.mode == "round-robin":
            return Choice(live[start % len(live)])
        order = live[start % len(live):] + live[:start % len(live)]
        return Choice(min(order, key=lambda e: e.open_requests / e.weight))


class CatalogAffinity:
    """Server named by the owning database's ``server_affinity``."""

    name = "catalog-affinity"

    def __init__(self, catalog, fallback=None):
        self.catalog = catalog
        self.fallback = fallback or ClientLibrary()

    def choose(self, file_id, endpoints):
        if not endpoints:
            raise NoEndpoints("endpoint list is empty")
        try:
            hint = self.catalog.file_database(file_id).server_affinity
        except NotFound:
            hint = None
        for e in endpoints:
            if hint and e.matches(hint):
                if e.alive:
                    return Choice(e)
                break
        choice = self.fallback.choose(file_id, endpoints)
        if not hint:
            return choice
        choice.fallback = True
        choice.warning = f"affinity {hint!r} of file {file_id} unreachable"
        log.warning("%s; using %s", choice.warning, choice.endpoint.name)
        return choice


def choose_server(file_id, strategy, endpoints):
    return strategy.choose(file_id, endpoints)
