"""Small shared helpers: checksums, clocks, rate pacing, crash points."""

from __future__ import annotations

import collections
import threading
import time
import zlib

from .errors import InjectedCrash


def crc32(data, value=0):
    return zlib.crc32(data, value) & 0xFFFFFFFF


class RealClock:
    """Wall-clock time (monotonic)."""

    def now(self):
        return time.monotonic()

    def sleep(self, seconds):
        if seconds > 0:
            time.sleep(seconds)


class SimClock:
    """Virtual time. ``sleep`` advances the clock instead of blocking.

    Used by the tick-driven pipeline simulations so that minutes of
    simulated traffic run in seconds.
    """

    def __init__(self, start=0.0):
        self._t = float(start)
        self._lock = threading.Lock()

    def now(self):
        return self._t

    def advance(self, seconds):
        with self._lock:
            self._t += seconds
            return self._t

    def sleep(self, seconds):
        if seconds > 0:
            self.advance(seconds)


class Pacer:
    """Byte-rate limiter shared by any number of threads.

    Each ``consume(n)`` reserves the next ``n / rate`` seconds of the link and
    sleeps until the reservation ends. Idle time does not accumulate credit,
    so there are no bursts above ``rate``.
    """

    def __init__(self, rate, clock=None):
        self.rate = float(rate) if rate else 0.0
        self.clock = clock or RealClock()
        self._next = 0.0
        self._lock = threading.Lock()

    def reserve(self, nbytes):
        """Book ``nbytes`` of link time; returns the instant the booking ends."""
        with self._lock:
            start = max(self.clock.now(), self._next)
            self._next = start + (nbytes / self.rate if self.rate and nbytes > 0 else 0.0)
            return self._next

    def wait_until(self, deadline):
        wait = deadline - self.clock.now()
        self.clock.sleep(wait)
        return max(wait, 0.0)

    def consume(self, nbytes):
        if not self.rate or nbytes <= 0:
            return 0.0
        return self.wait_until(self.reserve(nbytes))


class CrashPoints:
    """Named crash-injection points.

    Code under test calls ``hit(name)``; a test arms a name so the next hit
    raises :class:`InjectedCrash`. Every name ever hit is recorded so a test
    can enumerate the injection points of an operation.
    """

    def __init__(self):
        self.armed = collections.Counter()
        self.seen = []
        self._lock = threading.Lock()

    def arm(self, name, times=1):
        """The next ``times`` hits of ``name`` each raise."""
        with self._lock:
            self.armed[name] += times

    def disarm(self):
        with self._lock:
            self.armed.clear()

    def hit(self, name):
        with self._lock:
            if name not in self.seen:
                self.seen.append(name)
            if self.armed[name] > 0:
                self.armed[name] -= 1
                if not self.armed[name]:
                    del self.armed[name]
                raise InjectedCrash(name)


KiB = 1024
MiB = 1024 * KiB
GiB = 1024 * MiB
