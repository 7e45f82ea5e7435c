"""Two-tier byte accounting for a simulated accelerator ("device") and host.

Every rank owns one :class:`MemoryLedger`. While a ledger is active, the
autograd engine reports each buffer it creates; the ledger follows the
buffer's lifetime through a weakref finalizer, so live/peak counters reflect
what the program actually keeps alive rather than a hand-written estimate.

Tags mirror the usual training memory map: weights, grads, optimizer,
activation-checkpoint, logits, workspace, comm-buffer.
"""

from __future__ import annotations

import contextlib
import csv
import io
import json
import threading
import weakref
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Iterator

import numpy as np

DEVICE = "device"
HOST = "host"
TIERS = (DEVICE, HOST)

TAGS = (
    "weights",
    "grads",
    "optimizer",
    "activation-checkpoint",
    "logits",
    "workspace",
    "comm-buffer",
)

_active: ContextVar["MemoryLedger | None"] = ContextVar("active_ledger", default=None)


class LedgerError(RuntimeError):
    pass


class OutOfMemoryError(LedgerError):
    """A tier budget would be exceeded by an allocation."""

    def __init__(self, tier: str, required: int, available: int, tag: str):
        self.tier = tier
        self.required = required
        self.available = available
        self.deficit = required - available
        kind = "host-OOM" if tier == HOST else "device-OOM"
        super().__init__(
            f"{kind}: {tag} allocation needs {required} bytes live on {tier} "
            f"but only {available} bytes are available (deficit {self.deficit})"
        )


@dataclass
class Allocation:
    handle: int
    tag: str
    tier: str
    nbytes: int
    shape: tuple | None = None


def current() -> "MemoryLedger | None":
    """The ledger active in this execution context, if any."""
    return _active.get()


def observe(array: np.ndarray, tag: str | None = None, tier: str = DEVICE) -> None:
    ledger = _active.get()
    if ledger is not None:
        ledger.observe(array, tag=tag, tier=tier)


@contextlib.contextmanager
def scope(tag: str) -> Iterator[None]:
    """Tag allocations made in this block (no-op without an active ledger)."""
    ledger = _active.get()
    if ledger is None:
        yield
        return
    with ledger.scope(tag):
        yield


def _root(array: np.ndarray) -> np.ndarray:
    while isinstance(array.base, np.ndarray):
        array = array.base
    return array


class MemoryLedger:
    """Byte-exact live/peak accounting with per-tag breakdown and an event log."""

    def __init__(
        self,
        device_budget: int | None = None,
        host_budget: int | None = None,
        record_events: bool = True,
    ):
        self.device_budget = device_budget
        self.host_budget = host_budget
        self.record_events = record_events
        self.live = {t: 0 for t in TIERS}
        self.peak = {t: 0 for t in TIERS}
        self.tag_live: dict[tuple[str, str], int] = {}
        self.tag_peak: dict[tuple[str, str], int] = {}
        self.largest: dict[str, Allocation] = {}
        self.shapes: dict[str, set[tuple]] = {}
        self.events: list[tuple[int, str, int, str, str, int]] = []
        self._allocs: dict[int, Allocation] = {}
        self._by_buffer: dict[int, int] = {}
        self._tags = ["workspace"]
        self._next = 0
        self._ordinal = 0
        self._lock = threading.RLock()

    # -- context ---------------------------------------------------------
    @contextlib.contextmanager
    def activate(self) -> Iterator["MemoryLedger"]:
        token = _active.set(self)
        try:
            yield self
        finally:
            _active.reset(token)

    @contextlib.contextmanager
    def scope(self, tag: str) -> Iterator[None]:
        if tag not in TAGS:
            raise LedgerError(f"unknown tag {tag!r}; expected one of {TAGS}")
        self._tags.append(tag)
        try:
            yield
        finally:
            self._tags.pop()

    @property
    def current_tag(self) -> str:
        return self._tags[-1]

    # -- core accounting ------------------------------------------------------
    def _budget(self, tier: str) -> int | None:
        return self.device_budget if tier == DEVICE else self.host_budget

    def _log(self, op: str, a: Allocation) -> None:
        self._ordinal += 1
        if self.record_events:
            self.events.append((self._ordinal, op, a.handle, a.tag, a.tier, a.nbytes))

    def _add(self, a: Allocation, sign: int) -> None:
        self.live[a.tier] += sign * a.nbytes
        key = (a.tier, a.tag)
        self.tag_live[key] = self.tag_live.get(key, 0) + sign * a.nbytes
        if sign > 0:
            self.peak[a.tier] = max(self.peak[a.tier], self.live[a.tier])
            self.tag_peak[key] = max(self.tag_peak.get(key, 0), self.tag_live[key])

    def _check_budget(self, tier: str, nbytes: int, tag: str) -> None:
        budget = self._budget(tier)
        if budget is not None and self.live[tier] + nbytes > budget:
            raise OutOfMemoryError(tier, self.live[tier] + nbytes, budget, tag)

    def track(self, tier: str, tag: str, nbytes: int, shape: tuple | None = None) -> int:
        """Record an allocation and return its handle."""
        if tier not in TIERS:
            raise LedgerError(f"unknown tier {tier!r}")
        if tag not in TAGS:
            raise LedgerError(f"unknown tag {tag!r}")
        if nbytes < 0:
            raise LedgerError(f"negative allocation size {nbytes}")
        with self._lock:
            self._check_budget(tier, nbytes, tag)
            handle = self._next
            self._next += 1
            a = Allocation(handle, tag, tier, int(nbytes), shape)
            self._allocs[handle] = a
            self._add(a, +1)
            prev = self.largest.get(tag)
            if prev is None or a.nbytes > prev.nbytes:
                self.largest[tag] = a
            if shape is not None:
                self.shapes.setdefault(tag, set()).add(tuple(shape))
            self._log("alloc", a)
            return handle

    def release(self, handle: int) -> None:
        with self._lock:
            a = self._allocs.pop(handle, None)
            if a is None:
                raise LedgerError(f"double free or unknown handle {handle}")
            self._add(a, -1)
            self._log("free", a)

    def retag(self, handle: int, tag: str) -> None:
        with self._lock:
            a = self._allocs[handle]
            if a.tag == tag:
                return
            self._add(a, -1)
            a.tag = tag
            self._add(a, +1)
            self._log("retag", a)

    def move(self, handle: int, tier: str) -> None:
        """Move an allocation between tiers (a simulated copy + free)."""
        with self._lock:
            a = self._allocs[handle]
            if a.tier == tier:
                return
            self._check_budget(tier, a.nbytes, a.tag)
            self._add(a, -1)
            a.tier = tier
            self._add(a, +1)
            self._log("move", a)

    # -- buffer tracking ----------------------------------------------------
    def observe(self, array: np.ndarray, tag: str | None = None, tier: str = DEVICE) -> int:
        """Track the buffer backing ``array`` until it is garbage collected.

        Views share their owner's entry, so a buffer is counted once.
        """
        root = _root(array)
        key = id(root)
        with self._lock:
            handle = self._by_buffer.get(key)
            if handle is not None:
                return handle
            handle = self.track(tier, tag or self.current_tag, root.nbytes, root.shape)
            self._by_buffer[key] = handle
        weakref.finalize(root, self._finalize, key, handle)
        return handle

    def _finalize(self, key: int, handle: int) -> None:
        with self._lock:
            if self._by_buffer.get(key) == handle:
                del self._by_buffer[key]
            if handle in self._allocs:
                self.release(handle)

    def handle_of(self, array: np.ndarray) -> int | None:
        return self._by_buffer.get(id(_root(array)))

    def allocation(self, handle: int) -> Allocation:
        return self._allocs[handle]

    # -- queries --------------------------------------------------------------
    def live_bytes(self, tier: str = DEVICE, tag: str | None = None) -> int:
        if tag is None:
            return self.live[tier]
        return self.tag_live.get((tier, tag), 0)

    def peak_bytes(self, tier: str = DEVICE, tag: str | None = None) -> int:
        if tag is None:
            return self.peak[tier]
        return self.tag_peak.get((tier, tag), 0)

    def reset_peaks(self) -> None:
        """Restart peak tracking from the current live values."""
        with self._lock:
            self.peak = dict(self.live)
            self.tag_peak = dict(self.tag_live)
            self.largest = {}
            self.shapes = {}

    def outstanding(self) -> list[Allocation]:
        return list(self._allocs.values())

    def summary(self) -> dict:
        def by_tag(table: dict) -> dict:
            out: dict = {t: {} for t in TIERS}
            for (tier, tag), v in sorted(table.items()):
                out[tier][tag] = v
            return out

        return {
            "device_budget": self.device_budget,
            "host_budget": self.host_budget,
            "live": dict(self.live),
            "peak": dict(self.peak),
            "live_by_tag": by_tag(self.tag_live),
            "peak_by_tag": by_tag(self.tag_peak),
            "largest_allocation": {
                tag: {"bytes": a.nbytes, "shape": list(a.shape or ())}
                for tag, a in sorted(self.largest.items())
            },
            "events": self._ordinal,
        }

    def to_json(self, include_events: bool = True) -> str:
        doc = self.summary()
        if include_events:
            doc["timeline"] = [
                {"ordinal": o, "op": op, "handle": h, "tag": tag, "tier": tier, "bytes": n}
                for o, op, h, tag, tier, n in self.events
            ]
        return json.dumps(doc, indent=1)

    def timeline_csv(self) -> str:
        """Live bytes per tier after every event, for memory-profile plots."""
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["ordinal", "op", "tag", "tier", "bytes", "device_live", "host_live"])
        live = {t: 0 for t in TIERS}
        tiers: dict[int, str] = {}
        for o, op, h, tag, tier, n in self.events:
            if op == "alloc":
                live[tier] += n
            elif op == "free":
                live[tier] -= n
            elif op == "move":
                live[tiers[h]] -= n
                live[tier] += n
            tiers[h] = tier
            w.writerow([o, op, tag, tier, n, live[DEVICE], live[HOST]])
        return buf.getvalue()
