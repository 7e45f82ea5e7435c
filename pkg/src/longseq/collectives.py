"""In-process SPMD runtime with blocking collectives.

``run_spmd(world_size, fn)`` runs ``fn(group)`` once per rank, each in its own
thread (and therefore its own ``contextvars`` context, so every rank has a
private ledger and autograd state). Ranks only talk through the collectives
below, each a two-phase rendezvous: deposit, barrier, read, barrier.

Every call carries (op name, per-group sequence number, label); ranks compare
these after the first barrier, so a rank that issues a different collective
is reported on all ranks at that call. A rank that issues no collective at
all is caught by the watchdog timeout or by the exit rendezvous.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import autograd as ag
from . import ledger
from .errors import CollectiveError, CollectiveTimeoutError, SPMDDivergenceError

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = float(os.environ.get("LONGSEQ_COLLECTIVE_TIMEOUT", "30"))


@dataclass
class OpCounter:
    calls: int = 0
    elements_sent: int = 0
    bytes_sent: int = 0

    def add(self, elements: int, nbytes: int) -> None:
        self.calls += 1
        self.elements_sent += int(elements)
        self.bytes_sent += int(nbytes)


@dataclass
class CommStats:
    """Per-rank traffic counters; "sent" counts only payload leaving this rank."""

    by_op: dict[str, OpCounter] = field(default_factory=dict)
    by_label: dict[str, OpCounter] = field(default_factory=dict)

    def record(self, op: str, label: str | None, elements: int, nbytes: int) -> None:
        self.by_op.setdefault(op, OpCounter()).add(elements, nbytes)
        if label:
            self.by_label.setdefault(label, OpCounter()).add(elements, nbytes)

    def bytes_sent(self, op: str | None = None, labels: Sequence[str] | None = None) -> int:
        if labels is not None:
            return sum(self.by_label[l].bytes_sent for l in labels if l in self.by_label)
        if op is not None:
            c = self.by_op.get(op)
            return c.bytes_sent if c else 0
        return sum(c.bytes_sent for c in self.by_op.values())

    def reset(self) -> None:
        self.by_op.clear()
        self.by_label.clear()

    def to_dict(self) -> dict:
        return {
            "by_op": {k: vars(v).copy() for k, v in sorted(self.by_op.items())},
            "by_label": {k: vars(v).copy() for k, v in sorted(self.by_label.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


class _Rendezvous:
    """Shared state for one set of ranks."""

    def __init__(self, ranks: tuple[int, ...], timeout: float):
        self.ranks = ranks
        self.size = len(ranks)
        self.timeout = timeout
        self.barrier = threading.Barrier(self.size, timeout=timeout)
        self.slots: list[Any] = [None] * self.size

    def wait(self, where: str) -> None:
        try:
            self.barrier.wait()
        except threading.BrokenBarrierError:
            if getattr(self, "aborted", False):
                raise CollectiveError(f"{where}: collective aborted because another rank failed")
            raise CollectiveTimeoutError(
                f"{where}: not all ranks of {list(self.ranks)} arrived within "
                f"{self.timeout}s (possible SPMD divergence or deadlock)"
            ) from None

    def abort(self) -> None:
        self.aborted = True
        self.barrier.abort()


class _World:
    def __init__(self, world_size: int, timeout: float):
        self.world_size = world_size
        self.timeout = timeout
        self._lock = threading.Lock()
        self._groups: dict[tuple, _Rendezvous] = {}
        self.aborted = False

    def rendezvous(self, ranks: tuple[int, ...], name: str) -> _Rendezvous:
        with self._lock:
            rv = self._groups.get((ranks, name))
            if rv is None:
                rv = self._groups[(ranks, name)] = _Rendezvous(ranks, self.timeout)
                if self.aborted:
                    rv.abort()
            return rv

    def abort_all(self) -> None:
        with self._lock:
            self.aborted = True
            for rv in self._groups.values():
                rv.abort()


class ProcessGroup:
    """One rank's handle on a group of ranks."""

    def __init__(self, world: _World, ranks: tuple[int, ...], global_rank: int, name: str = "world"):
        self._world = world
        self.name = name
        self._rv = world.rendezvous(ranks, name)
        self.ranks = ranks
        self.global_rank = global_rank
        self.rank = ranks.index(global_rank)
        self.world_size = len(ranks)
        self.stats = CommStats()
        self._seq = 0

    def __repr__(self) -> str:
        return f"ProcessGroup(rank={self.rank}, world_size={self.world_size})"

    def split(self, size: int) -> "ProcessGroup":
        """Partition into consecutive blocks of ``size`` ranks; return this rank's block."""
        if size < 1 or self.world_size % size:
            raise CollectiveError(f"cannot split a group of {self.world_size} into blocks of {size}")
        start = (self.rank // size) * size
        return ProcessGroup(self._world, self.ranks[start:start + size], self.global_rank,
                            f"{self.name}/split{size}")

    def strided(self, size: int) -> "ProcessGroup":
        """Ranks with the same position inside their ``size`` block (the orthogonal group)."""
        if size < 1 or self.world_size % size:
            raise CollectiveError(f"cannot split a group of {self.world_size} into blocks of {size}")
        ranks = self.ranks[self.rank % size::size]
        return ProcessGroup(self._world, ranks, self.global_rank, f"{self.name}/strided{size}")

    # -- protocol -------------------------------------------------------------
    def _exchange(self, op: str, payload: Any, label: str | None = None, meta: Any = None) -> list:
        """Deposit ``payload``; return every rank's payload in rank order."""
        seq = self._seq
        self._seq += 1
        rv = self._rv
        where = f"rank {self.rank}: {op}#{seq}"
        rv.slots[self.rank] = (op, seq, label, meta, payload)
        rv.wait(where)
        entries = list(rv.slots)
        sig = [(e[0], e[1], e[2]) for e in entries]
        if any(s != sig[0] for s in sig):
            detail = ", ".join(f"rank {r}: {s[0]}#{s[1]}" + (f"[{s[2]}]" if s[2] else "")
                               for r, s in enumerate(sig))
            raise SPMDDivergenceError(f"ranks issued different collectives ({detail})")
        rv.wait(where)
        return [e[4] for e in entries]

    # -- raw array collectives -----------------------------------------------------
    def barrier(self) -> None:
        self._exchange("barrier", None)
        self.stats.record("barrier", None, 0, 0)

    def all_to_all(self, send_parts: Sequence[np.ndarray], label: str | None = None) -> list[np.ndarray]:
        """recv[j] on rank i is send_parts[i] from rank j."""
        if len(send_parts) != self.world_size:
            raise CollectiveError(
                f"rank {self.rank}: all_to_all needs {self.world_size} parts, got {len(send_parts)}"
            )
        parts = [np.asarray(p) for p in send_parts]
        allp = self._exchange("all_to_all", parts, label)
        me = self.rank
        for src in range(self.world_size):
            for other in range(src + 1, self.world_size):
                a, b = allp[src][me], allp[other][me]
                if a.shape[1:] != b.shape[1:] or a.dtype != b.dtype:
                    raise CollectiveError(
                        f"all_to_all: rank {src} sends {a.shape} but rank {other} sends "
                        f"{b.shape} to rank {me}"
                    )
        recv = []
        for src in range(self.world_size):
            buf = np.array(allp[src][me], copy=True)
            ledger.observe(buf, tag="comm-buffer")
            recv.append(buf)
        out = [p for j, p in enumerate(parts) if j != me]
        self.stats.record("all_to_all", label, sum(p.size for p in out), sum(p.nbytes for p in out))
        return recv

    def all_reduce_sum(self, x: np.ndarray, label: str | None = None) -> np.ndarray:
        """Elementwise sum over ranks, accumulated in ascending rank order."""
        x = np.asarray(x)
        allx = self._exchange("all_reduce_sum", x, label, meta=x.shape)
        for r, y in enumerate(allx):
            if y.shape != x.shape:
                raise CollectiveError(
                    f"all_reduce_sum: rank {r} holds {y.shape} but rank {self.rank} holds {x.shape}"
                )
        total = np.array(allx[0], copy=True)
        for y in allx[1:]:
            total += y
        ledger.observe(total, tag="comm-buffer")
        n = self.world_size - 1
        self.stats.record("all_reduce_sum", label, x.size * n, x.nbytes * n)
        return total

    def all_gather(self, x: np.ndarray, axis: int = 0, label: str | None = None) -> np.ndarray:
        """Concatenate every rank's ``x`` along ``axis`` in rank order."""
        x = np.asarray(x)
        allx = self._exchange("all_gather", x, label)
        ax = axis % max(x.ndim, 1)
        for r, y in enumerate(allx):
            if y.ndim != x.ndim or y.shape[:ax] + y.shape[ax + 1:] != x.shape[:ax] + x.shape[ax + 1:]:
                raise CollectiveError(
                    f"all_gather: rank {r} holds {y.shape}, incompatible with rank "
                    f"{self.rank}'s {x.shape} along axis {axis}"
                )
        out = np.concatenate(allx, axis=axis)
        ledger.observe(out, tag="comm-buffer")
        n = self.world_size - 1
        self.stats.record("all_gather", label, x.size * n, x.nbytes * n)
        return out

    def broadcast(self, x: np.ndarray | None, src: int = 0, label: str | None = None) -> np.ndarray:
        allx = self._exchange("broadcast", x if self.rank == src else None, label, meta=src)
        out = np.array(allx[src], copy=True)
        ledger.observe(out, tag="comm-buffer")
        if self.rank == src:
            n = self.world_size - 1
            self.stats.record("broadcast", label, out.size * n, out.nbytes * n)
        else:
            self.stats.record("broadcast", label, 0, 0)
        return out

    def all_reduce_scalars(self, values: Sequence[float]) -> np.ndarray:
        return self.all_reduce_sum(np.asarray(values, dtype=np.float64), label="scalars")


def all_to_all_tensors(group: ProcessGroup, parts: Sequence[ag.Tensor],
                       label: str | None = None) -> list[ag.Tensor]:
    """Differentiable all_to_all: the backward pass is the all_to_all of the gradients."""
    recv = group.all_to_all([p.data for p in parts], label=label)
    grad_label = f"{label}.grad" if label else None

    def bw(gs):
        return tuple(group.all_to_all(list(gs), label=grad_label))

    return ag.make_results(recv, list(parts), bw, "all_to_all", collective=True)


def run_spmd(world_size: int, fn: Callable[[ProcessGroup], Any],
             timeout: float | None = None) -> list[Any]:
    """Run ``fn(group)`` on ``world_size`` ranks and return the per-rank results.

    If any rank raises, the others are released from their collectives and
    the first failing rank's exception is re-raised.
    """
    if world_size < 1:
        raise CollectiveError(f"world_size must be >= 1, got {world_size}")
    world = _World(world_size, DEFAULT_TIMEOUT if timeout is None else timeout)
    ranks = tuple(range(world_size))
    results: list[Any] = [None] * world_size
    errors: list[BaseException | None] = [None] * world_size

    def body(r: int) -> None:
        group = ProcessGroup(world, ranks, r)
        try:
            results[r] = fn(group)
            # exit rendezvous: a rank that skipped a collective shows up here
            group._exchange("<exit>", None)
        except BaseException as exc:  # noqa: BLE001 - forwarded to the caller
            errors[r] = exc
            world.abort_all()

    if world_size == 1:
        body(0)
    else:
        threads = [threading.Thread(target=body, args=(r,), name=f"rank{r}") for r in ranks]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    first = _first_error(errors)
    if first is not None:
        raise first
    return results


def _first_error(errors: list[BaseException | None]) -> BaseException | None:
    # prefer the root cause over the "aborted" errors it triggered elsewhere
    real = [e for e in errors if e is not None and not (
        type(e) is CollectiveError and "aborted" in str(e))]
    if real:
        return real[0]
    return next((e for e in errors if e is not None), None)
