"""SPMD ranks as threads with blocking, deterministic collectives.

Run: python demos/collectives_runtime.py
"""

import numpy as np

from longseq.collectives import run_spmd

P = 4


def program(g):
    # every rank sends part j of its buffer to rank j
    mine = np.arange(P) + 10 * g.rank
    received = g.all_to_all([mine[j:j + 1] for j in range(P)], label="demo")
    total = g.all_reduce_sum(np.array([float(g.rank)]))
    gathered = g.all_gather(np.array([g.rank * g.rank]))
    return np.concatenate(received), total[0], gathered, g.stats.bytes_sent()


for rank, (recv, total, gathered, sent) in enumerate(run_spmd(P, program)):
    print(f"rank {rank}: all_to_all -> {recv.tolist()}, sum of ranks = {total:.0f}, "
          f"gathered squares = {gathered.tolist()}, bytes sent = {sent}")

# a rank that skips a collective is reported instead of hanging
try:
    run_spmd(2, lambda g: g.barrier() if g.rank == 0 else g.all_reduce_sum(np.ones(1)), timeout=2.0)
except Exception as exc:  # noqa: BLE001 - shown to the reader
    print(f"divergent ranks: {type(exc).__name__}: {exc}")
