import numpy as np
import pytest

from longseq import autograd as ag
from longseq import ledger as L
from longseq.autograd import Tensor
from longseq.collectives import all_to_all_tensors, run_spmd
from longseq.errors import CollectiveError, CollectiveTimeoutError, SPMDDivergenceError


@pytest.mark.parametrize("P", [1, 2, 3, 4, 8])
def test_all_to_all_twice_with_transposed_indexing_is_identity(P):
    def prog(g):
        r = g.rank
        parts = [np.full((2, 3), 100 * r + j, dtype=np.float64) for j in range(P)]
        recv = g.all_to_all(parts)
        # recv[j] came from rank j and was addressed to r
        assert [int(p[0, 0]) for p in recv] == [100 * j + r for j in range(P)]
        back = g.all_to_all(recv)
        return all(np.array_equal(a, b) for a, b in zip(back, parts))

    assert all(run_spmd(P, prog))


@pytest.mark.parametrize("P", [2, 3, 5, 8])
def test_all_reduce_equals_rank_ascending_serial_sum_bitwise(P):
    vals = [np.random.default_rng(r).normal(size=17) * 10 ** r for r in range(P)]
    serial = vals[0].copy()
    for v in vals[1:]:
        serial += v
    out = run_spmd(P, lambda g: g.all_reduce_sum(vals[g.rank]))
    for o in out:
        assert o.tobytes() == serial.tobytes()


def test_all_gather_and_broadcast():
    def prog(g):
        x = np.arange(3) + 10 * g.rank
        gathered = g.all_gather(x[None], axis=1)
        b = g.broadcast(np.array([7.0, 8.0]) if g.rank == 2 else None, src=2)
        return gathered, b

    out = run_spmd(4, prog)
    for gathered, b in out:
        np.testing.assert_array_equal(gathered[0], np.concatenate([np.arange(3) + 10 * r for r in range(4)]))
        np.testing.assert_array_equal(b, [7.0, 8.0])


def test_divergent_collectives_are_detected():
    def prog(g):
        if g.rank == 1:
            g.all_reduce_sum(np.ones(2))
        else:
            g.all_gather(np.ones(2))

    with pytest.raises(SPMDDivergenceError, match="all_reduce_sum"):
        run_spmd(3, prog, timeout=5)


def test_rank_skipping_a_collective_fails_at_exit_rendezvous():
    def prog(g):
        if g.rank != 0:
            g.barrier()

    with pytest.raises(SPMDDivergenceError):
        run_spmd(2, prog, timeout=5)


def test_timeout_error_when_peer_is_late():
    import time

    def prog(g):
        if g.rank == 1:
            time.sleep(0.6)
        g.barrier()

    with pytest.raises(CollectiveTimeoutError, match="within 0.2s"):
        run_spmd(2, prog, timeout=0.2)


def test_rank_exception_propagates_and_releases_peers():
    def prog(g):
        if g.rank == 2:
            raise ValueError("boom on rank 2")
        g.barrier()

    with pytest.raises(ValueError, match="boom"):
        run_spmd(4, prog, timeout=5)


def test_mismatched_all_to_all_shapes_rejected():
    def prog(g):
        parts = [np.zeros((1, 2 + g.rank)) for _ in range(2)]
        g.all_to_all(parts)

    with pytest.raises(CollectiveError):
        run_spmd(2, prog, timeout=5)


def test_comm_stats_count_only_outbound_bytes():
    def prog(g):
        g.all_to_all([np.zeros((4, 2)) for _ in range(4)], label="x")
        return g.stats

    for st in run_spmd(4, prog):
        assert st.bytes_sent(labels=["x"]) == 3 * 4 * 2 * 8
        assert st.by_op["all_to_all"].calls == 1


def test_received_buffers_are_tagged_comm_buffer():
    def prog(g):
        led = L.MemoryLedger()
        with led.activate():
            recv = g.all_to_all([np.zeros(8) for _ in range(2)])
            return led.live_bytes(L.DEVICE, "comm-buffer"), len(recv)

    for nbytes, n in run_spmd(2, prog):
        assert (nbytes, n) == (2 * 64, 2)


def test_differentiable_all_to_all_backward_routes_gradients():
    P = 3

    def prog(g):
        x = Tensor(np.arange(P * 2, dtype=np.float64).reshape(P, 2) + 10 * g.rank, requires_grad=True)
        parts = ag.split(x, [1] * P, axis=0)
        recv = all_to_all_tensors(g, parts, label="t")
        # weight what arrived from rank j by (j + 1)
        loss = ag.sum_(ag.concat([ag.mul(t, float(j + 1)) for j, t in enumerate(recv)], axis=0))
        loss.backward()
        return x.grad

    for r, grad in enumerate(run_spmd(P, prog)):
        # row j of rank r went to rank j, where it arrived from r and got weight r + 1
        np.testing.assert_array_equal(grad, np.full((P, 2), r + 1.0))


def test_subgroups_are_independent():
    def prog(g):
        sp = g.split(2)
        dp = g.strided(2)
        a = sp.all_reduce_sum(np.array([float(g.rank)]))
        b = dp.all_reduce_sum(np.array([float(g.rank)]))
        return sp.ranks, float(a[0]), dp.ranks, float(b[0])

    out = run_spmd(4, prog)
    assert out[0] == ((0, 1), 1.0, (0, 2), 2.0)
    assert out[3] == ((2, 3), 5.0, (1, 3), 4.0)
