import numpy as np
import pytest

from longseq import autograd as ag
from longseq.autograd import Tensor
from longseq.collectives import run_spmd
from longseq.errors import ConfigError
from longseq.model import BlockCausalAttention, CausalAttention
from longseq.ulysses import head_to_seq, plan_head_shards, seq_to_head, ulysses_attention


@pytest.mark.parametrize("hq,hkv,p,expect", [
    (32, 8, 8, (4, 1, 1)),
    (32, 8, 32, (1, 1, 4)),
    (32, 4, 8, (4, 1, 2)),
])
def test_reference_head_plans(hq, hkv, p, expect):
    plan = plan_head_shards(hq, hkv, p)
    assert (plan.q_heads_per_rank, plan.kv_heads_per_rank, plan.kv_replication) == expect


def test_nine_heads_on_eight_ranks_is_rejected_with_remediation():
    with pytest.raises(ConfigError) as info:
        plan_head_shards(9, 9, 8)
    msg = str(info.value)
    assert "divisible" in msg and "you'd need SP to be 1, 3 or 9" in msg
    assert info.value.path == "parallel.sp_degree"


def _oracle(hq, hkv, p):
    """Independent rule: per-rank q heads, kv heads, replication; None if invalid."""
    if hq % hkv or hq % p:
        return None
    if hkv >= p:
        return None if hkv % p else (hq // p, hkv // p, 1)
    return None if p % hkv else (hq // p, 1, p // hkv)


def test_exhaustive_plan_sweep():
    checked = 0
    for hq in range(1, 65):
        for hkv in [d for d in range(1, hq + 1) if hq % d == 0]:
            for p in [d for d in range(1, hq + 1) if hq % d == 0]:
                want = _oracle(hq, hkv, p)
                if want is None:
                    with pytest.raises(ConfigError):
                        plan_head_shards(hq, hkv, p)
                    continue
                plan = plan_head_shards(hq, hkv, p)
                assert (plan.q_heads_per_rank, plan.kv_heads_per_rank, plan.kv_replication) == want
                # every q head owned exactly once, and its kv head is co-located
                owned = sorted(h for idx in plan.q_index for h in idx)
                assert owned == list(range(hq))
                g = hq // hkv
                for qi, ki in zip(plan.q_index, plan.kv_index):
                    assert {h // g for h in qi} <= set(ki)
                # each kv head is held by exactly `replication` ranks
                counts = np.bincount([h for idx in plan.kv_index for h in idx], minlength=hkv)
                assert (counts == plan.kv_replication).all()
                checked += 1
    assert checked > 500


@pytest.mark.parametrize("P", [2, 4])
def test_seq_to_head_matches_index_oracle_and_round_trips(P):
    bs, s, H, d = 2, 8, 4, 3
    full = np.random.default_rng(0).normal(size=(bs, s, H, d))
    plan = plan_head_shards(H, H, P)
    n = s // P

    def prog(g):
        x = Tensor(full[:, g.rank * n:(g.rank + 1) * n].copy())
        y = seq_to_head(g, x, plan.q_index)
        back = head_to_seq(g, y)
        return y.data, back.data

    for r, (y, back) in enumerate(run_spmd(P, prog)):
        # out[b, t, j, :] = full[b, t, plan.q_index[r][j], :]
        np.testing.assert_array_equal(y, full[:, :, list(plan.q_index[r])])
        np.testing.assert_array_equal(back, full[:, r * n:(r + 1) * n])


def _attention_inputs(seed, bs, s, hq, hkv, d):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(bs, s, hq, d)), rng.normal(size=(bs, s, hkv, d)), rng.normal(size=(bs, s, hkv, d))


@pytest.mark.parametrize("P,hkv", [(2, 2), (4, 2), (8, 2), (4, 4), (8, 8)])
@pytest.mark.parametrize("inner", [CausalAttention(block=4), BlockCausalAttention(block=4)])
def test_sp_attention_equals_single_rank(P, hkv, inner):
    bs, s, hq, d = 1, 16, 8, 4
    q, k, v = _attention_inputs(P, bs, s, hq, hkv, d)
    pos = np.concatenate([np.arange(5), np.arange(7), np.arange(4)])[None]
    w = np.random.default_rng(9).normal(size=(bs, s, hq, d))

    def grads(out, qt, kt, vt, wt):
        ag.sum_(ag.mul(out, Tensor(wt))).backward()
        return qt.grad, kt.grad, vt.grad

    qt, kt, vt = (Tensor(a, requires_grad=True) for a in (q, k, v))
    ref = inner(qt, kt, vt, pos)
    ref_g = grads(ref, qt, kt, vt, w)
    plan = plan_head_shards(hq, hkv, P)
    n = s // P

    def prog(g):
        sl = slice(g.rank * n, (g.rank + 1) * n)
        ts = [Tensor(a[:, sl].copy(), requires_grad=True) for a in (q, k, v)]
        out = ulysses_attention(g, plan, *ts, pos[:, sl], inner)
        return out.data, grads(out, *ts, w[:, sl])

    for r, (out, gs) in enumerate(run_spmd(P, prog)):
        sl = slice(r * n, (r + 1) * n)
        assert np.max(np.abs(out - ref.data[:, sl])) <= 1e-12
        for a, b in zip(gs, ref_g):
            assert np.max(np.abs(a - b[:, sl])) <= 1e-10


@pytest.mark.parametrize("P", [2, 4, 8])
def test_forward_all_to_all_bytes_match_formula(P):
    bs, s, hq, d = 2, 32, 8, 4
    h = hq * d
    q, k, v = _attention_inputs(0, bs, s, hq, hq, d)
    plan = plan_head_shards(hq, hq, P)
    n = s // P

    def prog(g):
        sl = slice(g.rank * n, (g.rank + 1) * n)
        ulysses_attention(g, plan, *(Tensor(a[:, sl].copy()) for a in (q, k, v)),
                          np.arange(s)[None, sl], CausalAttention(block=8))
        return g.stats.bytes_sent(labels=["q", "attn_out"])

    sent = run_spmd(P, prog)
    # per rank, with s the rank's shard length
    assert all(b == 2 * bs * n * h * 8 * (P - 1) // P for b in sent)
    # summed over ranks, with s the full length
    assert sum(sent) == 2 * bs * s * h * 8 * (P - 1) // P
