"""Ulysses sequence parallelism: head plans, exactness and all-to-all volume.

Run: python demos/ulysses_heads.py
"""

import numpy as np

from longseq.autograd import Tensor
from longseq.collectives import run_spmd
from longseq.errors import ConfigError
from longseq.model import CausalAttention
from longseq.ulysses import plan_head_shards, ulysses_attention

for hq, hkv, p in [(32, 8, 8), (32, 8, 32), (32, 4, 8)]:
    plan = plan_head_shards(hq, hkv, p)
    print(f"Hq={hq} Hkv={hkv} SP={p}: {plan.q_heads_per_rank} q heads and "
          f"{plan.kv_heads_per_rank} kv heads per rank, kv replication {plan.kv_replication}")
try:
    plan_head_shards(9, 9, 8)
except ConfigError as exc:
    print(f"Hq=9 SP=8 -> {exc}")

# sharded attention equals single-rank attention
bs, s, hq, hkv, d, P = 1, 32, 8, 2, 4, 4
rng = np.random.default_rng(0)
q, k, v = rng.normal(size=(bs, s, hq, d)), rng.normal(size=(bs, s, hkv, d)), rng.normal(size=(bs, s, hkv, d))
pos = np.arange(s)[None]
inner = CausalAttention(block=8)
ref = inner(Tensor(q), Tensor(k), Tensor(v), pos).data
plan = plan_head_shards(hq, hkv, P)
n = s // P


def program(g):
    sl = slice(g.rank * n, (g.rank + 1) * n)
    out = ulysses_attention(g, plan, Tensor(q[:, sl]), Tensor(k[:, sl]), Tensor(v[:, sl]), pos[:, sl], inner)
    return out.data, g.stats.bytes_sent(labels=["q", "attn_out"])


outs = run_spmd(P, program)
got = np.concatenate([o for o, _ in outs], axis=1)
print(f"SP={P} vs single rank: max diff {np.max(np.abs(got - ref)):.1e}")
h = hq * d
print(f"q + attn_out bytes per rank: {outs[0][1]} measured, {2 * bs * n * h * 8 * (P - 1) // P} from the formula")
