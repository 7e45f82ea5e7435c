"""Ulysses sequence parallelism for attention.

Each rank holds a contiguous shard of the sequence. Around attention, one
all-to-all trades the sequence shard for a subset of heads over the whole
sequence (seq_to_head); after attention the inverse all-to-all restores the
sequence layout (head_to_seq). Any attention callback can run in between.

Head assignment is contiguous: rank i owns q heads [i*Hq/P, (i+1)*Hq/P).
When there are fewer kv heads than ranks, each kv head is sent to the
P/Hkv ranks whose q heads use it; the backward of that fan-out is a sum.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .collectives import ProcessGroup, all_to_all_tensors
from .errors import ConfigError, ShardingError


def _divisors(n: int) -> list[int]:
    return [p for p in range(1, n + 1) if n % p == 0]


def _or_list(xs: Sequence[int]) -> str:
    xs = [str(x) for x in xs]
    return xs[0] if len(xs) == 1 else ", ".join(xs[:-1]) + " or " + xs[-1]


@dataclass(frozen=True)
class HeadShardPlan:
    sp_degree: int
    q_heads: int
    kv_heads: int
    q_heads_per_rank: int
    kv_heads_per_rank: int
    kv_replication: int
    q_index: tuple[tuple[int, ...], ...]
    kv_index: tuple[tuple[int, ...], ...]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["q_index"] = [list(x) for x in self.q_index]
        d["kv_index"] = [list(x) for x in self.kv_index]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def plan_head_shards(q_heads: int, kv_heads: int, sp_degree: int) -> HeadShardPlan:
    """Assign q heads and (possibly replicated) kv heads to ``sp_degree`` ranks."""
    Hq, Hkv, P = q_heads, kv_heads, sp_degree
    if min(Hq, Hkv, P) < 1:
        raise ConfigError(f"head counts and SP degree must be >= 1 (got {Hq}, {Hkv}, {P})",
                          "parallel.sp_degree")
    if Hq % Hkv:
        raise ConfigError(f"q_heads {Hq} is not a multiple of kv_heads {Hkv}", "model.kv_heads")
    if Hq % P:
        raise ConfigError(
            f"q_heads not divisible by SP degree: q_heads={Hq}, sp_degree={P}",
            "parallel.sp_degree",
            f"you'd need SP to be {_or_list(_divisors(Hq))}",
        )
    if Hkv >= P:
        if Hkv % P:
            raise ConfigError(
                f"kv_heads not divisible by SP degree: kv_heads={Hkv}, sp_degree={P}",
                "parallel.sp_degree",
                f"SP degrees up to kv_heads must divide it: {_or_list(_divisors(Hkv))}",
            )
        kv_per, r = Hkv // P, 1
    else:
        if P % Hkv:
            raise ConfigError(
                f"SP degree {P} is not a multiple of kv_heads {Hkv}, so kv heads cannot be "
                f"replicated evenly",
                "parallel.sp_degree",
            )
        kv_per, r = 1, P // Hkv
    qn = Hq // P
    G = Hq // Hkv
    q_index = tuple(tuple(range(i * qn, (i + 1) * qn)) for i in range(P))
    if r == 1:
        kv_index = tuple(tuple(range(i * kv_per, (i + 1) * kv_per)) for i in range(P))
    else:
        kv_index = tuple((q_index[i][0] // G,) for i in range(P))
    for i in range(P):
        # every local q head must find its kv head locally
        need = sorted({q // G for q in q_index[i]})
        assert need == list(kv_index[i]), (need, kv_index[i])
    return HeadShardPlan(P, Hq, Hkv, qn, kv_per, r, q_index, kv_index)


def seq_to_head(group: ProcessGroup, x: Tensor, head_index: Sequence[Sequence[int]],
                label: str | None = None) -> Tensor:
    """[bs, s/P, H, d] on every rank -> [bs, s, |head_index[rank]|, d].

    Part j sent by a rank is its sequence shard restricted to rank j's heads;
    received parts are concatenated along the sequence in rank order.
    """
    P = group.world_size
    if len(head_index) != P:
        raise ConfigError(f"head plan is for {len(head_index)} ranks but the group has {P}",
                          "parallel.sp_degree")
    if P == 1:
        return x
    parts = [_select_heads(x, idx) for idx in head_index]
    recv = all_to_all_tensors(group, parts, label=label)
    return ag.concat(recv, axis=1)


def _select_heads(x: Tensor, idx: Sequence[int]) -> Tensor:
    idx = list(idx)
    if idx == list(range(idx[0], idx[0] + len(idx))):
        return ag.narrow(x, 2, idx[0], idx[0] + len(idx))
    return ag.take(x, idx, axis=2)


def head_to_seq(group: ProcessGroup, y: Tensor, label: str | None = None) -> Tensor:
    """[bs, s, H/P, d] -> [bs, s/P, H, d]: exact inverse of seq_to_head for contiguous plans."""
    P = group.world_size
    if P == 1:
        return y
    s = y.shape[1]
    if s % P:
        raise ShardingError(f"sequence length {s} is not divisible by SP degree {P}")
    parts = ag.split(y, [s // P] * P, axis=1)
    recv = all_to_all_tensors(group, parts, label=label)
    return ag.concat(recv, axis=2)


def replicate_kv(group: ProcessGroup, kv: Tensor, plan: HeadShardPlan, label: str | None = None) -> Tensor:
    """Deliver each rank its kv heads over the full sequence (replicating when r > 1)."""
    return seq_to_head(group, kv, plan.kv_index, label=label)


class UlyssesAttention:
    """Attention callback wrapper: runs ``inner`` on full-sequence head shards."""

    def __init__(self, group: ProcessGroup, plan: HeadShardPlan, inner):
        if plan.sp_degree != group.world_size:
            raise ConfigError(
                f"head plan built for SP degree {plan.sp_degree} but the SP group has "
                f"{group.world_size} ranks",
                "parallel.sp_degree",
            )
        self.group = group
        self.plan = plan
        self.inner = inner

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, position_ids) -> Tensor:
        return ulysses_attention(self.group, self.plan, q, k, v, position_ids, self.inner)


def ulysses_attention(group: ProcessGroup, plan: HeadShardPlan, q: Tensor, k: Tensor, v: Tensor,
                      position_ids, inner) -> Tensor:
    """Local-shard q/k/v in, local-shard attention output [bs, s/P, Hq, d] out.

    ``position_ids`` is this rank's shard; it is gathered so the inner
    callback sees the whole sequence's positions.
    """
    if plan.sp_degree != group.world_size:
        raise ConfigError(
            f"head plan built for SP degree {plan.sp_degree} but the SP group has "
            f"{group.world_size} ranks",
            "parallel.sp_degree",
        )
    if q.shape[2] != plan.q_heads or k.shape[2] != plan.kv_heads:
        raise ConfigError(
            f"q/k carry {q.shape[2]}/{k.shape[2]} heads but the plan expects "
            f"{plan.q_heads}/{plan.kv_heads}",
            "model.q_heads",
        )
    if group.world_size == 1:
        return inner(q, k, v, position_ids)
    pos = np.asarray(position_ids)
    full_pos = group.all_gather(pos, axis=1, label="position_ids")
    qh = seq_to_head(group, q, plan.q_index, label="q")
    kh = seq_to_head(group, k, plan.kv_index, label="k")
    vh = seq_to_head(group, v, plan.kv_index, label="v")
    out = inner(qh, kh, vh, full_pos)
    return head_to_seq(group, out, label="attn_out")
