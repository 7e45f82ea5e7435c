"""Closed-form training-memory estimates.

GiB = 2**30 and MiB = 2**20 throughout. The default recipe is mixed
precision with Adam: 2-byte weights, 4-byte master weights, 8 bytes of Adam
state and 4-byte gradients, i.e. 18 bytes per parameter.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

GiB = 2 ** 30
MiB = 2 ** 20
GB = 10 ** 9  # the published fixed-memory example counts 10**9 bytes per "GiB"


@dataclass(frozen=True)
class Recipe:
    weights: int = 2
    optimizer: int = 8
    master: int = 4
    grads: int = 4

    @property
    def per_param(self) -> int:
        return self.weights + self.optimizer + self.master + self.grads


MIXED_ADAM = Recipe()


@dataclass
class MemoryEstimate:
    weights_bytes: float = 0.0
    optimizer_bytes: float = 0.0
    master_weights_bytes: float = 0.0
    grads_bytes: float = 0.0
    fixed_total_bytes: float = 0.0
    world_size: int = 1
    zero3_share_bytes: float = 0.0
    offload_device_share_bytes: float = 0.0
    offload_host_share_bytes: float = 0.0
    activation_ckpt_bytes: float = 0.0
    logits_bytes: float = 0.0
    mask_4d_bytes: float = 0.0
    position_ids_bytes: float = 0.0
    host_offload_bytes: float = 0.0

    def to_dict(self, unit: int = 1) -> dict:
        return {k: (v / unit if isinstance(v, float) else v) for k, v in asdict(self).items()}


def estimate_fixed(param_count: float, recipe: Recipe = MIXED_ADAM, world_size: int = 1) -> MemoryEstimate:
    """Weights, optimizer, master weights and grads; plus ZeRO-3 per-rank shares.

    With optimizer offload the device keeps weights and grads while Adam
    state and master weights move to host memory.
    """
    if param_count <= 0:
        raise ValueError(f"param_count must be positive, got {param_count}")
    if world_size < 1:
        raise ValueError(f"world_size must be >= 1, got {world_size}")
    n = float(param_count)
    e = MemoryEstimate(
        weights_bytes=n * recipe.weights,
        optimizer_bytes=n * recipe.optimizer,
        master_weights_bytes=n * recipe.master,
        grads_bytes=n * recipe.grads,
        world_size=world_size,
    )
    e.fixed_total_bytes = e.weights_bytes + e.optimizer_bytes + e.master_weights_bytes + e.grads_bytes
    e.zero3_share_bytes = e.fixed_total_bytes / world_size
    e.offload_device_share_bytes = (e.weights_bytes + e.grads_bytes) / world_size
    e.offload_host_share_bytes = (e.optimizer_bytes + e.master_weights_bytes) / world_size
    return e


def estimate_logits(seqlen: int, vocab: int, bytes_per_el: int = 4) -> int:
    """Bytes of one [seqlen, vocab] logits tensor."""
    return seqlen * vocab * bytes_per_el


def estimate_loss_peak(seqlen: int, vocab: int, bytes_per_el: int = 4) -> int:
    """Untiled loss working set: the logits plus a same-sized softmax/gradient buffer."""
    return 2 * estimate_logits(seqlen, vocab, bytes_per_el)


def estimate_activation_ckpt(seqlen: float, hidden: int, layers: int, bytes_per_el: int = 2,
                             sp: int = 1, gpus_per_node: int = 8) -> tuple[float, float]:
    """(per-rank device bytes without offload, host bytes per node with offload).

    One [seqlen/sp, hidden] checkpoint per layer per rank; with offload every
    rank on the node parks its checkpoints in the node's host memory.
    """
    per_rank = seqlen / sp * hidden * layers * bytes_per_el
    return per_rank, per_rank * gpus_per_node


def estimate_4d_mask(seqlen: int, bytes_per_el: int = 2) -> int:
    return seqlen * seqlen * bytes_per_el


def estimate_position_ids(seqlen: int, bytes_per_el: int = 2) -> int:
    return seqlen * bytes_per_el


# ---------------------------------------------------------------------------
# inverse problem
# ---------------------------------------------------------------------------

@dataclass
class SolverModel:
    """Per-rank memory at sequence length s for a model/parallel setup.

    ``work_per_token`` is the per-layer activation working memory per local
    token (everything except checkpoints and logits); ``mlp_work_per_token``
    is the part that tiling the MLP removes. Both are calibrated from ledger
    measurements for the toy engine; full-scale use leaves them at zero.
    """

    param_count: float
    hidden: int
    layers: int
    vocab: int
    recipe: Recipe = MIXED_ADAM
    sp: int = 1
    world_size: int = 1
    zero3: bool = False
    act_bytes: int = 2
    logits_bytes: int = 4
    logits_tile_tokens: int = 1024
    work_per_token: float = 0.0
    mlp_work_per_token: float = 0.0
    mlp_tile_tokens: int | None = None
    overhead_bytes: float = 0.0

    def fixed_device(self, optimizer_offload: bool) -> float:
        e = estimate_fixed(self.param_count, self.recipe, self.world_size if self.zero3 else 1)
        if optimizer_offload:
            return e.offload_device_share_bytes
        return e.zero3_share_bytes

    def fixed_host(self, optimizer_offload: bool) -> float:
        if not optimizer_offload:
            return 0.0
        e = estimate_fixed(self.param_count, self.recipe, self.world_size if self.zero3 else 1)
        return e.offload_host_share_bytes

    def usage(self, s: int, features: "Features") -> tuple[float, float]:
        """(device bytes, host bytes) per rank at global sequence length s."""
        local = math.ceil(s / self.sp)
        dev = self.fixed_device(features.optimizer_offload) + self.overhead_bytes
        host = self.fixed_host(features.optimizer_offload)
        ckpt = estimate_activation_ckpt(local, self.hidden, self.layers, self.act_bytes)[0]
        if features.ckpt_offload:
            host += ckpt
            dev += local * self.hidden * self.act_bytes  # one restored layer input
        elif features.ckpt:
            dev += ckpt
        else:
            dev += ckpt * 4  # rough: all per-layer intermediates stay live
        loss_tokens = min(local, self.logits_tile_tokens) if features.tiled_loss else local
        loss = estimate_loss_peak(loss_tokens, self.vocab, self.logits_bytes)
        mlp_tokens = local
        if features.tiled_mlp:
            mlp_tokens = min(local, self.mlp_tile_tokens or self.hidden)
        work = self.work_per_token * local + self.mlp_work_per_token * mlp_tokens
        dev += max(loss, work)
        return dev, host


@dataclass(frozen=True)
class Features:
    ckpt: bool = True
    ckpt_offload: bool = False
    tiled_loss: bool = False
    tiled_mlp: bool = False
    optimizer_offload: bool = False


@dataclass
class SolverResult:
    feasible: bool
    max_seqlen: int
    reason: str = ""
    device_bytes: float = 0.0
    host_bytes: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def bisect_max(fits: Callable[[int], bool], lo: int, hi: int, step: int = 1) -> int:
    """Largest multiple of ``step`` in [lo, hi] with fits() true; ``fits(lo)`` must hold.

    ``fits`` must be monotone (true then false).
    """
    lo_k, hi_k = lo // step, hi // step
    while lo_k < hi_k:
        mid = (lo_k + hi_k + 1) // 2
        if fits(mid * step):
            lo_k = mid
        else:
            hi_k = mid - 1
    return lo_k * step


def max_seqlen_solver(model: SolverModel, device_budget: float, host_budget: float | None,
                      features: Features = Features(), s_max: int = 1 << 40) -> SolverResult:
    """Largest sequence length (a multiple of the SP degree) whose estimate fits both budgets."""
    def fits(s: int) -> bool:
        dev, host = model.usage(s, features)
        return dev <= device_budget and (host_budget is None or host <= host_budget)

    step = model.sp
    fixed = model.fixed_device(features.optimizer_offload)
    if fixed > device_budget:
        return SolverResult(False, 0, f"fixed share {fixed:.0f} B exceeds device budget {device_budget:.0f} B")
    if not fits(step):
        dev, host = model.usage(step, features)
        return SolverResult(False, 0, f"infeasible at s={step}: device {dev:.0f} B, host {host:.0f} B",
                            dev, host)
    hi = step
    while hi < s_max and fits(hi * 2):
        hi *= 2
    best = bisect_max(fits, hi, min(hi * 2, s_max), step)
    dev, host = model.usage(best, features)
    return SolverResult(True, best, "", dev, host)


def published_anchors() -> dict[str, float]:
    """The published closed-form numbers, recomputed (GiB unless the key says otherwise).

    ``fixed_8b_gib`` has no published counterpart: it is the same total as
    ``fixed_8b_gb`` in binary units.
    """
    ckpt_125k = estimate_activation_ckpt(125_000, 4096, 32, 2)[0]
    host_70b = estimate_activation_ckpt(3_000_000, 8192, 80, 2, sp=32, gpus_per_node=8)[1]
    host_qwen = estimate_activation_ckpt(1_000_000, 5120, 64, 2, sp=32, gpus_per_node=8)[1]
    fixed_8b = estimate_fixed(8e9).fixed_total_bytes
    return {
        "fixed_8b_gb": fixed_8b / GB,
        "fixed_8b_gib": fixed_8b / GiB,
        "logits_16k_gib": estimate_logits(16_000, 128_256, 4) / GiB,
        "ckpt_125k_gib": ckpt_125k / GiB,
        "host_offload_70b_3m_gib_per_node": host_70b / GiB,
        "mask_4d_125k_gib": estimate_4d_mask(125_000) / GiB,
        "mask_4d_250k_gib": estimate_4d_mask(250_000) / GiB,
        "position_ids_125k_mib": estimate_position_ids(125_000) / MiB,
        "host_offload_qwen32b_1m_gib_per_node": host_qwen / GiB,
    }


# published values; the 8B fixed total is stated in units of 10**9 bytes
PUBLISHED_VALUES = {
    "fixed_8b_gb": 144.0,
    "logits_16k_gib": 7.65,
    "ckpt_125k_gib": 30.5,
    "host_offload_70b_3m_gib_per_node": 915.0,
    "mask_4d_125k_gib": 29.0,
    "mask_4d_250k_gib": 116.0,
    "position_ids_125k_mib": 0.2,
    "host_offload_qwen32b_1m_gib_per_node": 152.0,
}

PRESETS = {
    "llama-8b": dict(param_count=8e9, hidden=4096, layers=32, vocab=128_256),
    "llama-70b": dict(param_count=70e9, hidden=8192, layers=80, vocab=128_256),
    "qwen3-32b": dict(param_count=32e9, hidden=5120, layers=64, vocab=151_936),
}


def report(param_count: float, hidden: int, layers: int, vocab: int, seqlen: int, sp: int = 1,
           world_size: int = 1, gpus_per_node: int = 8, recipe: Recipe = MIXED_ADAM) -> MemoryEstimate:
    """Every estimate for one configuration in a single record."""
    e = estimate_fixed(param_count, recipe, world_size)
    dev, host = estimate_activation_ckpt(seqlen, hidden, layers, recipe.weights, sp, gpus_per_node)
    e.activation_ckpt_bytes = dev
    e.host_offload_bytes = host
    e.logits_bytes = float(estimate_logits(math.ceil(seqlen / sp), vocab))
    e.mask_4d_bytes = float(estimate_4d_mask(seqlen))
    e.position_ids_bytes = float(estimate_position_ids(seqlen))
    return e

