"""Toy causal decoder with a pluggable attention callback.

Layout conventions: activations are ``[bs, s, h]``; per-head tensors are
``[bs, s, H, d]`` (sequence-major, heads inner); weights are ``[out, in]``.

Masking never builds an ``[s, s]`` array. Attention runs over query blocks,
and each block's additive mask is derived on the fly from position ids.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Protocol

import numpy as np

from . import autograd as ag
from . import ledger
from .autograd import Tensor
from .errors import ConfigError, ShapeError, ValidationError

log = logging.getLogger(__name__)

MASK_VALUE = -1e30  # exp(MASK_VALUE - rowmax) is exactly 0.0 in both float widths


@dataclass
class ModelConfig:
    vocab_size: int = 512
    hidden_size: int = 64
    n_layers: int = 4
    q_heads: int = 8
    kv_heads: int = 2
    mlp_ratio: int = 4
    max_position: int = 512
    dtype_bytes_weights: int = 2
    dtype_bytes_logits: int = 4
    norm_eps: float = 1e-6
    attn_block: int = 16

    def __post_init__(self) -> None:
        self.validate()

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.q_heads

    @property
    def kv_dim(self) -> int:
        return self.kv_heads * self.head_dim

    @property
    def intermediate(self) -> int:
        return self.mlp_ratio * self.hidden_size

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}", "model.vocab_size")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}", "model.n_layers")
        for name in ("hidden_size", "q_heads", "kv_heads", "mlp_ratio", "max_position", "attn_block"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", f"model.{name}")
        if self.hidden_size % self.q_heads:
            raise ConfigError(
                f"hidden_size {self.hidden_size} is not a multiple of q_heads {self.q_heads}",
                "model.hidden_size",
            )
        if self.q_heads % self.kv_heads:
            raise ConfigError(
                f"q_heads {self.q_heads} is not a multiple of kv_heads {self.kv_heads}",
                "model.kv_heads",
            )

    def to_dict(self) -> dict:
        return asdict(self)

    def param_count(self) -> int:
        h, V, I = self.hidden_size, self.vocab_size, self.intermediate
        per_layer = 2 * h + h * h + 2 * self.kv_dim * h + h * h + 3 * I * h
        return 2 * V * h + self.max_position * h + h + self.n_layers * per_layer


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

def run_ids(position_ids: np.ndarray) -> np.ndarray:
    """Label each token with its packed-sample index; validates the run structure.

    ``position_ids`` (1-D or ``[bs, s]``) must be a concatenation of runs
    0, 1, 2, ... each starting at zero.
    """
    pos = np.asarray(position_ids)
    if pos.ndim == 1:
        return run_ids(pos[None])[0]
    if pos.size == 0:
        return np.zeros(pos.shape, dtype=np.int64)
    starts = pos == 0
    cont = np.zeros_like(starts)
    cont[:, 1:] = pos[:, 1:] == pos[:, :-1] + 1
    bad = ~(starts | cont)
    if bad.any():
        b, t = np.argwhere(bad)[0]
        prev = pos[b, t - 1] if t > 0 else None
        raise ValidationError(
            f"position_ids must be zero-based ascending runs; at row {b} index {t} "
            f"got {pos[b, t]} after {prev}"
        )
    return np.cumsum(starts, axis=1) - 1


class BlockCausalPredicate:
    """pred(i, j): j <= i and tokens i, j belong to the same packed sample."""

    def __init__(self, position_ids):
        self.run = run_ids(np.asarray(position_ids).reshape(-1))
        self.run_start = np.arange(self.run.size) - np.asarray(position_ids).reshape(-1)

    def __call__(self, i, j):
        i, j = np.asarray(i), np.asarray(j)
        return (j <= i) & (self.run[i] == self.run[j])


def derive_block_causal_mask_predicate(position_ids) -> BlockCausalPredicate:
    return BlockCausalPredicate(position_ids)


# ---------------------------------------------------------------------------
# attention kernel
# ---------------------------------------------------------------------------

def _key_ranges(run_start: np.ndarray | None, s: int, block: int):
    """Yield (q0, q1, k0) for each query block; keys needed are [k0, q1)."""
    for q0 in range(0, s, block):
        q1 = min(q0 + block, s)
        k0 = 0 if run_start is None else int(run_start[:, q0:q1].min())
        yield q0, q1, k0


def _block_mask(q0, q1, k0, runs: np.ndarray | None) -> np.ndarray:
    """Boolean [bs|1, 1, 1, blk, klen] of masked-out (query, key) pairs."""
    qi = np.arange(q0, q1)[:, None]
    kj = np.arange(k0, q1)[None, :]
    masked = (kj > qi)[None]
    if runs is not None:
        masked = masked | (runs[:, q0:q1, None] != runs[:, None, k0:q1])
    return masked[:, None, None]


def _apply_mask(sc: np.ndarray, masked: np.ndarray) -> None:
    # same bits as adding MASK_VALUE: every finite score is absorbed by it
    np.copyto(sc, MASK_VALUE, where=masked)


def blockwise_attention(q: Tensor, k: Tensor, v: Tensor, position_ids=None,
                        block_causal: bool = False, block: int = 16) -> Tensor:
    """Exact softmax attention computed one query block at a time.

    q: [bs, s, Hq, d]; k, v: [bs, s, Hkv, d] with Hq a multiple of Hkv.
    Only per-block ``[blk, keys]`` scores are ever live; backward recomputes
    them from the saved row log-sum-exp.
    """
    bs, s, Hq, d = q.shape
    Hkv = k.shape[2]
    if k.shape != (bs, s, Hkv, d) or v.shape != k.shape or Hq % Hkv:
        raise ShapeError(f"attention shapes incompatible: q {q.shape}, k {k.shape}, v {v.shape}")
    G = Hq // Hkv
    scale = 1.0 / math.sqrt(d)
    runs = run_start = None
    if block_causal:
        if position_ids is None:
            raise ValidationError("block-causal attention needs position_ids")
        pos = np.asarray(position_ids).reshape(bs, s)
        runs = run_ids(pos)
        run_start = np.arange(s)[None, :] - pos

    # [bs, Hkv, G, s, d] and [bs, Hkv, 1, s, d]
    qh = np.ascontiguousarray(q.data.reshape(bs, s, Hkv, G, d).transpose(0, 2, 3, 1, 4))
    kh = np.ascontiguousarray(k.data.transpose(0, 2, 1, 3))[:, :, None]
    vh = np.ascontiguousarray(v.data.transpose(0, 2, 1, 3))[:, :, None]
    for a in (qh, kh, vh):
        ledger.observe(a)
    out = np.empty_like(qh)
    lse = np.empty(qh.shape[:-1], dtype=qh.dtype)
    ledger.observe(out)
    ledger.observe(lse)
    blocks = list(_key_ranges(run_start, s, block))
    for q0, q1, k0 in blocks:
        sc = np.matmul(qh[..., q0:q1, :], np.swapaxes(kh[..., k0:q1, :], -1, -2))
        ledger.observe(sc)
        sc *= scale
        _apply_mask(sc, _block_mask(q0, q1, k0, runs))
        m = sc.max(axis=-1, keepdims=True)
        np.subtract(sc, m, out=sc)
        np.exp(sc, out=sc)
        l = sc.sum(axis=-1, keepdims=True)
        out[..., q0:q1, :] = np.matmul(sc, vh[..., k0:q1, :]) / l
        lse[..., q0:q1] = (m + np.log(l))[..., 0]
        del sc

    def bw(g):
        dout = np.ascontiguousarray(g.reshape(bs, s, Hkv, G, d).transpose(0, 2, 3, 1, 4))
        ledger.observe(dout)
        D = (dout * out).sum(axis=-1)
        dq = np.zeros_like(qh)
        dk = np.zeros(kh.shape[:2] + kh.shape[3:], dtype=kh.dtype)
        dv = np.zeros_like(dk)
        for a in (dq, dk, dv):
            ledger.observe(a)
        for q0, q1, k0 in blocks:
            sc = np.matmul(qh[..., q0:q1, :], np.swapaxes(kh[..., k0:q1, :], -1, -2))
            ledger.observe(sc)
            sc *= scale
            _apply_mask(sc, _block_mask(q0, q1, k0, runs))
            sc -= lse[..., q0:q1, None]
            np.exp(sc, out=sc)  # probabilities
            dob = dout[..., q0:q1, :]
            dv[..., k0:q1, :] += np.matmul(np.swapaxes(sc, -1, -2), dob).sum(axis=2)
            dp = np.matmul(dob, np.swapaxes(vh[..., k0:q1, :], -1, -2))
            dp -= D[..., q0:q1, None]
            sc *= dp
            sc *= scale  # now dScores
            dq[..., q0:q1, :] = np.matmul(sc, kh[..., k0:q1, :])
            dk[..., k0:q1, :] += np.matmul(np.swapaxes(sc, -1, -2), qh[..., q0:q1, :]).sum(axis=2)
            del sc, dp
        gq = dq.transpose(0, 3, 1, 2, 4).reshape(bs, s, Hq, d)
        gk = dk.transpose(0, 2, 1, 3)
        gv = dv.transpose(0, 2, 1, 3)
        return np.ascontiguousarray(gq), np.ascontiguousarray(gk), np.ascontiguousarray(gv)

    result = out.transpose(0, 3, 1, 2, 4).reshape(bs, s, Hq, d)
    return ag.make_result(np.ascontiguousarray(result), (q, k, v), bw, "attention")


class AttentionCallback(Protocol):
    def __call__(self, q: Tensor, k: Tensor, v: Tensor, position_ids: np.ndarray) -> Tensor: ...


@dataclass
class CausalAttention:
    """Plain causal attention over the whole (possibly packed) sequence."""

    block: int = 16

    def __call__(self, q, k, v, position_ids):
        return blockwise_attention(q, k, v, position_ids, block_causal=False, block=self.block)


@dataclass
class BlockCausalAttention:
    """Causal attention restricted to each packed sample (runs of position ids)."""

    block: int = 16

    def __call__(self, q, k, v, position_ids):
        return blockwise_attention(q, k, v, position_ids, block_causal=True, block=self.block)


def make_attention(kind: str, block: int = 16) -> AttentionCallback:
    if kind == "causal":
        return CausalAttention(block)
    if kind in ("block_causal", "packed"):
        return BlockCausalAttention(block)
    raise ConfigError(f"unknown attention kind {kind!r}", "features.attention",
                      "use 'causal' or 'block_causal'")


# ---------------------------------------------------------------------------
# the model
# ---------------------------------------------------------------------------

def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    h, I = cfg.hidden_size, cfg.intermediate
    dt = ag.default_dtype()

    def w(*shape, std=None):
        std = std if std is not None else 1.0 / math.sqrt(shape[-1])
        return Tensor(rng.normal(0.0, std, size=shape).astype(dt), requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n, dtype=dt), requires_grad=True)

    p = {
        "embed": w(cfg.vocab_size, h, std=1.0),
        "pos_embed": w(cfg.max_position, h, std=0.1),
    }
    for i in range(cfg.n_layers):
        p[f"layers.{i}.attn_norm"] = ones(h)
        p[f"layers.{i}.wq"] = w(h, h)
        p[f"layers.{i}.wk"] = w(cfg.kv_dim, h)
        p[f"layers.{i}.wv"] = w(cfg.kv_dim, h)
        p[f"layers.{i}.wo"] = w(h, h, std=1.0 / math.sqrt(2 * h * cfg.n_layers))
        p[f"layers.{i}.mlp_norm"] = ones(h)
        p[f"layers.{i}.w_gate"] = w(I, h)
        p[f"layers.{i}.w_up"] = w(I, h)
        p[f"layers.{i}.w_down"] = w(h, I, std=1.0 / math.sqrt(2 * I * cfg.n_layers))
    p["final_norm"] = ones(h)
    p["lm_head"] = w(cfg.vocab_size, h)
    for name, t in p.items():
        t.name = name
    return p


def mlp(params: dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    """Gated MLP: down(silu(gate(x)) * up(x))."""
    gate = ag.linear(x, params[prefix + "w_gate"])
    up = ag.linear(x, params[prefix + "w_up"])
    return ag.linear(ag.mul(ag.silu(gate), up), params[prefix + "w_down"])


@dataclass
class LayerOptions:
    """How each decoder layer is executed (all choices give identical numbers)."""

    checkpoint: str = "none"  # "none" | "ckpt" | "offload"
    tiled_mlp: bool = False
    mlp_tiles: int | None = None
    mlp_tile_len: int | None = None


class Transformer:
    def __init__(self, cfg: ModelConfig, seed: int = 0, params: dict[str, Tensor] | None = None):
        self.cfg = cfg
        self.seed = seed
        self.params = params if params is not None else init_params(cfg, seed)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def register(self, led: "ledger.MemoryLedger") -> None:
        """Account the weights in ``led`` under the ``weights`` tag."""
        for p in self.params.values():
            h = led.observe(p.data, tag="weights")
            led.retag(h, "weights")

    # -- forward ------------------------------------------------------------------
    def layer(self, i: int, x: Tensor, position_ids: np.ndarray, attention: AttentionCallback,
              opts: LayerOptions) -> Tensor:
        cfg, P = self.cfg, self.params
        pre = f"layers.{i}."
        bs, s, h = x.shape
        d = cfg.head_dim
        a = ag.rms_norm(x, P[pre + "attn_norm"], cfg.norm_eps)
        q = ag.linear(a, P[pre + "wq"]).reshape(bs, s, cfg.q_heads, d)
        k = ag.linear(a, P[pre + "wk"]).reshape(bs, s, cfg.kv_heads, d)
        v = ag.linear(a, P[pre + "wv"]).reshape(bs, s, cfg.kv_heads, d)
        o = attention(q, k, v, position_ids)
        x = ag.add(x, ag.linear(o.reshape(bs, s, h), P[pre + "wo"]))
        m = ag.rms_norm(x, P[pre + "mlp_norm"], cfg.norm_eps)
        if opts.tiled_mlp:
            from .tiled import tiled_mlp
            y = tiled_mlp(P, pre, m, num_tiles=opts.mlp_tiles, tile_len=opts.mlp_tile_len)
        else:
            y = mlp(P, pre, m)
        return ag.add(x, y)

    def embed(self, input_ids: np.ndarray, position_ids: np.ndarray) -> Tensor:
        ids = np.asarray(input_ids)
        pos = np.asarray(position_ids)
        if ids.ndim != 2 or pos.shape != ids.shape:
            raise ShapeError(f"input_ids {ids.shape} and position_ids {pos.shape} must both be [bs, s]")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            bad = ids[(ids < 0) | (ids >= self.cfg.vocab_size)][0]
            raise ValidationError(f"token id {bad} outside vocabulary [0, {self.cfg.vocab_size})")
        if pos.size and (pos.min() < 0 or pos.max() >= self.cfg.max_position):
            raise ValidationError(
                f"position ids must lie in [0, {self.cfg.max_position}); got range "
                f"[{pos.min()}, {pos.max()}]"
            )
        return ag.add(ag.embedding(self.params["embed"], ids), ag.embedding(self.params["pos_embed"], pos))

    def forward(self, input_ids, position_ids, attention: AttentionCallback,
                opts: LayerOptions | None = None) -> Tensor:
        opts = opts or LayerOptions()
        pos = np.asarray(position_ids)
        x = self.embed(input_ids, pos)
        for i in range(self.cfg.n_layers):
            fn = _LayerFn(self, i, pos, attention, opts)
            if opts.checkpoint == "ckpt":
                x = ag.checkpoint(fn, x)
            elif opts.checkpoint == "offload":
                from .offload import checkpoint_offload
                x = checkpoint_offload(fn, x)
            elif opts.checkpoint == "none":
                x = fn(x)
            else:
                raise ConfigError(f"unknown checkpoint mode {opts.checkpoint!r}", "features.ckpt")
        return ag.rms_norm(x, self.params["final_norm"], self.cfg.norm_eps)

    __call__ = forward


class _LayerFn:
    def __init__(self, model: Transformer, i: int, pos, attention, opts):
        self.model, self.i, self.pos, self.attention, self.opts = model, i, pos, attention, opts

    def __call__(self, x: Tensor) -> Tensor:
        return self.model.layer(self.i, x, self.pos, self.attention, self.opts)


def lm_head_and_loss(hidden: Tensor, w_lm: Tensor, shift_labels) -> tuple[Tensor, int]:
    """Untiled reference: cross_entropy(hidden @ w_lm^T, labels) as (sum, count)."""
    h = hidden.shape[-1]
    flat = hidden.reshape(-1, h)
    with ledger.scope("logits"):
        logits = ag.linear(flat, w_lm)
        return ag.cross_entropy(logits, np.asarray(shift_labels).reshape(-1))


LossFn = Callable[[Tensor, Tensor, np.ndarray], "tuple[Tensor, int]"]
