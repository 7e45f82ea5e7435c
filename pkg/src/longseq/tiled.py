"""Sequence-tiled execution with per-tile recompute in backward.

A token-local function is run one tile of the sequence axis at a time. Only
the tile's intermediates are ever live: the forward keeps nothing but the
input, and backward re-runs each tile under autograd, differentiates it, and
drops it before moving to the next tile. Parameter gradients accumulate in
ascending tile order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from . import ledger
from .autograd import Tensor
from .errors import ContractViolation, ShapeError, ValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TileSpec:
    """Tile boundaries along one axis: tile t covers [bounds[t], bounds[t+1])."""

    bounds: tuple[int, ...]
    dim: int = 1

    def __post_init__(self) -> None:
        b = self.bounds
        if len(b) < 2 or b[0] != 0 or any(b[i] >= b[i + 1] for i in range(len(b) - 1)):
            raise ValidationError(f"tile bounds {list(b)} do not partition [0, s)")

    @classmethod
    def uniform(cls, s: int, tile_len: int, dim: int = 1) -> "TileSpec":
        """ceil(s / tile_len) tiles of tile_len tokens; the last may be shorter."""
        if tile_len < 1 or s < 1:
            raise ValidationError(f"need s >= 1 and tile_len >= 1, got s={s}, tile_len={tile_len}")
        return cls(tuple(range(0, s, tile_len)) + (s,), dim)

    @classmethod
    def split(cls, s: int, num_tiles: int, dim: int = 1) -> "TileSpec":
        """``num_tiles`` tiles of length ceil(s / num_tiles) (the last may be shorter)."""
        if num_tiles < 1:
            raise ValidationError(f"num_tiles must be >= 1, got {num_tiles}")
        num_tiles = min(num_tiles, s)
        spec = cls.uniform(s, math.ceil(s / num_tiles), dim)
        if spec.num_tiles != num_tiles:
            # e.g. s=10, n=4 -> ceil gives 3 tiles; fall back to near-equal sizes
            edges = np.linspace(0, s, num_tiles + 1).round().astype(int)
            spec = cls(tuple(int(e) for e in edges), dim)
        return spec

    @property
    def num_tiles(self) -> int:
        return len(self.bounds) - 1

    @property
    def length(self) -> int:
        return self.bounds[-1]

    @property
    def max_tile(self) -> int:
        return max(self.bounds[i + 1] - self.bounds[i] for i in range(self.num_tiles))

    def tiles(self):
        for t in range(self.num_tiles):
            yield self.bounds[t], self.bounds[t + 1]


def _slice(dim: int, a: int, b: int) -> tuple:
    return (slice(None),) * dim + (slice(a, b),)


def check_token_locality(fn: Callable[[Tensor], Tensor], x: np.ndarray, spec: TileSpec,
                         seed: int = 0, atol: float = 0.0) -> None:
    """Perturb each following tile and verify the current tile's output is unchanged."""
    rng = np.random.default_rng(seed)
    dim = spec.dim
    with ag.no_grad():
        for (a, b), (_, c) in zip(spec.tiles(), list(spec.tiles())[1:]):
            pair = np.array(x[_slice(dim, a, c)], copy=True)
            ref = fn(Tensor(pair)).data[_slice(dim, 0, b - a)]
            pair[_slice(dim, b - a, c - a)] += rng.normal(size=pair[_slice(dim, b - a, c - a)].shape)
            got = fn(Tensor(pair)).data[_slice(dim, 0, b - a)]
            if not np.allclose(ref, got, rtol=0.0, atol=atol):
                raise ContractViolation(
                    f"tiled function output for tokens [{a}, {b}) depends on tokens [{b}, {c})"
                )


def tiled_compute(fn: Callable[[Tensor], Tensor], x: Tensor, spec: TileSpec,
                  check_locality: bool = False) -> Tensor:
    """Apply token-local ``fn`` tile by tile; values equal ``fn(x)`` exactly.

    ``fn`` may close over parameter leaves; their gradients accumulate
    directly, tile by tile, during backward.
    """
    dim = spec.dim
    if x.shape[dim] != spec.length:
        raise ShapeError(f"tile spec covers {spec.length} tokens but axis {dim} has {x.shape[dim]}")
    if check_locality:
        check_token_locality(fn, x.data, spec)
    xd = x.data
    out = None
    with ag.no_grad():
        for a, b in spec.tiles():
            y = fn(Tensor(xd[_slice(dim, a, b)])).data
            if out is None:
                shape = list(y.shape)
                shape[dim] = spec.length
                out = np.empty(shape, dtype=y.dtype)
                ledger.observe(out)
            out[_slice(dim, a, b)] = y
            del y
    req = x.requires_grad

    def bw(g):
        gx = np.zeros_like(xd) if req else None
        if gx is not None:
            ledger.observe(gx)
        for a, b in spec.tiles():
            leaf = Tensor(xd[_slice(dim, a, b)], requires_grad=req)
            leaf.grad_tag = "workspace"
            with ag.enable_grad():
                y = fn(leaf)
            if y.requires_grad:
                ag.backward(y, np.ascontiguousarray(g[_slice(dim, a, b)]))
            if req and leaf.grad is not None:
                gx[_slice(dim, a, b)] = leaf.grad
            del y, leaf
        return (gx,)

    return ag.make_result(out, (x,), bw, "tiled_compute", collective=True)


def default_mlp_tiles(seqlen: int, hidden_size: int) -> int:
    """Tile count ceil(seqlen / hidden_size): each tile is about hidden_size tokens."""
    return max(1, math.ceil(seqlen / hidden_size))


def mlp_tile_count(s: int, hidden_size: int, num_tiles: int | None = None,
                   tile_len: int | None = None) -> int:
    if num_tiles:
        return min(num_tiles, s)
    if tile_len:
        return max(1, math.ceil(s / tile_len))
    return default_mlp_tiles(s, hidden_size)


def tiled_mlp(params: dict[str, Tensor], prefix: str, hidden: Tensor,
              num_tiles: int | None = None, tile_len: int | None = None) -> Tensor:
    """Gated MLP over sequence tiles; ceil(s / hidden_size) tiles unless overridden."""
    from .model import mlp

    s, h = hidden.shape[1], hidden.shape[-1]
    n = mlp_tile_count(s, h, num_tiles, tile_len)
    if n <= 1:
        return mlp(params, prefix, hidden)
    spec = TileSpec.split(s, n, dim=1)
    return tiled_compute(lambda t: mlp(params, prefix, t), hidden, spec)


def logits_tile_len(vocab: int, element_bytes: int, budget_bytes: int) -> int:
    """Largest tile length whose [tile, V] logits fit ``budget_bytes``."""
    return max(1, budget_bytes // (vocab * element_bytes))


def tiled_logits_loss(hidden: Tensor, w_lm: Tensor, shift_labels, spec: TileSpec | None = None,
                      budget_bytes: int = 1 << 20, ignore_index: int = ag.IGNORE_INDEX):
    """Fused LM head + cross-entropy over sequence tiles.

    Returns ``(loss_sum, valid_count)`` equal to the untiled computation. At
    most one ``[tile, V]`` logits block (plus its softmax) is live at a time,
    in forward and in backward.
    """
    h = hidden.shape[-1]
    V = w_lm.shape[0]
    hd = hidden.data.reshape(-1, h)
    labels = np.asarray(shift_labels, dtype=np.int64).reshape(-1)
    t = hd.shape[0]
    if labels.shape[0] != t:
        raise ShapeError(f"{labels.shape[0]} labels for {t} hidden rows")
    if spec is None:
        spec = TileSpec.uniform(t, logits_tile_len(V, hd.itemsize, budget_bytes), dim=0)
    elif spec.length != t:
        raise ShapeError(f"tile spec covers {spec.length} rows but there are {t}")
    wd = w_lm.data
    nll = np.empty(t, dtype=hd.dtype)
    with ledger.scope("logits"):
        for a, b in spec.tiles():
            logits = np.einsum("ti,vi->tv", hd[a:b], wd, optimize=False)
            ledger.observe(logits)
            nll[a:b] = ag.token_nll(logits, labels[a:b], ignore_index)[0]
            del logits
    count = int((labels != ignore_index).sum())
    loss = np.asarray(nll.sum(), dtype=hd.dtype)
    rh, rw = hidden.requires_grad, w_lm.requires_grad
    hshape = hidden.shape

    def bw(g):
        gh = np.zeros_like(hd) if rh else None
        gw = np.zeros_like(wd) if rw else None
        for arr in (gh, gw):
            if arr is not None:
                ledger.observe(arr)
        with ledger.scope("logits"):
            for a, b in spec.tiles():
                logits = np.einsum("ti,vi->tv", hd[a:b], wd, optimize=False)
                ledger.observe(logits)
                _, probs, valid = ag.token_nll(logits, labels[a:b], ignore_index)
                del logits
                rows = np.flatnonzero(valid)
                probs[rows, labels[a:b][rows]] -= 1.0
                probs[~valid] = 0.0
                probs *= g
                if rh:
                    gh[a:b] = probs @ wd
                if rw:
                    gw += probs.T @ hd[a:b]
                del probs
        return (gh.reshape(hshape) if rh else None, gw)

    out = ag.make_result(loss, (hidden, w_lm), bw, "tiled_logits_loss")
    return out, count
