"""Reverse-mode automatic differentiation over dense numpy arrays.

The graph is recorded as :class:`Node` objects that point at their input
*edges* (producer nodes or leaf accumulators), never at input data. A node
keeps exactly the arrays its backward rule closes over, and drops them once
backward has run, so buffer lifetimes follow the usual framework behaviour.

Forward contractions use a non-BLAS ``einsum`` kernel: every output row is
computed the same way no matter how many rows are in the call, which makes
sequence-tiled execution bit-identical to untiled execution.
"""

from __future__ import annotations

import contextlib
import hashlib
import itertools
import weakref
from contextvars import ContextVar
from typing import Callable, Iterator, Sequence

import numpy as np

from . import ledger
from .errors import DeterminismError, ShapeError, ValidationError

_grad_enabled: ContextVar[bool] = ContextVar("grad_enabled", default=True)
_default_dtype: ContextVar[type] = ContextVar("default_dtype", default=np.float64)
_seq = itertools.count()

FLOAT_TYPES = (np.float32, np.float64)
IGNORE_INDEX = -100


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


@contextlib.contextmanager
def enable_grad() -> Iterator[None]:
    token = _grad_enabled.set(True)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Set the default float width ("float64" or "float32") for new tensors."""
    dtype = {"float64": np.float64, "float32": np.float32}[name]
    token = _default_dtype.set(dtype)
    try:
        yield
    finally:
        _default_dtype.reset(token)


def default_dtype() -> type:
    return _default_dtype.get()


class Node:
    __slots__ = ("seq", "name", "inputs", "backward", "out_meta", "collective", "__weakref__")

    def __init__(self, name, inputs, backward, out_meta, collective=False):
        self.seq = next(_seq)
        self.name = name
        self.inputs = inputs
        self.backward = backward
        self.out_meta = out_meta
        self.collective = collective

    def __repr__(self) -> str:
        return f"Node({self.name}#{self.seq})"


class _Leaf:
    __slots__ = ("ref",)

    def __init__(self, tensor: "Tensor"):
        self.ref = weakref.ref(tensor)


class Tensor:
    """Dense float array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "grad_tag", "_edge", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        native = isinstance(data, np.ndarray) or isinstance(data, np.generic)
        arr = np.asarray(data)
        if dtype is None:
            # python numbers follow the precision mode; float arrays keep their width
            dtype = arr.dtype.type if native and arr.dtype.type in FLOAT_TYPES else _default_dtype.get()
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.grad_tag = "grads"
        self._edge = None
        self.name = name
        ledger.observe(arr)

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        backward(self, grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _edge_of(t) -> object:
    if not isinstance(t, Tensor) or not t.requires_grad:
        return None
    if t._edge is None:
        t._edge = _Leaf(t)
    return t._edge


def make_result(data, inputs: Sequence, backward: Callable, name: str, collective: bool = False):
    """Wrap ``data`` as a Tensor whose gradient flows to ``inputs`` via ``backward``.

    ``backward(g)`` receives the upstream gradient array and returns one
    gradient (or None) per input.
    """
    out = Tensor(data)
    if _grad_enabled.get() and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        node = Node(name, tuple(_edge_of(t) for t in inputs), backward,
                    ((out.shape, out.dtype),), collective)
        out.requires_grad = True
        out._edge = (node, 0)
    return out


def make_results(datas: Sequence, inputs: Sequence, backward: Callable, name: str,
                 collective: bool = False) -> list[Tensor]:
    """Multi-output variant: ``backward(gs)`` gets one gradient per output (zeros if unused)."""
    outs = [Tensor(d) for d in datas]
    if _grad_enabled.get() and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        node = Node(name, tuple(_edge_of(t) for t in inputs), backward,
                    tuple((o.shape, o.dtype) for o in outs), collective)
        for i, o in enumerate(outs):
            o.requires_grad = True
            o._edge = (node, i)
    return outs


# ---------------------------------------------------------------------------
# backward driver
# ---------------------------------------------------------------------------

def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match leaf shape {t.shape}")
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
        ledger.observe(t.grad, tag=t.grad_tag)
    else:
        t.grad += g


def backward(tensors, grads=None, retain_graph: bool = False) -> None:
    """Accumulate d(sum of roots * grads)/d(leaf) into every reachable leaf's ``grad``.

    Nodes run in reverse creation order, which is a reverse topological order
    and is identical across SPMD ranks that built the same graph.
    """
    if isinstance(tensors, Tensor):
        tensors = [tensors]
        grads = [grads]
    elif grads is None:
        grads = [None] * len(tensors)
    pending: dict[Node, list] = {}

    def route(edge, g) -> None:
        if edge is None or g is None:
            return
        if isinstance(edge, _Leaf):
            t = edge.ref()
            if t is not None:
                _accumulate_leaf(t, g)
            return
        node, idx = edge
        ledger.observe(g)
        slot = pending.setdefault(node, [None] * len(node.out_meta))
        slot[idx] = g if slot[idx] is None else slot[idx] + g

    roots = []
    for t, g in zip(tensors, grads):
        if not t.requires_grad:
            raise ValidationError("backward() on a tensor that does not require grad")
        if g is None:
            if t.data.size != 1:
                raise ValidationError("implicit gradient only defined for scalar outputs")
            g = np.ones_like(t.data)
        g = np.asarray(g, dtype=t.dtype)
        if isinstance(t._edge, tuple):
            roots.append(t._edge[0])
        route(_edge_of(t), g)

    seen: set = set()
    stack = list(roots)
    while stack:
        node = stack.pop()
        if node in seen:
            continue
        seen.add(node)
        for e in node.inputs:
            if isinstance(e, tuple) and e[0] not in seen:
                stack.append(e[0])

    for node in sorted(seen, key=lambda n: n.seq, reverse=True):
        gs = pending.pop(node, None)
        if gs is None and not node.collective:
            continue
        if gs is None:
            gs = [None] * len(node.out_meta)
        for i, (shape, dtype) in enumerate(node.out_meta):
            if gs[i] is None:
                gs[i] = np.zeros(shape, dtype=dtype)
        fn = node.backward
        if fn is None:
            raise RuntimeError(f"{node} was already differentiated; graph buffers are freed")
        in_grads = fn(gs[0] if len(gs) == 1 else gs)
        if not retain_graph:
            node.backward = None
        del gs
        for edge, g in zip(node.inputs, in_grads):
            route(edge, g)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_operands(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        c = float(b)
        return make_result(a.data * c, (a,), lambda g: (g * c,), "scale")
    a, b = _binary_operands(a, b)
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if ra else None,
                _unbroadcast(g * ad, bd.shape) if rb else None)

    return make_result(ad * bd, (a, b), bw, "mul")


def rowwise_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a[..., m, k] @ b[k, n] with row-partition-invariant results."""
    return np.einsum("...mk,kn->...mn", a, b, optimize=False)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a[..., m, k] @ b[k, n]  or  a[..., m, k] @ b[..., k, n] (same batch dims)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
        b.ndim > 2 and b.shape[:-2] != a.shape[:-2]
    ):
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        out = rowwise_matmul(ad, bd)
    else:
        out = np.einsum("...mk,...kn->...mn", ad, bd, optimize=False)
    ra, rb = a.requires_grad, b.requires_grad

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if ra else None
        gb = None
        if rb:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return make_result(out, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor) -> Tensor:
    """x[..., i] @ w[o, i]^T."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear dimension mismatch: input {x.shape} vs weight {w.shape}")
    xd, wd = x.data, w.data
    out = np.einsum("...i,oi->...o", xd, wd, optimize=False)
    rx, rw = x.requires_grad, w.requires_grad

    def bw(g):
        gx = np.matmul(g, wd) if rx else None
        gw = g.reshape(-1, g.shape[-1]).T @ xd.reshape(-1, xd.shape[-1]) if rw else None
        return gx, gw

    return make_result(out, (x, w), bw, "linear")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(x.data, axes), (x,),
                       lambda g: (np.transpose(g, inv),), "transpose")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices sum their gradients."""
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    shape, dtype = x.shape, x.dtype

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        gm = np.moveaxis(g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(np.moveaxis(gx, axis, 0), idx, gm)
        return (gx,)

    return make_result(np.take(x.data, idx, axis=axis), (x,), bw, "take")


def embedding(weight: Tensor, ids) -> Tensor:
    return take(weight, ids, axis=0)


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.ndim
    shape, dtype = x.shape, x.dtype
    sl = (slice(None),) * axis + (slice(start, stop),)

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        gx[sl] = g
        return (gx,)

    return make_result(x.data[sl], (x,), bw, "narrow")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    axis = axis % xs[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def bw(g):
        return tuple(g[(slice(None),) * axis + (slice(bounds[i], bounds[i + 1]),)]
                     for i in range(len(xs)))

    return make_result(np.concatenate([t.data for t in xs], axis=axis), xs, bw, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    axis = axis % x.ndim
    bounds = np.cumsum([0] + list(sizes))
    if bounds[-1] != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    parts = [np.ascontiguousarray(x.data[(slice(None),) * axis + (slice(bounds[i], bounds[i + 1]),)])
             for i in range(len(sizes))]

    def bw(gs):
        return (np.concatenate(gs, axis=axis),)

    return make_results(parts, (x,), bw, "split")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def rsqrt(x: Tensor) -> Tensor:
    y = 1.0 / np.sqrt(x.data)
    return make_result(y, (x,), lambda g: (-0.5 * g * y ** 3,), "rsqrt")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = 1.0 / (1.0 + np.exp(-xd))
    ledger.observe(s)

    def bw(g):
        return (g * s * (1.0 + xd * (1.0 - s)),)

    return make_result(xd * s, (x,), bw, "silu")


def softmax_lastdim(x: Tensor) -> Tensor:
    """Row softmax with max subtraction; entries at -1e30 come out exactly 0."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), bw, "softmax")


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    inv = rsqrt(add(mean(mul(x, x), axis=-1, keepdims=True), eps))
    return mul(mul(x, inv), weight)


def _check_labels(labels: np.ndarray, vocab: int, ignore_index: int) -> None:
    bad = (labels != ignore_index) & ((labels < 0) | (labels >= vocab))
    if bad.any():
        first = labels[bad][0]
        raise ValidationError(
            f"label {first} out of range [0, {vocab}) and not ignore_index={ignore_index}"
        )


def token_nll(logits: np.ndarray, labels: np.ndarray, ignore_index: int = IGNORE_INDEX):
    """Per-row negative log-likelihood (0 on ignored rows), probabilities, valid mask."""
    _check_labels(labels, logits.shape[-1], ignore_index)
    valid = labels != ignore_index
    safe = np.where(valid, labels, 0)
    m = logits.max(axis=-1, keepdims=True)
    probs = np.exp(logits - m)
    ledger.observe(probs)
    denom = probs.sum(axis=-1, keepdims=True)
    lse = np.log(denom)[:, 0] + m[:, 0]
    probs /= denom
    picked = logits[np.arange(logits.shape[0]), safe]
    nll = np.where(valid, lse - picked, 0.0)
    return nll, probs, valid


def cross_entropy(logits: Tensor, labels, ignore_index: int = IGNORE_INDEX):
    """Summed next-token NLL over non-ignored rows, and the count of those rows.

    Returns ``(loss_sum, valid_count)``; callers form the mean so that
    sharded ranks can reduce sums and counts separately.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [tokens, vocab] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {logits.shape[0]} logit rows")
    nll, probs, valid = token_nll(logits.data, labels, ignore_index)
    count = int(valid.sum())
    rows = np.flatnonzero(valid)
    picked = labels[rows]

    def bw(g):
        # reuses the saved probability buffer for the gradient
        probs[rows, picked] -= 1.0
        probs[~valid] = 0.0
        np.multiply(probs, g, out=probs)
        return (probs,)

    loss = make_result(np.asarray(nll.sum(), dtype=logits.dtype), (logits,), bw, "cross_entropy")
    return loss, count


# ---------------------------------------------------------------------------
# recompute-on-backward
# ---------------------------------------------------------------------------

def digest(arrays: Sequence[np.ndarray]) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.digest()


def _as_list(outs):
    return ([outs], True) if isinstance(outs, Tensor) else (list(outs), False)


def checkpoint(fn: Callable, *inputs: Tensor, pack: Callable | None = None,
               unpack: Callable | None = None):
    """Run ``fn`` without keeping intermediates; recompute them during backward.

    ``fn`` may read parameters through its closure (they must be leaves);
    their gradients are accumulated directly by the recomputation's backward.
    ``pack``/``unpack`` control how the saved inputs are stored, e.g. moved
    to host memory.
    """
    if not _grad_enabled.get():
        return fn(*inputs)
    with no_grad():
        outs = fn(*[Tensor(t.data) for t in inputs])
    outs_l, single = _as_list(outs)
    fingerprint = digest([o.data for o in outs_l])
    if pack is None:
        pack = _pack_checkpoint
    if unpack is None:
        unpack = _unpack_checkpoint
    saved = [pack(t.data) for t in inputs]
    req = [t.requires_grad for t in inputs]

    def bw(gs):
        if single:
            gs = [gs]
        leaves = []
        for s, r in zip(saved, req):
            leaf = Tensor(unpack(s), requires_grad=r)
            leaf.grad_tag = "workspace"
            leaves.append(leaf)
        with enable_grad():
            re_l, _ = _as_list(fn(*leaves))
        if digest([o.data for o in re_l]) != fingerprint:
            raise DeterminismError("checkpointed region produced different values on replay")
        pairs = [(o, g) for o, g in zip(re_l, gs) if o.requires_grad]
        if pairs:
            backward([p[0] for p in pairs], [p[1] for p in pairs])
        return tuple(leaf.grad if r else None for leaf, r in zip(leaves, req))

    res = make_results([o.data for o in outs_l], inputs, bw, "checkpoint", collective=True)
    return res[0] if single else res


def _pack_checkpoint(arr: np.ndarray) -> np.ndarray:
    led = ledger.current()
    if led is not None:
        led.retag(led.observe(arr), "activation-checkpoint")
    return arr


def _unpack_checkpoint(arr: np.ndarray) -> np.ndarray:
    return arr


def finite_diff_grad(f: Callable, x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (Tensor or array)."""
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def value(arr):
        with no_grad():
            out = f(Tensor(arr.copy()))
        return float(out.data) if isinstance(out, Tensor) else float(out)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = value(base)
        flat[i] = orig - eps
        lo = value(base)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad
