"""Sequence-parallel data pipeline.

Labels are shifted *before* the sequence is cut into shards, so the first
token of shard k+1 is still the target of the last token of shard k. Pads
use token 0, label -100 and their own position run, so they neither receive
nor leak attention under block-causal masking and add nothing to the loss.
"""

from __future__ import annotations

import functools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ShardingError, ValidationError

log = logging.getLogger(__name__)

IGNORE_INDEX = -100
PAD_TOKEN = 0


@dataclass
class Batch:
    """[bs, s] integer arrays; ``labels`` are already shifted."""

    input_ids: np.ndarray
    position_ids: np.ndarray
    shift_labels: np.ndarray

    def __post_init__(self) -> None:
        self.input_ids = np.atleast_2d(np.asarray(self.input_ids, dtype=np.int64))
        self.position_ids = np.atleast_2d(np.asarray(self.position_ids, dtype=np.int64))
        self.shift_labels = np.atleast_2d(np.asarray(self.shift_labels, dtype=np.int64))
        if not (self.input_ids.shape == self.position_ids.shape == self.shift_labels.shape):
            raise ValidationError(
                f"batch arrays disagree: ids {self.input_ids.shape}, positions "
                f"{self.position_ids.shape}, labels {self.shift_labels.shape}"
            )

    @property
    def seqlen(self) -> int:
        return self.input_ids.shape[1]


@dataclass
class ShardedBatch(Batch):
    rank: int = 0
    world_size: int = 1
    source_rank: int = 0
    global_seqlen: int = 0


def preshift_labels(labels) -> np.ndarray:
    """out[i] = labels[i+1]; the last position gets -100. Works on the last axis."""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.full_like(labels, IGNORE_INDEX)
    out[..., :-1] = labels[..., 1:]
    return out


def make_batch(input_ids, position_ids=None) -> Batch:
    """Batch from raw token ids; labels are the ids shifted left by one."""
    ids = np.atleast_2d(np.asarray(input_ids, dtype=np.int64))
    if position_ids is None:
        position_ids = np.broadcast_to(np.arange(ids.shape[1]), ids.shape)
    return Batch(ids, np.array(position_ids), preshift_labels(ids))


def pad_to_multiple(batch: Batch, multiple: int) -> Batch:
    """Right-pad to a multiple of ``multiple`` with inert pad tokens."""
    s = batch.seqlen
    n = (-s) % multiple
    if n == 0:
        return batch
    bs = batch.input_ids.shape[0]
    pad_ids = np.full((bs, n), PAD_TOKEN, dtype=np.int64)
    pad_pos = np.broadcast_to(np.arange(n), (bs, n))  # a fresh run starting at 0
    pad_lab = np.full((bs, n), IGNORE_INDEX, dtype=np.int64)
    return Batch(
        np.concatenate([batch.input_ids, pad_ids], axis=1),
        np.concatenate([batch.position_ids, pad_pos], axis=1),
        np.concatenate([batch.shift_labels, pad_lab], axis=1),
    )


def shard_sequence(batch: Batch, world_size: int, source_rank: int = 0,
                   check_shifted: bool = True) -> list[ShardedBatch]:
    """Contiguous equal slices along the sequence, in rank order."""
    s = batch.seqlen
    if s % world_size:
        raise ShardingError(
            f"sequence length {s} is not divisible by SP degree {world_size}; pad it first"
        )
    if check_shifted and world_size > 1 and (batch.shift_labels[:, -1] != IGNORE_INDEX).any():
        log.warning("last label is not -100; were the labels shifted before sharding?")
    n = s // world_size
    return [
        ShardedBatch(
            batch.input_ids[:, r * n:(r + 1) * n],
            batch.position_ids[:, r * n:(r + 1) * n],
            batch.shift_labels[:, r * n:(r + 1) * n],
            rank=r, world_size=world_size, source_rank=source_rank, global_seqlen=s,
        )
        for r in range(world_size)
    ]


def naive_shard_then_shift(input_ids, world_size: int) -> list[ShardedBatch]:
    """The defective order: shard first, then shift inside each shard.

    Each non-final shard loses the label that lives in the next shard. Kept
    only as a regression reference.
    """
    ids = np.atleast_2d(np.asarray(input_ids, dtype=np.int64))
    s = ids.shape[1]
    n = s // world_size
    out = []
    for r in range(world_size):
        chunk = ids[:, r * n:(r + 1) * n]
        out.append(ShardedBatch(chunk, np.broadcast_to(np.arange(r * n, (r + 1) * n), chunk.shape),
                                preshift_labels(chunk), rank=r, world_size=world_size,
                                global_seqlen=s))
    return out


def deshard(shards: Sequence[Batch]) -> Batch:
    return Batch(
        np.concatenate([b.input_ids for b in shards], axis=1),
        np.concatenate([b.position_ids for b in shards], axis=1),
        np.concatenate([b.shift_labels for b in shards], axis=1),
    )


def supervised_pairs(shards: Sequence[Batch]) -> list[tuple[int, int, int]]:
    """(row, global position, label) for every non-ignored label across shards."""
    pairs = []
    offset = 0
    for b in shards:
        rows, cols = np.nonzero(b.shift_labels != IGNORE_INDEX)
        pairs.extend((int(r), int(c) + offset, int(b.shift_labels[r, c])) for r, c in zip(rows, cols))
        offset += b.seqlen
    return sorted(pairs)


def sp_over_dp_iterator(source_loaders: Sequence[Iterable[Batch]], group) -> Iterator[ShardedBatch]:
    """Process every rank's batches collaboratively, one source rank at a time.

    ``source_loaders[k]`` is rank k's data stream. Every rank holds all the
    (deterministic) streams, so the iteration needs no extra collectives.
    Order: batch 0 of rank 0, batch 0 of rank 1, ..., batch 1 of rank 0, ...
    Stops at the shortest stream.
    """
    P = group.world_size
    if len(source_loaders) != P:
        raise ShardingError(f"need one source loader per rank ({P}), got {len(source_loaders)}")
    its = [iter(l) for l in source_loaders]
    step = 0
    while True:
        row = []
        for k, it in enumerate(its):
            try:
                row.append(next(it))
            except StopIteration:
                if k > 0 or any(next(o, None) is not None for o in its[1:]):
                    log.warning("source streams have different lengths; stopping at the shortest "
                                "after %d full rounds", step)
                return
        for k, b in enumerate(row):
            b = pad_to_multiple(b, P)
            yield shard_sequence(b, P, source_rank=k)[group.rank]
        step += 1


# ---------------------------------------------------------------------------
# sources
# ---------------------------------------------------------------------------

def pack_samples(samples: Sequence[Sequence[int]]) -> Batch:
    """Concatenate samples into one row; position ids restart at 0 per sample.

    Labels are shifted per sample, so no sample predicts the next one's first token.
    """
    ids, pos, lab = [], [], []
    for smp in samples:
        smp = np.asarray(smp, dtype=np.int64)
        ids.append(smp)
        pos.append(np.arange(smp.size))
        lab.append(preshift_labels(smp))
    return Batch(np.concatenate(ids)[None], np.concatenate(pos)[None], np.concatenate(lab)[None])


@dataclass
class SyntheticCorpus:
    """Seeded token sequences with learnable structure (noisy arithmetic progressions)."""

    vocab_size: int
    seqlen: int
    seed: int = 0
    packed_sample_len: int | None = None
    noise: float = 0.1

    def sample(self, index: int) -> Batch:
        # every rank of an SP group reads the same samples; share the work
        return _synthetic_sample(self.vocab_size, self.seqlen, self.seed, self.packed_sample_len,
                                 self.noise, index)


@functools.lru_cache(maxsize=64)
def _synthetic_sample(vocab: int, seqlen: int, seed: int, packed_len: int | None, noise: float,
                      index: int) -> Batch:
    rng = np.random.default_rng([seed, index])
    if packed_len:
        lens = []
        left = seqlen
        while left > 0:
            n = int(min(left, rng.integers(max(1, packed_len // 2), packed_len + 1)))
            lens.append(n)
            left -= n
        return pack_samples([_tokens(rng, n, vocab, noise) for n in lens])
    return make_batch(_tokens(rng, seqlen, vocab, noise)[None])


def _tokens(rng, n: int, vocab: int, noise: float) -> np.ndarray:
    start = rng.integers(0, vocab)
    stride = rng.integers(1, 4)
    toks = (start + stride * np.arange(n)) % vocab
    flip = rng.random(n) < noise
    toks[flip] = rng.integers(0, vocab, size=int(flip.sum()))
    return toks.astype(np.int64)


@dataclass
class StridedSource:
    """Every ``stride``-th sample of a corpus starting at ``offset``, ``length`` samples long."""

    corpus: SyntheticCorpus | "JsonlCorpus"
    offset: int
    stride: int
    length: int

    def __iter__(self) -> Iterator[Batch]:
        for i in range(self.length):
            yield self.corpus.sample(self.offset + i * self.stride)


@dataclass
class JsonlCorpus:
    """Newline-delimited JSON records, each a list of token ids (or {"input_ids": [...]})."""

    path: str
    records: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.records:
            self.records = list(read_jsonl(self.path))
        if not self.records:
            raise ValidationError(f"{self.path}: no records")

    def sample(self, index: int) -> Batch:
        return make_batch(np.asarray(self.records[index % len(self.records)])[None])


def read_jsonl(path: str) -> Iterator[list[int]]:
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        if isinstance(rec, dict):
            rec = rec.get("input_ids")
        if not isinstance(rec, list) or not all(isinstance(t, int) for t in rec):
            raise ValidationError(f"{path}:{lineno}: expected a list of integer token ids")
        yield rec


def write_jsonl(path: str, samples: Iterable[Sequence[int]]) -> None:
    with open(path, "w") as f:
        for smp in samples:
            f.write(json.dumps([int(t) for t in smp]) + "\n")
