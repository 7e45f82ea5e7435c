"""Shift labels before sharding the sequence, never after.

Run: python demos/label_sharding.py
"""

import numpy as np

from longseq import data as D

ids = np.array([[1, 2, 3, 4, 5, 6, 7, 8]])
print("input ids            ", ids[0].tolist())
print("shift labels          ", D.make_batch(ids).shift_labels[0].tolist())
good = D.shard_sequence(D.make_batch(ids), 2)
bad = D.naive_shard_then_shift(ids, 2)
print("shift, then shard     ", [s.shift_labels[0].tolist() for s in good])
print("shard, then shift     ", [s.shift_labels[0].tolist() for s in bad], "<- label 5 is lost")

for P in (2, 4, 8):
    seq = np.arange(1, 8 * P + 1)[None]
    lost = len(D.supervised_pairs(D.shard_sequence(D.make_batch(seq), P))) - len(
        D.supervised_pairs(D.naive_shard_then_shift(seq, P)))
    print(f"P={P}: the naive order loses {lost} supervised tokens")

padded = D.pad_to_multiple(D.make_batch(np.arange(1, 8)[None]), 4)
print("7 tokens padded for P=4:", padded.input_ids[0].tolist(), padded.shift_labels[0].tolist())
