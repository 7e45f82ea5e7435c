"""Sequence tiling: same numbers, smaller peak.

Run: python demos/sequence_tiling.py
"""

import numpy as np

from longseq import autograd as ag
from longseq import ledger as L
from longseq.autograd import Tensor
from longseq.model import ModelConfig, init_params, mlp
from longseq.tiled import default_mlp_tiles, tiled_logits_loss, tiled_mlp

cfg = ModelConfig(vocab_size=4096, hidden_size=32, n_layers=1, q_heads=4, kv_heads=4)
params = init_params(cfg, seed=0)
s = 512
x = np.random.default_rng(0).normal(size=(1, s, 32))
labels = np.random.default_rng(1).integers(0, 4096, size=(1, s))


def peak(fn):
    led = L.MemoryLedger()
    with led.activate():
        t = Tensor(x, requires_grad=True)
        y = fn(t)
        (y[0] if isinstance(y, tuple) else ag.sum_(y)).backward()
        return led.peak_bytes(), (y[0] if isinstance(y, tuple) else y).data


for n in (1, 4, 16):
    p, out = peak(lambda t: tiled_mlp(params, "layers.0.", t, num_tiles=n) if n > 1 else mlp(params, "layers.0.", t))
    print(f"MLP with {n:2d} tiles: peak {p / 2**20:6.2f} MiB, output checksum {out.sum():.12f}")

w = params["lm_head"]
for budget in (1 << 30, 1 << 20, 1 << 17):
    p, loss = peak(lambda t: tiled_logits_loss(t, w, labels, budget_bytes=budget))
    print(f"logits+loss, tile budget {budget:>10d} B: peak {p / 2**20:6.2f} MiB, loss {float(loss):.12f}")

print(f"default MLP tiles for s=256000, h=4096: {default_mlp_tiles(256_000, 4096)}")
