"""The toy decoder with packed samples: position ids alone keep samples apart.

Run: python demos/packed_attention.py
"""

import numpy as np

from longseq import autograd as ag
from longseq.model import BlockCausalAttention, CausalAttention, ModelConfig, Transformer

cfg = ModelConfig(vocab_size=100, hidden_size=32, n_layers=2, q_heads=4, kv_heads=2, max_position=64)
model = Transformer(cfg, seed=0)
rng = np.random.default_rng(1)
a, b = rng.integers(0, 100, size=10), rng.integers(0, 100, size=6)

ids = np.concatenate([a, b])[None]
pos = np.concatenate([np.arange(10), np.arange(6)])[None]
print("position ids:", pos[0].tolist())


def logits(ids, pos, attn):
    return ag.linear(model(ids, pos, attn), model.params["lm_head"]).data


alone = logits(b[None], np.arange(6)[None], BlockCausalAttention())
packed = logits(ids, pos, BlockCausalAttention())[:, 10:]
leaky = logits(ids, pos, CausalAttention())[:, 10:]
print(f"block-causal packed vs alone: max diff {np.max(np.abs(packed - alone)):.1e}")
print(f"plain causal packed vs alone: max diff {np.max(np.abs(leaky - alone)):.1e} (attends across samples)")
