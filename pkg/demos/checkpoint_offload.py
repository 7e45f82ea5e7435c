"""Activation-checkpoint offload keeps the device checkpoint footprint flat in depth.

Run: python demos/checkpoint_offload.py
"""

from longseq import ledger as L
from longseq.model import ModelConfig
from longseq.train import DataConfig, FeatureConfig, RunConfig, TrainConfig, cmd_train

for offload in (False, True):
    for layers in (2, 4, 8):
        cfg = RunConfig(model=ModelConfig(vocab_size=64, hidden_size=32, n_layers=layers, q_heads=4, kv_heads=2),
                        features=FeatureConfig(ckpt=True, ckpt_offload=offload),
                        train=TrainConfig(steps=1), data=DataConfig(seqlen=128))
        r = cmd_train(cfg)
        print(f"offload={offload!s:5} L={layers}: device checkpoints {r.peak(L.DEVICE, 'activation-checkpoint'):7d} B, "
              f"host checkpoints {r.peak(L.HOST, 'activation-checkpoint'):7d} B, loss {r.losses[0]:.12f}")

# a host budget that cannot hold every layer's checkpoint fails with the exact deficit
cfg = RunConfig(model=ModelConfig(vocab_size=64, hidden_size=32, n_layers=4, q_heads=4, kv_heads=2),
                features=FeatureConfig(ckpt=True, ckpt_offload=True, host_budget=100_000),
                train=TrainConfig(steps=1), data=DataConfig(seqlen=128))
try:
    cmd_train(cfg)
except L.OutOfMemoryError as exc:
    print(exc)
