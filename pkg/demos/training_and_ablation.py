"""Config-driven training: SP equivalence and a two-row feasibility ablation.

Run: python demos/training_and_ablation.py   (about a minute)
"""

import logging

from longseq.model import ModelConfig
from longseq.train import (ABLATION_ROWS, DataConfig, FeatureConfig, ParallelConfig, RunConfig, TrainConfig,
                           ablation_base_config, cmd_ablate, cmd_compare, format_ablation_csv, matched_baseline)

logging.basicConfig(level=logging.INFO, format="%(message)s")

cfg = RunConfig(
    model=ModelConfig(vocab_size=512, hidden_size=64, n_layers=4, q_heads=8, kv_heads=2, max_position=64),
    parallel=ParallelConfig(sp_degree=4, world_size=4),
    features=FeatureConfig(ulysses=True, tiled_mlp=True, mlp_tiles=2, tiled_loss=True, ckpt=True,
                           ckpt_offload=True, logits_budget_bytes=1 << 14),
    train=TrainConfig(steps=10),
    data=DataConfig(seqlen=64),
)
res = cmd_compare(cfg, matched_baseline(cfg))
print(f"SP=4 with every feature vs one rank: max |loss diff| {res.max_abs_diff:.2e} -> "
      f"{'PASS' if res.passed else 'FAIL'}")

naive = cfg.replace(features={"naive_label_sharding": True})
bad = cmd_compare(naive, matched_baseline(naive))
print(f"same run with shard-then-shift labels: max |loss diff| {bad.max_abs_diff:.2e} -> "
      f"{'PASS' if bad.passed else 'FAIL'}")

# the first two ablation rows; `longseq ablate` runs all five
table = cmd_ablate(ablation_base_config(), ABLATION_ROWS[:2])
print(format_ablation_csv(table))
