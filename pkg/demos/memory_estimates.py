"""Closed-form memory estimates at full scale, and the inverse problem.

Run: python demos/memory_estimates.py
"""

from longseq import memest as M

print("published numbers, recomputed:")
for key, value in M.published_anchors().items():
    pub = M.PUBLISHED_VALUES.get(key)
    print(f"  {key:38s} {value:10.3f}   published {pub if pub is not None else '-'}")

e = M.report(**M.PRESETS["llama-8b"], seqlen=125_000, sp=8, world_size=8)
print("\n8B model, 125K tokens, SP=8 on 8 ranks (GiB):")
for key, value in e.to_dict(M.GiB).items():
    print(f"  {key:28s} {value:9.3f}")

# per-token working memory is only calibrated for the toy engine; at full
# scale it is left at zero, so these lengths are upper bounds
model = M.SolverModel(param_count=8e9, hidden=4096, layers=32, vocab=128_256, sp=8, world_size=8, zero3=True)
for feats in (M.Features(), M.Features(tiled_loss=True), M.Features(tiled_loss=True, ckpt_offload=True)):
    r = M.max_seqlen_solver(model, 80 * M.GiB, 1.5 * 1024 * M.GiB, feats)
    print(f"max seqlen with {feats}: {r.max_seqlen:,}")
