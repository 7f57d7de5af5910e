"""A forward pass that thins tokens block by block, keeping the patches the
CLS token attends to most."""

import numpy as np

from alast.controller import retention_counts
from alast.vit import PRESETS, ViT, block_forward, patch_embed

cfg = PRESETS["desk"]  # 28x28 images, 7x7 patches -> 16 patch tokens + CLS
model = ViT.init(cfg, seed=0)
images = np.random.default_rng(0).random((2, 1, 28, 28))

budgets = [1.0, 0.9, 0.8, 0.6, 1.0, 0.5]
counts = retention_counts(budgets, cfg.num_patches)
print("budgets ", budgets)
print("retained", counts)

seq = patch_embed(images, model)
for l, (layer, k) in enumerate(zip(model.layers, counts)):
    seq, trace = block_forward(seq, layer, k, cfg.num_heads)
    top = np.argsort(-trace.cls_attention_scores[0])[:3]
    print(f"block {l}: {trace.tokens_in:>2} -> {trace.tokens_out:>2} tokens,"
          f" CLS delta {np.mean((trace.cls_out - trace.cls_in) ** 2):.2e},"
          f" most attended patches (image 0) {top.tolist()}")
    print("    kept patch ids (image 0):", seq.retained_patch_indices[0].tolist())
