"""Per-block relative magnitude and CLS attention maps of a model, the data
behind layer-contribution plots and attention heat maps."""

import numpy as np

from alast.cli import inspect_rows
from alast.train import RunConfig, train
from alast.vit import PRESETS, ViT

rc = RunConfig(model="desk", method="ft_full", epochs=1,
               data={"kind": "synthetic", "train_per_class": 100, "eval_per_class": 20, "seed": 0})
images = np.random.default_rng(0).random((8, 1, 28, 28))

for label, model in [("zero-initialized branches", ViT.init(PRESETS["desk"], zero_residual_branches=True)),
                     ("after one epoch", train(rc).model)]:
    rel, att = inspect_rows(model, images)
    print(label)
    print("  relative magnitude per block:", [round(v, 4) for _, v in rel])
    last = np.zeros((4, 4))
    for layer, r, c, s in att:
        if layer == model.config.num_layers - 1:
            last[r, c] = s
    print("  CLS attention of the last block over the 4x4 patch grid:")
    for row in last:
        print("   ", " ".join(f"{v:.3f}" for v in row))
