"""Short runs of the four training methods on synthetic gratings, compared
with the same report the command line writes.

Takes under a minute on one CPU core. Pass a larger epoch count as
the first argument for a closer look.
"""

import json
import sys
import tempfile
from pathlib import Path

from alast.cli import main
from alast.train import RunConfig, load_data, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 3
data = {"kind": "synthetic", "train_per_class": 250, "eval_per_class": 50, "seed": 0}
# Weights start random, so a larger learning rate than the 1e-4 default.
# The budget learning rate is set explicitly: CLS deltas of this small model
# move by ~1e-4 per step, so alpha equal to lr would keep every budget at 1.
common = dict(model="desk", epochs=epochs, data=data, lr=3e-4)
configs = {
    "ft_full": RunConfig(method="ft_full", **common),
    "ft_head": RunConfig(method="ft_head", **common),
    "ft_topk_static": RunConfig(method="ft_topk_static", K=4, **common),
    "alast": RunConfig(method="alast", K=4, alpha=75.0, **common),
}
datasets = load_data(configs["ft_full"])
root = Path(tempfile.mkdtemp(prefix="alast-demo-"))
for name, rc in configs.items():
    report = train(rc, datasets=datasets)
    out = root / name
    out.mkdir()
    (out / "summary.json").write_text(json.dumps(report.summary()))
    print(f"{name:<15} accuracy {report.final_accuracy:.3f} total flops {report.total_flops:.3e}")

main(["report", *(str(root / n) for n in configs), "--out", str(root / "report")])
print("comparison table:", root / "report" / "comparison.csv")
