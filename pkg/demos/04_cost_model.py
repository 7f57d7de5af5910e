"""Analytic FLOPs and peak memory for different training schedules."""

from alast.controller import LayerSchedule
from alast.cost import layer_flops, measured_layer_macs, step_cost
from alast.vit import PRESETS

cfg = PRESETS["desk"]
L, N, B = cfg.num_layers, cfg.num_patches, 32

for n in (17, 9, 5):
    fwd, bwd = layer_flops(cfg, n, trainable=True)
    print(f"one block, {n:>2} tokens: forward {fwd:,} flops (counter says {2 * measured_layer_macs(cfg, n):,}),"
          f" backward {bwd:,} trainable / {layer_flops(cfg, n, False)[1]:,} frozen")

schedules = {
    "all blocks, all tokens": LayerSchedule.full(L, N),
    "head only": LayerSchedule.full(L, N, trainable=()),
    "4 blocks, all tokens": LayerSchedule.full(L, N, trainable=(0, 1, 2, 3)),
    "4 blocks, thinned tokens": LayerSchedule((16, 14, 12, 9, 7, 5), (0, 1, 2, 3)),
}
base = step_cost(cfg, schedules["all blocks, all tokens"], B)
for name, s in schedules.items():
    c = step_cost(cfg, s, B)
    print(f"{name:<26} flops {c.total_flops:>12,} ({c.total_flops / base.total_flops:.2f}x)"
          f"  peak {c.peak_bytes:>10,} bytes ({c.peak_bytes / base.peak_bytes:.2f}x)")
