"""Training loop, run configuration and the metrics file formats."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .controller import (BudgetController, FREEZE_POLICIES, LayerSchedule,
                         select_trainable)
from .cost import step_cost
from .data import load_idx, synth_dataset
from .errors import ConfigError, ConsistencyError, NumericError
from .optim import Adam
from .tensor import Tape, backward
from .vit import PRESETS, ModelConfig, ViT, forward

log = logging.getLogger(__name__)

METHODS = ("alast", "ft_full", "ft_head", "ft_topk_static")
METRICS_COLUMNS = ("step", "loss", "train_acc", "flops_cum", "peak_bytes", "wallclock_ms")

_DATA_KEYS = {
    "synthetic": {"kind", "num_classes", "train_per_class", "eval_per_class", "seed", "noise"},
    "idx": {"kind", "train_images", "train_labels", "eval_images", "eval_labels"},
}


@dataclass
class RunConfig:
    """Everything that defines a run. Same config (seed included) -> same bytes out."""

    model: str | dict = "desk"
    method: str = "alast"
    K: int | None = None
    lr: float = 1e-4
    alpha: float | None = None  # None: use lr
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0
    data: dict = field(default_factory=lambda: {"kind": "synthetic", "train_per_class": 500,
                                                "eval_per_class": 100, "seed": 0})
    freeze_policy: str = "topk"
    embedder_trainable: bool = False
    augment: bool = False
    record_wallclock: bool = True

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        names = {f.name for f in fields(cls)}
        for key in data:
            if key not in names:
                raise ConfigError(key, "unknown key")
        return cls(**data)

    def to_dict(self):
        return asdict(self)

    def model_config(self):
        if isinstance(self.model, str):
            if self.model not in PRESETS:
                raise ConfigError("model", f"unknown preset {self.model!r}; choose from {sorted(PRESETS)}")
            return PRESETS[self.model]
        if isinstance(self.model, dict):
            return ModelConfig.from_dict(self.model)
        raise ConfigError("model", "must be a preset name or an object")

    @property
    def budget_lr(self):
        return self.lr if self.alpha is None else self.alpha

    def validate(self):
        mc = self.model_config()
        if self.method not in METHODS:
            raise ConfigError("method", f"must be one of {METHODS}")
        if self.method in ("alast", "ft_topk_static"):
            if self.K is None:
                raise ConfigError("K", f"required for method {self.method}")
            if not isinstance(self.K, int) or not 1 <= self.K <= mc.num_layers:
                raise ConfigError("K", f"must be an integer in [1, {mc.num_layers}], got {self.K!r}")
        _positive(self.lr, "lr")
        if self.alpha is not None and not (isinstance(self.alpha, (int, float)) and self.alpha >= 0):
            raise ConfigError("alpha", "must be a non-negative number")
        _positive_int(self.batch_size, "batch_size")
        _positive_int(self.epochs, "epochs")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed", "must be a non-negative integer")
        if self.freeze_policy not in FREEZE_POLICIES:
            raise ConfigError("freeze_policy", f"must be one of {FREEZE_POLICIES}")
        for name in ("embedder_trainable", "augment", "record_wallclock"):
            if not isinstance(getattr(self, name), bool):
                raise ConfigError(name, "must be true or false")
        _validate_data(self.data, mc)


def _positive(value, name):
    if not isinstance(value, (int, float)) or isinstance(value, bool) or not value > 0:
        raise ConfigError(name, "must be a positive number")


def _positive_int(value, name):
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigError(name, "must be a positive integer")


def _validate_data(data, mc):
    if not isinstance(data, dict):
        raise ConfigError("data", "must be an object")
    kind = data.get("kind")
    if kind not in _DATA_KEYS:
        raise ConfigError("data.kind", f"must be one of {sorted(_DATA_KEYS)}")
    for key in data:
        if key not in _DATA_KEYS[kind]:
            raise ConfigError(f"data.{key}", "unknown key")
    if kind == "synthetic":
        for key in ("train_per_class", "eval_per_class"):
            _positive_int(data.get(key), f"data.{key}")
        if data.get("num_classes", mc.num_classes) != mc.num_classes:
            raise ConfigError("data.num_classes", "must match model.num_classes")
    else:
        for key in ("train_images", "train_labels", "eval_images", "eval_labels"):
            if not isinstance(data.get(key), str):
                raise ConfigError(f"data.{key}", "path required")
        if mc.image_channels != 1:
            raise ConfigError("model.image_channels", "IDX data is single-channel")


def load_data(rc):
    """(train, eval) datasets for a RunConfig."""
    mc = rc.model_config()
    d = rc.data
    if d["kind"] == "synthetic":
        ds = synth_dataset(mc.num_classes, d["train_per_class"], mc.image_height, mc.image_width,
                           seed=d.get("seed", 0), eval_per_class=d["eval_per_class"],
                           channels=mc.image_channels, noise=d.get("noise", 0.1))
        return ds.subset("train"), ds.subset("eval")
    train = load_idx(d["train_images"], d["train_labels"], "train")
    evals = load_idx(d["eval_images"], d["eval_labels"], "eval")
    for ds in (train, evals):
        if ds.images.shape[2:] != (mc.image_height, mc.image_width):
            raise ConfigError("model.image_height", f"IDX images are {ds.images.shape[2:]}")
        if len(ds) and ds.labels.max() >= mc.num_classes:
            raise ConsistencyError(f"label {ds.labels.max()} >= num_classes {mc.num_classes}")
    return train, evals


@dataclass
class StepRecord:
    step: int
    loss: float
    train_acc: float
    flops_cum: int
    peak_bytes: int
    wallclock_ms: float


@dataclass
class RunReport:
    records: list
    final_accuracy: float
    epoch_accuracy: list
    trajectory: list
    config: dict
    model: ViT = None

    @property
    def total_flops(self):
        return self.records[-1].flops_cum if self.records else 0

    @property
    def peak_bytes(self):
        return self.records[-1].peak_bytes if self.records else 0

    @property
    def wallclock_ms(self):
        return float(sum(r.wallclock_ms for r in self.records))

    def summary(self):
        return {
            "method": self.config["method"],
            "final_accuracy": self.final_accuracy,
            "epoch_accuracy": self.epoch_accuracy,
            "total_flops": self.total_flops,
            "peak_bytes": self.peak_bytes,
            "wallclock_ms": self.wallclock_ms,
            "steps": len(self.records),
            "config": self.config,
        }


def write_metrics_csv(records, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in records:
            w.writerow([r.step, repr(float(r.loss)), repr(float(r.train_acc)), r.flops_cum,
                        r.peak_bytes, repr(float(r.wallclock_ms))])


def read_metrics_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != METRICS_COLUMNS:
        raise ValueError(f"{path}: unexpected header {rows[0] if rows else None}")
    return [StepRecord(int(s), float(l), float(a), int(f), int(p), float(w))
            for s, l, a, f, p, w in rows[1:]]


def evaluate(model, dataset, batch_size=256):
    """Top-1 accuracy with full token retention and nothing recorded."""
    if len(dataset) == 0:
        raise ValueError("evaluation set is empty")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        _, logits, _ = forward(model, dataset.images[start:start + batch_size])
        correct += int((logits.values.argmax(axis=1) == dataset.labels[start:start + batch_size]).sum())
    return correct / len(dataset)


def _augment(images, rng, pad=2):
    out = images.copy()
    flip = rng.random(len(out)) < 0.5
    out[flip] = out[flip][..., ::-1]
    H, W = out.shape[2:]
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    for i, (dy, dx) in enumerate(rng.integers(0, 2 * pad + 1, (len(out), 2))):
        out[i] = padded[i, :, dy:dy + H, dx:dx + W]
    return out


def static_topk_layers(model, images, K):
    """The K layers with the highest relative magnitude on ``images`` (ties to lower index)."""
    _, _, traces = forward(model, images)
    return select_trainable([t.relative_magnitude for t in traces], K)


def _fixed_trajectory(schedule, step):
    return [{"step": step, "layer": l, "budget": 1.0, "trainable": int(l in schedule.trainable),
             "retained_tokens": int(schedule.retain[l])} for l in range(len(schedule.retain))]


def train(rc, datasets=None, on_step=None):
    """Fine-tune a freshly initialized ViT according to ``rc``.

    ``datasets`` may pass a pre-loaded (train, eval) pair. ``on_step`` is
    called with ``(record, schedule, model)`` after every optimizer step.
    """
    mc = rc.model_config()
    train_ds, eval_ds = datasets if datasets is not None else load_data(rc)
    L, N = mc.num_layers, mc.num_patches
    model = ViT.init(mc, seed=rc.seed,
                     embedder_trainable=rc.embedder_trainable and rc.method != "ft_head")
    opt = Adam(lr=rc.lr)
    batch_rng = np.random.default_rng([rc.seed, 1])
    aug_rng = np.random.default_rng([rc.seed, 2])

    controller = None
    if rc.method == "alast":
        controller = BudgetController(L, N, rc.K, rc.budget_lr, rc.freeze_policy, seed=rc.seed)
        fixed = None
    elif rc.method == "ft_full":
        fixed = LayerSchedule.full(L, N)
    elif rc.method == "ft_head":
        fixed = LayerSchedule.full(L, N, trainable=())
    else:
        chosen = static_topk_layers(model, train_ds.images[:rc.batch_size], rc.K)
        log.info("ft_topk_static trains layers %s", chosen)
        fixed = LayerSchedule.full(L, N, trainable=chosen)

    records, trajectory, epoch_acc = [], [], []
    flops_cum, peak, step = 0, 0, 0
    for epoch in range(rc.epochs):
        order = batch_rng.permutation(len(train_ds))
        for start in range(0, len(order), rc.batch_size):
            idx = order[start:start + rc.batch_size]
            images, labels = train_ds.images[idx], train_ds.labels[idx]
            if rc.augment:
                images = _augment(images, aug_rng)
            schedule = controller.schedule if controller else fixed
            model.set_trainable_layers(schedule.trainable)

            t0 = time.perf_counter()
            try:
                with Tape() as tape:
                    loss, logits, traces = forward(model, images, labels, schedule)
            except NumericError as exc:
                raise NumericError(f"{exc} at step {step} (epoch {epoch})") from exc
            if not np.isfinite(loss.item()):
                raise NumericError(f"loss became {loss.item()} at step {step} (epoch {epoch})")
            backward(tape, loss)
            opt.step(model.parameters())
            if controller:
                controller.step(traces)
            else:
                trajectory.extend(_fixed_trajectory(schedule, step))
            elapsed = (time.perf_counter() - t0) * 1000.0 if rc.record_wallclock else 0.0

            cost = step_cost(mc, schedule, len(labels), model.embedder_trainable)
            flops_cum += cost.total_flops
            peak = max(peak, cost.peak_bytes)
            acc = float((logits.values.argmax(axis=1) == labels).mean())
            record = StepRecord(step, loss.item(), acc, flops_cum, peak, elapsed)
            records.append(record)
            if on_step:
                on_step(record, schedule, model)
            step += 1
        epoch_acc.append(evaluate(model, eval_ds))
        log.info("epoch %d: eval accuracy %.4f", epoch, epoch_acc[-1])

    if controller:
        trajectory = controller.trajectory
    return RunReport(records, epoch_acc[-1], epoch_acc, trajectory, rc.to_dict(), model)
