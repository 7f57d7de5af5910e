"""Per-layer compute budgets driven by how much each layer moves the CLS token.

Every step, layer l gets a delta ``Δ_l`` = mean squared change it applied to
the CLS embedding. Budgets follow ``b_l <- clip(b_l + α·(Δ_l(new) - Δ_l(prev)), 0, 1)``
starting from 1. A budget controls two things for the next step: how many
patch tokens the layer passes on (``floor(b_l · incoming)``, at least one) and
whether the layer is among the K trained ones.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ScheduleError

FREEZE_POLICIES = ("topk", "sampled")


@dataclass(frozen=True)
class BudgetState:
    budgets: np.ndarray
    alpha: float
    prev_deltas: np.ndarray | None = None
    step: int = 0

    @classmethod
    def initial(cls, num_layers, alpha):
        if alpha < 0:
            raise ConfigError("alpha", "must be non-negative")
        return cls(np.ones(num_layers), float(alpha))

    @property
    def num_layers(self):
        return len(self.budgets)


@dataclass(frozen=True)
class LayerSchedule:
    retain: tuple[int, ...]  # patch tokens kept at each layer's output
    trainable: tuple[int, ...]  # 0-based layer indices, ascending
    step: int = 0

    @classmethod
    def full(cls, num_layers, num_patches, trainable=None, step=0):
        if trainable is None:
            trainable = range(num_layers)
        return cls((num_patches,) * num_layers, tuple(sorted(trainable)), step)

    def tokens_in(self, num_patches):
        """Token count (CLS included) entering each layer."""
        n = [num_patches + 1]
        n.extend(k + 1 for k in self.retain[:-1])
        return n


def cls_delta(cls_in, cls_out):
    d = np.asarray(cls_out, dtype=np.float64) - np.asarray(cls_in, dtype=np.float64)
    return float(np.mean(d * d))


def update_budgets(state, new_deltas):
    new_deltas = np.asarray(new_deltas, dtype=np.float64)
    if new_deltas.shape != (state.num_layers,):
        raise ScheduleError(f"expected {state.num_layers} deltas, got shape {new_deltas.shape}")
    if state.prev_deltas is None:
        raise ScheduleError("update_budgets needs previous deltas; warm up with record_deltas first")
    budgets = np.clip(state.budgets + (new_deltas - state.prev_deltas) * state.alpha, 0.0, 1.0)
    return replace(state, budgets=budgets, prev_deltas=new_deltas.copy(), step=state.step + 1)


def record_deltas(state, deltas):
    """Warm-start step: remember the deltas without touching the budgets."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.shape != (state.num_layers,):
        raise ScheduleError(f"expected {state.num_layers} deltas, got shape {deltas.shape}")
    return replace(state, prev_deltas=deltas.copy(), step=state.step + 1)


def select_trainable(budgets, K):
    budgets = np.asarray(budgets, dtype=np.float64)
    if not 1 <= K <= len(budgets):
        raise ConfigError("K", f"must be in [1, {len(budgets)}], got {K}")
    order = np.argsort(-budgets, kind="stable")
    return tuple(sorted(int(i) for i in order[:K]))


def sample_trainable(budgets, K, rng):
    """K distinct layers drawn with probability proportional to budget."""
    budgets = np.asarray(budgets, dtype=np.float64)
    if not 1 <= K <= len(budgets):
        raise ConfigError("K", f"must be in [1, {len(budgets)}], got {K}")
    # the floor keeps zero-budget layers drawable once the rest are exhausted
    p = budgets + 1e-12
    picked = rng.choice(len(budgets), size=K, replace=False, p=p / p.sum())
    return tuple(sorted(int(i) for i in picked))


def retention_counts(budgets, num_patches):
    if num_patches < 1:
        raise ScheduleError("num_patches must be at least 1")
    counts, n = [], num_patches
    for b in budgets:
        n = min(n, max(1, math.floor(b * n)))
        counts.append(n)
    return tuple(counts)


@dataclass
class BudgetController:
    """Owns the budget state and the trajectory log for one run.

    ``schedule`` is what the next forward pass should use. After that pass,
    :meth:`step` logs the schedule that was in effect, folds the new deltas
    into the budgets and returns the schedule for the following step.
    """

    num_layers: int
    num_patches: int
    K: int
    alpha: float
    policy: str = "topk"
    seed: int = 0
    state: BudgetState = None
    schedule: LayerSchedule = None
    trajectory: list = field(default_factory=list)

    def __post_init__(self):
        if self.policy not in FREEZE_POLICIES:
            raise ConfigError("freeze_policy", f"must be one of {FREEZE_POLICIES}")
        select_trainable(np.ones(self.num_layers), self.K)
        self._rng = np.random.default_rng(self.seed)
        self.state = BudgetState.initial(self.num_layers, self.alpha)
        self.schedule = self._derive(0)

    def _derive(self, step):
        b = self.state.budgets
        if self.policy == "sampled":
            trainable = sample_trainable(b, self.K, self._rng)
        else:
            trainable = select_trainable(b, self.K)
        return LayerSchedule(retention_counts(b, self.num_patches), trainable, step)

    def step(self, traces):
        if len(traces) != self.num_layers:
            raise ScheduleError(f"expected {self.num_layers} traces, got {len(traces)}")
        current = self.schedule
        for layer in range(self.num_layers):
            self.trajectory.append({
                "step": current.step,
                "layer": layer,
                "budget": float(self.state.budgets[layer]),
                "trainable": int(layer in current.trainable),
                "retained_tokens": int(current.retain[layer]),
            })
        deltas = [cls_delta(t.cls_in, t.cls_out) for t in traces]
        if self.state.prev_deltas is None:
            self.state = record_deltas(self.state, deltas)
        else:
            self.state = update_budgets(self.state, deltas)
        self.schedule = self._derive(current.step + 1)
        return self.schedule


TRAJECTORY_FIELDS = ("step", "layer", "budget", "trainable", "retained_tokens")


def write_trajectory(records, path):
    """One JSON object per line, keys in TRAJECTORY_FIELDS order."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({k: rec[k] for k in TRAJECTORY_FIELDS}, separators=(",", ":")))
            fh.write("\n")


def read_trajectory(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
