"""Adaptive layer-selective fine-tuning for Vision Transformers, in numpy."""

from .controller import (BudgetController, BudgetState, LayerSchedule, cls_delta,
                         retention_counts, select_trainable, update_budgets)
from .cost import StepCost, layer_flops, step_cost
from .data import Dataset, load_idx, synth_dataset
from .errors import (AlastError, ConfigError, ConsistencyError, DimensionError,
                     FormatError, NumericError, ScheduleError, UsageError)
from .optim import Adam, adam_step
from .tensor import Tape, Tensor, backward
from .train import RunConfig, RunReport, evaluate, train
from .vit import (PRESETS, LayerTrace, ModelConfig, TokenSequence, ViT, block_forward,
                  forward, load_checkpoint, patch_embed, relative_magnitude, save_checkpoint)

__version__ = "0.1.0"
