"""Analytic FLOPs and memory for one training step.

Conventions (all counts are exact integers):

* 2 FLOPs per multiply-accumulate; only matrix products are counted.
  Softmax, layer norm, GELU and adds are left out.
* Backward through a trainable block costs 2x its forward (input and
  weight gradients); through a frozen block 1x (input gradients only).
* The head is always trained (backward 2x). A trainable embedder adds 1x
  its forward for weight gradients; a frozen one adds nothing.
* Memory is float64: every parameter is resident, trainable parameters add
  a gradient and two Adam moments, and only trainable blocks keep their
  intermediate activations. Every block's output stays alive as the
  residual stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ScheduleError
from .tensor import Tape, Tensor

BYTES_PER_FLOAT = 8
ADAM_SLOTS = 2


@dataclass(frozen=True)
class StepCost:
    forward_flops: int
    backward_flops: int
    total_flops: int
    activation_bytes: int
    parameter_bytes: int
    gradient_bytes: int
    optimizer_bytes: int
    peak_bytes: int


def layer_flops(config, n_tokens, trainable):
    """(forward, backward) FLOPs of one block over ``n_tokens`` tokens for one sample."""
    if n_tokens < 2:
        raise ScheduleError(f"a block needs at least 2 tokens, got {n_tokens}")
    n, E, hid = n_tokens, config.embed_dim, config.mlp_hidden
    fwd = 8 * n * E * E + 4 * n * n * E + 4 * n * E * hid
    return fwd, (2 if trainable else 1) * fwd


def embed_flops(config):
    return 2 * config.num_patches * config.patch_dim * config.embed_dim


def head_flops(config):
    return 2 * config.embed_dim * config.num_classes


def layer_param_count(config):
    E, hid = config.embed_dim, config.mlp_hidden
    return 4 * (E * E + E) + (E * hid + hid) + (hid * E + E) + 4 * E


def embed_param_count(config):
    E = config.embed_dim
    return config.patch_dim * E + E + E + (config.num_patches + 1) * E


def head_param_count(config):
    E = config.embed_dim
    return 2 * E + E * config.num_classes + config.num_classes


def total_param_count(config):
    return (embed_param_count(config) + config.num_layers * layer_param_count(config)
            + head_param_count(config))


def layer_saved_floats(config, n_tokens):
    """Floats a trainable block keeps for backward, per sample.

    Two normalized inputs and two LN outputs, q/k/v, the attention mix
    (8·n·E), the attention probabilities (heads·n²) and both sides of the
    GELU (2·n·hidden).
    """
    n = n_tokens
    return 8 * n * config.embed_dim + config.num_heads * n * n + 2 * n * config.mlp_hidden


def step_cost(config, schedule, batch_size, embedder_trainable=False):
    L, N = config.num_layers, config.num_patches
    if len(schedule.retain) != L:
        raise ScheduleError(f"schedule has {len(schedule.retain)} entries for {L} layers")
    trainable = set(schedule.trainable)
    tokens_in = schedule.tokens_in(N)

    fwd = embed_flops(config) + head_flops(config)
    bwd = 2 * head_flops(config) + (embed_flops(config) if embedder_trainable else 0)
    saved = 2 * config.embed_dim  # final CLS before and after the head norm
    if embedder_trainable:
        saved += N * config.patch_dim
    for l in range(L):
        f, b = layer_flops(config, tokens_in[l], l in trainable)
        fwd += f
        bwd += b
        saved += (schedule.retain[l] + 1) * config.embed_dim
        if l in trainable:
            saved += layer_saved_floats(config, tokens_in[l])

    n_trainable = head_param_count(config) + len(trainable) * layer_param_count(config)
    if embedder_trainable:
        n_trainable += embed_param_count(config)
    param_bytes = BYTES_PER_FLOAT * total_param_count(config)
    grad_bytes = BYTES_PER_FLOAT * n_trainable
    opt_bytes = ADAM_SLOTS * grad_bytes
    act_bytes = BYTES_PER_FLOAT * batch_size * saved
    B = batch_size
    return StepCost(
        forward_flops=B * fwd,
        backward_flops=B * bwd,
        total_flops=B * (fwd + bwd),
        activation_bytes=act_bytes,
        parameter_bytes=param_bytes,
        gradient_bytes=grad_bytes,
        optimizer_bytes=opt_bytes,
        peak_bytes=param_bytes + grad_bytes + opt_bytes + act_bytes,
    )


def measured_layer_macs(config, n_tokens, seed=0):
    """Instrumented count: run one block on random tokens and read the tape's MAC counter."""
    from .vit import ViT, _block

    model = ViT.init(config, seed=seed)
    x = Tensor(np.random.default_rng(seed).standard_normal((1, n_tokens, config.embed_dim)))
    with Tape() as tape:
        _block(x, model.layers[0], config.num_heads)
    return tape.macs


def measured_forward_macs(model, images, schedule=None):
    """MACs recorded by the tape for a full forward pass (all samples)."""
    from .vit import forward

    with Tape() as tape:
        forward(model, images, None, schedule)
    return tape.macs


def flops_ratio(a, b):
    return a.total_flops / b.total_flops if b.total_flops else math.nan
