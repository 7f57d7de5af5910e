"""A small pre-norm Vision Transformer on top of :mod:`alast.tensor`.

Each block can hand fewer tokens to the next one: after computing its output
over every incoming token it keeps the CLS token plus the ``retain_count``
patch tokens the CLS query attended to most (head-averaged). Dropped tokens
are gone for the rest of the pass.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError, ScheduleError
from .tensor import Tensor

LN_EPS = 1e-6
INIT_STD = 0.02
UNDEFINED = float("nan")


@dataclass(frozen=True)
class ModelConfig:
    image_channels: int
    image_height: int
    image_width: int
    patch_size: int
    embed_dim: int
    num_heads: int
    num_layers: int
    mlp_ratio: float
    num_classes: int

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ConfigError(f"model.{f.name}", "must be positive")
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ConfigError("model.patch_size", "must divide image height and width")
        if self.embed_dim % self.num_heads:
            raise ConfigError("model.num_heads", "must divide embed_dim")
        hidden = self.mlp_ratio * self.embed_dim
        if hidden != int(hidden):
            raise ConfigError("model.mlp_ratio", "mlp_ratio * embed_dim must be an integer")

    @property
    def grid(self):
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def num_patches(self):
        rows, cols = self.grid
        return rows * cols

    @property
    def patch_dim(self):
        return self.image_channels * self.patch_size**2

    @property
    def mlp_hidden(self):
        return int(self.mlp_ratio * self.embed_dim)

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"model.{sorted(unknown)[0]}", "unknown key")
        missing = names - set(data)
        if missing:
            raise ConfigError(f"model.{sorted(missing)[0]}", "missing key")
        return cls(**data)


# The three 224px presets follow the usual DeiT/ViT shapes; "desk" and
# "tiny" are what the CPU experiments and gradient checks use.
PRESETS = {
    "deit_tiny": ModelConfig(3, 224, 224, 16, 192, 3, 12, 4, 100),
    "deit_small": ModelConfig(3, 224, 224, 16, 384, 6, 12, 4, 100),
    "vit_base": ModelConfig(3, 224, 224, 16, 768, 12, 12, 4, 100),
    "desk": ModelConfig(1, 28, 28, 7, 64, 4, 6, 4, 4),
    "tiny": ModelConfig(1, 9, 9, 3, 8, 2, 2, 2, 3),
}


@dataclass
class TokenSequence:
    """Token embeddings (B×n×E, row 0 = CLS) and the original patch index of every other row."""

    embeddings: Tensor
    retained_patch_indices: np.ndarray  # B×(n-1), strictly increasing per row
    layer_index: int = 0

    @property
    def batch_size(self):
        return self.embeddings.shape[0]

    @property
    def num_tokens(self):
        return self.embeddings.shape[1]


@dataclass
class LayerTrace:
    cls_in: np.ndarray
    cls_out: np.ndarray
    cls_attention_scores: np.ndarray  # B×(n_in-1), head-averaged, CLS->CLS excluded
    tokens_in: int
    tokens_out: int
    relative_magnitude: float


_LAYER_KEYS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
               "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


@dataclass
class LayerParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    trainable: bool = True

    def tensors(self):
        return {k: getattr(self, k) for k in _LAYER_KEYS}

    def set_trainable(self, flag):
        self.trainable = bool(flag)
        for t in self.tensors().values():
            t.requires_grad = self.trainable
            if not flag:
                t.grad = None

    def num_params(self):
        return sum(t.size for t in self.tensors().values())


def _trunc_normal(rng, shape, std=INIT_STD):
    # resample everything outside two standard deviations
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


class ViT:
    """Patch embedder, ``num_layers`` transformer blocks and a CLS classification head."""

    def __init__(self, config, embed, layers, head):
        self.config = config
        self.embed = embed  # patch_w, patch_b, cls, pos
        self.layers = layers
        self.head = head  # norm_g, norm_b, w, b
        for t in self.head.values():
            t.requires_grad = True

    @classmethod
    def init(cls, config, seed=0, zero_residual_branches=False, embedder_trainable=False):
        rng = np.random.default_rng(seed)
        E, hid = config.embed_dim, config.mlp_hidden
        embed = {
            "patch_w": Tensor(_trunc_normal(rng, (config.patch_dim, E))),
            "patch_b": Tensor(np.zeros(E)),
            "cls": Tensor(_trunc_normal(rng, (1, 1, E))),
            "pos": Tensor(_trunc_normal(rng, (config.num_patches + 1, E))),
        }
        layers = []
        for _ in range(config.num_layers):
            w = {k: _trunc_normal(rng, (E, E)) for k in ("wq", "wk", "wv", "wo")}
            w1 = _trunc_normal(rng, (E, hid))
            w2 = _trunc_normal(rng, (hid, E))
            if zero_residual_branches:
                w["wo"][:] = 0.0
                w2[:] = 0.0
            layers.append(LayerParams(
                ln1_g=Tensor(np.ones(E)), ln1_b=Tensor(np.zeros(E)),
                wq=Tensor(w["wq"]), bq=Tensor(np.zeros(E)),
                wk=Tensor(w["wk"]), bk=Tensor(np.zeros(E)),
                wv=Tensor(w["wv"]), bv=Tensor(np.zeros(E)),
                wo=Tensor(w["wo"]), bo=Tensor(np.zeros(E)),
                ln2_g=Tensor(np.ones(E)), ln2_b=Tensor(np.zeros(E)),
                w1=Tensor(w1), b1=Tensor(np.zeros(hid)),
                w2=Tensor(w2), b2=Tensor(np.zeros(E)),
            ))
        head = {
            "norm_g": Tensor(np.ones(E)),
            "norm_b": Tensor(np.zeros(E)),
            "w": Tensor(_trunc_normal(rng, (E, config.num_classes))),
            "b": Tensor(np.zeros(config.num_classes)),
        }
        model = cls(config, embed, layers, head)
        for layer in layers:
            layer.set_trainable(True)
        model.set_embedder_trainable(embedder_trainable)
        return model

    def set_embedder_trainable(self, flag):
        for t in self.embed.values():
            t.requires_grad = bool(flag)
            if not flag:
                t.grad = None

    @property
    def embedder_trainable(self):
        return self.embed["patch_w"].requires_grad

    def set_trainable_layers(self, trainable):
        trainable = set(trainable)
        for i, layer in enumerate(self.layers):
            layer.set_trainable(i in trainable)

    def parameters(self):
        """All parameter tensors under their checkpoint key, in a fixed order."""
        named = {f"embed.{k}": t for k, t in self.embed.items()}
        for i, layer in enumerate(self.layers):
            named.update({f"layers.{i}.{k}": t for k, t in layer.tensors().items()})
        named.update({f"head.{k}": t for k, t in self.head.items()})
        for name, t in named.items():
            t.name = name
        return named

    def trainable_parameters(self):
        return {k: t for k, t in self.parameters().items() if t.requires_grad}


def patchify(images, config):
    """B×C×H×W pixels -> B×N×(C·P·P), patches in row-major grid order."""
    images = np.asarray(images, dtype=np.float64)
    expected = (config.image_channels, config.image_height, config.image_width)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise DimensionError(f"images of shape {images.shape} do not match (B, *{expected})")
    B, C = images.shape[:2]
    P = config.patch_size
    rows, cols = config.grid
    x = images.reshape(B, C, rows, P, cols, P).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, rows * cols, C * P * P)


def patch_embed(images, model):
    config = model.config
    patches = patchify(images, config)
    B, N = patches.shape[:2]
    e = model.embed
    tokens = T.add(T.matmul(Tensor(patches), e["patch_w"]), e["patch_b"])
    cls = T.broadcast_to(e["cls"], (B, 1, config.embed_dim))
    x = T.add(T.concat([cls, tokens], axis=1), e["pos"])
    retained = np.tile(np.arange(N), (B, 1))
    return TokenSequence(x, retained, layer_index=0)


def _split_heads(t, B, n, H, d):
    return T.transpose(T.reshape(t, (B, n, H, d)), (0, 2, 1, 3))


def _block(x, p, num_heads):
    """Pre-norm block over every incoming token. Returns (output, attention probabilities)."""
    B, n, E = x.shape
    d = E // num_heads
    h = T.layer_norm(x, p.ln1_g, p.ln1_b, LN_EPS)
    q = _split_heads(T.add(T.matmul(h, p.wq), p.bq), B, n, num_heads, d)
    k = _split_heads(T.add(T.matmul(h, p.wk), p.bk), B, n, num_heads, d)
    v = _split_heads(T.add(T.matmul(h, p.wv), p.bv), B, n, num_heads, d)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    attn = T.softmax_rows(scores)
    mix = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (B, n, E))
    x = T.add(x, T.add(T.matmul(mix, p.wo), p.bo))
    h = T.layer_norm(x, p.ln2_g, p.ln2_b, LN_EPS)
    m = T.add(T.matmul(T.gelu(T.add(T.matmul(h, p.w1), p.b1)), p.w2), p.b2)
    return T.add(x, m), attn


def _ratio(fx, total):
    """Per-sample ‖f(x)‖/‖f(x)+x‖ averaged over the batch; NaN when a denominator is 0."""
    axes = tuple(range(1, fx.ndim))
    num = np.sqrt((fx * fx).sum(axis=axes))
    den = np.sqrt((total * total).sum(axis=axes))
    if np.any(den == 0):
        return UNDEFINED
    return float(np.mean(num / den))


def rank_tokens(scores, retain_count):
    """Positions (per batch row, ascending) of the ``retain_count`` highest scores.

    Ties go to the lower position.
    """
    order = np.argsort(-scores, axis=1, kind="stable")[:, :retain_count]
    return np.sort(order, axis=1)


def block_forward(seq, params, retain_count, num_heads):
    x = seq.embeddings
    n_patches = seq.num_tokens - 1
    if not 1 <= retain_count <= n_patches:
        raise ScheduleError(f"retain_count {retain_count} outside [1, {n_patches}]")
    out, attn = _block(x, params, num_heads)
    scores = attn.values[:, :, 0, 1:].mean(axis=1)
    rel = _ratio(out.values - x.values, out.values)
    if retain_count == n_patches:
        new_seq = TokenSequence(out, seq.retained_patch_indices, seq.layer_index + 1)
    else:
        keep = rank_tokens(scores, retain_count)
        index = np.concatenate([np.zeros((keep.shape[0], 1), dtype=np.intp), keep + 1], axis=1)
        new_seq = TokenSequence(
            T.take_tokens(out, index),
            np.take_along_axis(seq.retained_patch_indices, keep, axis=1),
            seq.layer_index + 1,
        )
    trace = LayerTrace(
        cls_in=x.values[:, 0, :].copy(),
        cls_out=out.values[:, 0, :].copy(),
        cls_attention_scores=scores,
        tokens_in=seq.num_tokens,
        tokens_out=new_seq.num_tokens,
        relative_magnitude=rel,
    )
    return new_seq, trace


def _retain_counts(schedule, config):
    if schedule is None:
        return [config.num_patches] * config.num_layers
    counts = list(getattr(schedule, "retain", schedule))
    if len(counts) != config.num_layers:
        raise ScheduleError(f"schedule has {len(counts)} entries for {config.num_layers} layers")
    return counts


def forward(model, images, labels=None, schedule=None):
    """Run the whole network. Returns (loss or None, logits, per-layer traces).

    ``schedule`` is a LayerSchedule, a plain list of per-layer retention
    counts, or None for full retention.
    """
    config = model.config
    counts = _retain_counts(schedule, config)
    seq = patch_embed(images, model)
    traces = []
    for layer, k in zip(model.layers, counts):
        seq, trace = block_forward(seq, layer, k, config.num_heads)
        traces.append(trace)
    cls = T.layer_norm(T.select_token(seq.embeddings, 0),
                       model.head["norm_g"], model.head["norm_b"], LN_EPS)
    logits = T.add(T.matmul(cls, model.head["w"]), model.head["b"])
    loss = T.cross_entropy(logits, labels) if labels is not None else None
    return loss, logits, traces


def block_contribution(params, x, num_heads):
    """The non-residual part f(x) = block(x) - x, as a plain array."""
    X = np.asarray(x.embeddings.values if isinstance(x, TokenSequence) else x, dtype=np.float64)
    out, _ = _block(Tensor(X), params, num_heads)
    return out.values - X


def relative_magnitude(block, x, num_heads=None):
    """‖f(x)‖ / ‖f(x)+x‖ with norms over all tokens of a sample, averaged over the batch.

    ``block`` is a LayerParams (then ``num_heads`` is required) or any
    callable returning f(x) for an array ``x``. Returns NaN when
    ‖f(x)+x‖ = 0 for some sample.
    """
    X = np.asarray(x.embeddings.values if isinstance(x, TokenSequence) else x, dtype=np.float64)
    if X.ndim < 3:
        X = X.reshape((1,) * (3 - X.ndim) + X.shape)
    if isinstance(block, LayerParams):
        if num_heads is None:
            raise ValueError("num_heads is required when block is a LayerParams")
        fx = block_contribution(block, X, num_heads)
    else:
        fx = np.asarray(block(X), dtype=np.float64).reshape(X.shape)
    return _ratio(fx, fx + X)


def layer_inputs(model, images):
    """Token sequences entering each layer under full retention (no recording)."""
    seq = patch_embed(images, model)
    inputs = []
    for layer in model.layers:
        inputs.append(seq)
        seq, _ = block_forward(seq, layer, seq.num_tokens - 1, model.config.num_heads)
    return inputs


# Checkpoint container, little-endian:
#   8 bytes  magic b"ALASTCKP"
#   u32      format version (1)
#   u64      header length in bytes
#   header   UTF-8 JSON {"config": {...}, "dtype": "<f8",
#            "tensors": [{"name", "shape", "offset", "nbytes"}, ...]}
#   payload  raw float64 tensors, offsets relative to payload start
CHECKPOINT_MAGIC = b"ALASTCKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(model, path):
    entries, blobs, offset = [], [], 0
    for name, t in model.parameters().items():
        data = np.ascontiguousarray(t.values, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"config": model.config.to_dict(), "dtype": "<f8", "tensors": entries},
                        sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC or len(raw) < 20:
        raise FormatError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[20:20 + hlen])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    payload = raw[20 + hlen:]
    config = ModelConfig.from_dict(header["config"])
    model = ViT.init(config, seed=0)
    params = model.parameters()
    seen = set()
    for entry in header["tensors"]:
        name = entry["name"]
        if name not in params:
            raise FormatError(f"{path}: unexpected tensor {name!r}")
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise FormatError(f"{path}: truncated payload at {name!r}")
        values = np.frombuffer(payload[start:start + nbytes], dtype="<f8").reshape(entry["shape"])
        if values.shape != params[name].shape:
            raise FormatError(f"{path}: {name!r} has shape {values.shape}, expected {params[name].shape}")
        params[name].values = values.astype(np.float64)
        seen.add(name)
    if seen != set(params):
        raise FormatError(f"{path}: missing tensors {sorted(set(params) - seen)[:3]}")
    return model
