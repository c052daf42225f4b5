"""Shared network architecture of the target and main networks.

CNN blocks (two 3x3 convolutions each, 2x time pooling on the final block)
feed pre-norm transformer blocks, then a nonlinear projector with
frame-level batch normalization at its hidden layer. Both networks in
self-training use this same architecture; which one is trainable is decided
by the caller via requires_grad on the parameters.

Parameters are read-shared during forward passes; only optimizer/EMA steps
mutate them, and batch-norm running statistics change only inside training
forward passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, InputTooShortError
from .tensor import Tensor

BN_MOMENTUM = 0.99


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 16
    cnn_channels: tuple = (8,)          # one entry per CNN block
    transformer_blocks: int = 2
    attention_dim: int = 32
    attention_heads: int = 4
    ffn_dim: int = 64
    projector_hidden_dim: int = 32
    projector_output_dim: int = 16
    positional_encoding: bool = True
    dropout: float = 0.1

    # fixed by the architecture: one 2x max-pool over time on the last block
    downsample_factor: int = 2

    def __post_init__(self):
        dims = (self.input_dim, self.transformer_blocks, self.attention_dim,
                self.attention_heads, self.ffn_dim, self.projector_hidden_dim,
                self.projector_output_dim)
        if any(d < 1 for d in dims) or len(self.cnn_channels) < 1:
            raise ConfigError("all encoder dimensions must be >= 1")
        if self.downsample_factor != 2:
            raise ConfigError("downsample factor is fixed at 2")
        if self.attention_dim % self.attention_heads != 0:
            raise ConfigError("attention_dim must be divisible by attention_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        object.__setattr__(self, "cnn_channels", tuple(int(c) for c in self.cnn_channels))

    def to_dict(self):
        d = asdict(self)
        d["cnn_channels"] = list(self.cnn_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["cnn_channels"] = tuple(d["cnn_channels"])
        d.pop("downsample_factor", None)
        return cls(**d)


def paper_preset() -> EncoderConfig:
    """Full-scale preset: 83-dim features, 2 CNN blocks, 12 transformer blocks."""
    return EncoderConfig(
        input_dim=83, cnn_channels=(32, 64), transformer_blocks=12,
        attention_dim=512, attention_heads=8, ffn_dim=2048,
        projector_hidden_dim=2048, projector_output_dim=256)


def desk_preset() -> EncoderConfig:
    """Tiny preset used by unit tests: F=8, one CNN block, dim-32 transformer."""
    return EncoderConfig(
        input_dim=8, cnn_channels=(4,), transformer_blocks=2,
        attention_dim=32, attention_heads=4, ffn_dim=64,
        projector_hidden_dim=32, projector_output_dim=16)


@dataclass
class EmbeddingSequence:
    """Encoder output frames; each output frame covers 2 input frames."""

    frames: Tensor          # (T', d)
    frame_stride: int = 2


@dataclass
class EncoderParams:
    """Named parameter tensors plus batch-norm running statistics."""

    config: EncoderConfig
    tensors: dict                 # name -> Tensor
    running: dict                 # name -> np.ndarray (bn running stats)

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def trainable(self, flag: bool) -> "EncoderParams":
        """Deep copy with requires_grad set on every parameter tensor."""
        tensors = {k: Tensor(v.data.copy(), requires_grad=flag)
                   for k, v in self.tensors.items()}
        running = {k: v.copy() for k, v in self.running.items()}
        return EncoderParams(self.config, tensors, running)

    def validate(self):
        schema = param_schema(self.config)
        names = set(self.tensors)
        if names != set(schema):
            missing = sorted(set(schema) - names)
            extra = sorted(names - set(schema))
            raise ConfigError(f"parameter set mismatch: missing {missing}, extra {extra}")
        for name, shape in schema.items():
            if self.tensors[name].shape != shape:
                raise ConfigError(
                    f"{name}: shape {self.tensors[name].shape}, schema wants {shape}")
            if not np.all(np.isfinite(self.tensors[name].data)):
                raise DataError(f"{name}: non-finite parameter values")
        return self


def param_schema(cfg: EncoderConfig) -> dict:
    """Every parameter name and shape implied by a config, in forward order."""
    schema = {}
    in_ch = 1
    for b, ch in enumerate(cfg.cnn_channels):
        schema[f"cnn{b}.conv0.w"] = (ch, in_ch, 3, 3)
        schema[f"cnn{b}.conv0.b"] = (ch,)
        schema[f"cnn{b}.conv1.w"] = (ch, ch, 3, 3)
        schema[f"cnn{b}.conv1.b"] = (ch,)
        in_ch = ch
    d_flat = cfg.cnn_channels[-1] * cfg.input_dim
    dm = cfg.attention_dim
    schema["enc_in.w"] = (d_flat, dm)
    schema["enc_in.b"] = (dm,)
    for i in range(cfg.transformer_blocks):
        p = f"block{i}"
        schema[f"{p}.ln1.g"] = (dm,)
        schema[f"{p}.ln1.b"] = (dm,)
        for proj in ("wq", "wk", "wv", "wo"):
            schema[f"{p}.attn.{proj}"] = (dm, dm)
            schema[f"{p}.attn.{proj}b"] = (dm,)
        schema[f"{p}.ln2.g"] = (dm,)
        schema[f"{p}.ln2.b"] = (dm,)
        schema[f"{p}.ffn.w1"] = (dm, cfg.ffn_dim)
        schema[f"{p}.ffn.b1"] = (cfg.ffn_dim,)
        schema[f"{p}.ffn.w2"] = (cfg.ffn_dim, dm)
        schema[f"{p}.ffn.b2"] = (dm,)
    schema["final_ln.g"] = (dm,)
    schema["final_ln.b"] = (dm,)
    schema["projector.w1"] = (dm, cfg.projector_hidden_dim)
    schema["projector.b1"] = (cfg.projector_hidden_dim,)
    schema["projector.bn.g"] = (cfg.projector_hidden_dim,)
    schema["projector.bn.b"] = (cfg.projector_hidden_dim,)
    schema["projector.w2"] = (cfg.projector_hidden_dim, cfg.projector_output_dim)
    schema["projector.b2"] = (cfg.projector_output_dim,)
    return schema


_ONE_INIT = ("ln1.g", "ln2.g", "final_ln.g", "bn.g")


def init_params(cfg: EncoderConfig, seed: int, dtype=None, requires_grad=True) -> EncoderParams:
    """Scaled-uniform fan-in weights, zero biases, unit norm gains.

    Deterministic in (config, seed): the parameter draw order follows the
    schema order, one rng stream for the whole set.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1417]))
    dtype = dtype or T.get_default_dtype()
    tensors = {}
    for name, shape in param_schema(cfg).items():
        if name.endswith(".b") or name.endswith("b1") or name.endswith("b2") \
                or name.endswith("qb") or name.endswith("kb") or name.endswith("vb") \
                or name.endswith("ob"):
            data = np.zeros(shape)
        elif any(name.endswith(s) for s in _ONE_INIT):
            data = np.ones(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=requires_grad)
    running = {
        "projector.bn.mean": np.zeros(cfg.projector_hidden_dim, dtype=dtype),
        "projector.bn.var": np.ones(cfg.projector_hidden_dim, dtype=dtype),
    }
    return EncoderParams(cfg, tensors, running).validate()


def _as_batch(x):
    if isinstance(x, np.ndarray):
        x = Tensor(x)
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise ConfigError(f"expected (T, F) or (B, T, F) features, got shape {x.shape}")


def cnn_forward(params: EncoderParams, x):
    """(B, T, F) or (T, F) features -> (B, T//2, C*F) hidden sequence."""
    cfg = params.config
    h, single = _as_batch(x)
    b, t, f = h.shape
    if t < 2:
        raise InputTooShortError(f"need at least 2 frames, got {t}")
    if f != cfg.input_dim:
        raise ConfigError(f"feature dim {f} does not match config input_dim {cfg.input_dim}")
    h = T.reshape(h, (b, 1, t, f))
    last = len(cfg.cnn_channels) - 1
    for blk in range(len(cfg.cnn_channels)):
        h = T.relu(T.conv3x3(h, params[f"cnn{blk}.conv0.w"], params[f"cnn{blk}.conv0.b"]))
        h = T.relu(T.conv3x3(h, params[f"cnn{blk}.conv1.w"], params[f"cnn{blk}.conv1.b"]))
        if blk == last:
            h = T.maxpool_time2(h)
    c = cfg.cnn_channels[-1]
    tp = t // 2
    h = T.reshape(T.transpose(h, (0, 2, 1, 3)), (b, tp, c * f))
    return h[0] if single else h


def sinusoidal_positions(length: int, dim: int, dtype) -> np.ndarray:
    pos = np.arange(length)[:, None].astype(np.float64)
    idx = np.arange(dim // 2)[None, :].astype(np.float64)
    angles = pos / np.power(10000.0, 2.0 * idx / dim)
    enc = np.zeros((length, dim))
    enc[:, 0::2] = np.sin(angles)
    enc[:, 1::2] = np.cos(angles[:, : dim - dim // 2])
    return enc.astype(dtype)


def _attention(params, prefix, h, bias, cfg, train_mode, rng):
    b, t, dm = h.shape
    heads = cfg.attention_heads
    dh = dm // heads
    parts = []
    for name in ("wq", "wk", "wv"):
        prj = T.add(T.matmul(h, params[f"{prefix}.attn.{name}"]),
                    params[f"{prefix}.attn.{name}b"])
        parts.append(T.transpose(T.reshape(prj, (b, t, heads, dh)), (0, 2, 1, 3)))
    q, k, v = parts
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if bias is not None:
        scores = T.add(scores, bias)
    probs = T.softmax(scores, axis=-1)
    ctx = T.matmul(probs, v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, dm))
    out = T.add(T.matmul(ctx, params[f"{prefix}.attn.wo"]), params[f"{prefix}.attn.wob"])
    if train_mode and cfg.dropout > 0:
        out = T.dropout(out, cfg.dropout, rng)
    return out


def transformer_forward(params: EncoderParams, h, train_mode=False, rng=None,
                        lengths=None):
    """Pre-norm self-attention blocks over (B, T', D) or (T', D) input.

    Attention is full (non-causal); `lengths` marks padded frames in a batch
    so they receive no attention. With positional encoding disabled the whole
    stack is permutation-equivariant over frames.
    """
    cfg = params.config
    h, single = _as_batch(h)
    if train_mode and cfg.dropout > 0 and rng is None:
        raise ConfigError("train-mode transformer with dropout needs an rng")
    b, t, _ = h.shape
    h = T.add(T.matmul(h, params["enc_in.w"]), params["enc_in.b"])
    if cfg.positional_encoding:
        h = T.add(h, Tensor(sinusoidal_positions(t, cfg.attention_dim, h.dtype)))
    bias = None
    if lengths is not None:
        pad = np.zeros((b, 1, 1, t), dtype=h.dtype.type)
        for i, ln in enumerate(lengths):
            pad[i, :, :, ln:] = -1e9
        bias = Tensor(pad)
    for i in range(cfg.transformer_blocks):
        p = f"block{i}"
        normed = T.layer_norm(h, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"])
        h = T.add(h, _attention(params, p, normed, bias, cfg, train_mode, rng))
        normed = T.layer_norm(h, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"])
        ff = T.add(T.matmul(T.relu(
            T.add(T.matmul(normed, params[f"{p}.ffn.w1"]), params[f"{p}.ffn.b1"])),
            params[f"{p}.ffn.w2"]), params[f"{p}.ffn.b2"])
        if train_mode and cfg.dropout > 0:
            ff = T.dropout(ff, cfg.dropout, rng)
        h = T.add(h, ff)
    h = T.layer_norm(h, params["final_ln.g"], params["final_ln.b"])
    return h[0] if single else h


def projector_hidden(params: EncoderParams, h, train_mode=False, frame_mask=None,
                     update_running=None):
    """Linear -> frame-level batch norm, i.e. the pre-relu projector hidden.

    Train mode draws normalization statistics from the unmasked frames of the
    batch and (unless update_running=False) folds them into the running
    statistics; eval mode uses the stored running statistics.
    """
    if update_running is None:
        update_running = train_mode
    hidden = T.add(T.matmul(h, params["projector.w1"]), params["projector.b1"])
    out, new_mean, new_var = T.frame_batch_norm(
        hidden, params["projector.bn.g"], params["projector.bn.b"],
        frame_mask, params.running["projector.bn.mean"],
        params.running["projector.bn.var"], train_mode, momentum=BN_MOMENTUM)
    if train_mode and update_running:
        params.running["projector.bn.mean"] = new_mean
        params.running["projector.bn.var"] = new_var
    return out


def projector_forward(params: EncoderParams, h, train_mode=False, frame_mask=None,
                      update_running=None):
    """Projector head: linear -> frame batch norm -> relu -> linear."""
    h, single = _as_batch(h)
    hidden = T.relu(projector_hidden(params, h, train_mode, frame_mask, update_running))
    out = T.add(T.matmul(hidden, params["projector.w2"]), params["projector.b2"])
    if single:
        out = out[0]
    return out


def encode(params: EncoderParams, x, train_mode=False, rng=None,
           update_running=None) -> EmbeddingSequence:
    """Full forward pass of one sequence: CNN -> transformer -> projector."""
    h = cnn_forward(params, x)
    h = transformer_forward(params, h, train_mode=train_mode, rng=rng)
    z = projector_forward(params, h, train_mode=train_mode,
                          update_running=update_running)
    return EmbeddingSequence(frames=z)


def encode_batch(params: EncoderParams, feats, lengths, train_mode=False, rng=None,
                 update_running=None):
    """Padded-batch forward pass; returns ((B, T', d) frames, output lengths).

    Padded frames are excluded from attention and from batch-norm statistics;
    their embedding values are garbage and the caller must mask them.
    """
    lengths = np.asarray(lengths)
    h = cnn_forward(params, feats)
    out_lengths = lengths // 2
    h = transformer_forward(params, h, train_mode=train_mode, rng=rng,
                            lengths=out_lengths)
    mask = frame_mask(out_lengths, h.shape[1], h.dtype.type)
    z = projector_forward(params, h, train_mode=train_mode, frame_mask=mask,
                          update_running=update_running)
    return z, out_lengths


def frame_mask(lengths, max_len, dtype=np.float32) -> np.ndarray:
    """(B, T, 1) validity mask from per-sequence lengths."""
    lengths = np.asarray(lengths)
    mask = (np.arange(max_len)[None, :] < lengths[:, None]).astype(dtype)
    return mask[:, :, None]


def pad_batch(features_list, dtype=np.float32):
    """Stack variable-length (T, F) arrays into (B, Tmax, F) plus lengths."""
    lengths = np.array([f.shape[0] for f in features_list], dtype=np.int64)
    tmax = int(lengths.max())
    out = np.zeros((len(features_list), tmax, features_list[0].shape[1]), dtype=dtype)
    for i, f in enumerate(features_list):
        out[i, : f.shape[0]] = f
    return out, lengths
