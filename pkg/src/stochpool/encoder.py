"""The full speech encoder: compact conv feature extractor, squeeze
context network, and post-layer-norm transformer stack with per-layer
pooled attention.

Pipeline for one forward pass at compression (s_f, per-layer (s_k, s_q)):

    features --mean-pool s_f--> positional conv --> transformer layers
             --replicate-upsample to input length--> shared linear head

The squeeze path is skipped entirely at s_f = 1, so a (1,1,1) pass is a
plain post-LN transformer encoder. The upsample head is the only
parameter the squeeze mechanism adds, and it exists once for all squeeze
factors; pooling factors never change the parameter count.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, PoolFactors, multi_head_pooled
from .errors import ConfigError, InputError, ShapeError
from .pooling import downsample, masked_downsample, upsample
from .stochastic import CompressionConfig, Rng
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    conv1d,
    gelu,
    layer_norm,
    mac_scope,
    matmul,
)

TARGET_TOTAL_STRIDE = 320  # 16 kHz input -> 50 Hz frames

# (kernel, stride, channel multiplier) for the compact extractor: channels
# start small and double each time the cumulative downsample grows 4x.
_COMPACT_PATTERN = (
    (10, 5, 1),
    (3, 2, 1),
    (3, 2, 2),
    (3, 2, 2),
    (3, 2, 4),
    (2, 2, 4),
    (2, 2, 8),
)


@dataclass(frozen=True)
class FeatureExtractorConfig:
    """Conv stack over raw 16 kHz audio; layers are (kernel, stride, out_channels)."""

    layers: tuple

    def __post_init__(self):
        layers = tuple((int(k), int(s), int(c)) for k, s, c in self.layers)
        object.__setattr__(self, "layers", layers)
        total = 1
        for _, s, _ in layers:
            total *= s
        if total != TARGET_TOTAL_STRIDE:
            raise ConfigError(f"feature extractor strides multiply to {total}, "
                              f"need {TARGET_TOTAL_STRIDE}")
        cum = layers[0][1]
        ref = cum
        prev_c = layers[0][2]
        for k, s, c in layers[1:]:
            cum *= s
            if cum >= 4 * ref:
                if c != prev_c * 2:
                    raise ConfigError("channel width must double when cumulative "
                                      f"downsample reaches 4x (at stride {cum})")
                ref = cum
            elif c != prev_c:
                raise ConfigError("channel width may only change at 4x downsample points")
            prev_c = c

    @classmethod
    def compact(cls, base_channels: int) -> "FeatureExtractorConfig":
        if base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {base_channels}")
        return cls(tuple((k, s, m * base_channels) for k, s, m in _COMPACT_PATTERN))

    @property
    def out_channels(self) -> int:
        return self.layers[-1][2]

    @property
    def receptive_field(self) -> int:
        rf, hop = 1, 1
        for k, s, _ in self.layers:
            rf += (k - 1) * hop
            hop *= s
        return rf

    def frames_for_samples(self, n: int) -> int:
        length = int(n)
        for k, s, _ in self.layers:
            if length < k:
                return 0
            length = (length - k) // s + 1
        return length

    def samples_for_frames(self, frames: int) -> int:
        """Shortest audio length yielding exactly ``frames`` output frames."""
        if frames < 1:
            raise ConfigError(f"frames must be >= 1, got {frames}")
        return TARGET_TOTAL_STRIDE * (frames - 1) + self.receptive_field


@dataclass(frozen=True)
class EncoderConfig:
    """Shape of one encoder instance, including its factor capability ceilings."""

    model_dim: int
    depth: int
    heads: int
    ffn_dim: int = 0  # 0 -> 4 * model_dim
    base_channels: int = 8
    pos_conv_kernel: int = 15
    pos_conv_groups: int = 4
    max_squeeze: int = 2
    max_kv_pool: int = 2
    max_q_pool: int = 2

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.heads < 1 or self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} must be divisible by "
                              f"heads {self.heads}")
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.model_dim)
        if self.pos_conv_kernel % 2 != 1:
            raise ConfigError("positional conv kernel must be odd to preserve length")
        if self.model_dim % self.pos_conv_groups:
            raise ConfigError(f"model_dim {self.model_dim} must be divisible by "
                              f"pos_conv_groups {self.pos_conv_groups}")
        for name in ("max_squeeze", "max_kv_pool", "max_q_pool"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return {
            "model_dim": self.model_dim,
            "depth": self.depth,
            "heads": self.heads,
            "ffn_dim": self.ffn_dim,
            "base_channels": self.base_channels,
            "pos_conv_kernel": self.pos_conv_kernel,
            "pos_conv_groups": self.pos_conv_groups,
            "max_squeeze": self.max_squeeze,
            "max_kv_pool": self.max_kv_pool,
            "max_q_pool": self.max_q_pool,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        return cls(**data)


_PRESETS = {
    # Full-size model dimensions.
    "B": dict(model_dim=768, depth=12, heads=12, base_channels=64),
    "L": dict(model_dim=1024, depth=24, heads=16, base_channels=64),
    # Desk-scale presets for tests and recipes.
    "tiny": dict(model_dim=64, depth=2, heads=4, base_channels=8),
    "small": dict(model_dim=128, depth=4, heads=4, base_channels=16),
}


def presets() -> dict:
    """Named encoder configurations."""
    return {name: EncoderConfig(**kw) for name, kw in _PRESETS.items()}


def preset(name: str) -> EncoderConfig:
    try:
        kw = _PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(_PRESETS)}") from None
    return EncoderConfig(**kw)


def parameter_spec(config: EncoderConfig) -> dict:
    """Ordered name -> shape map for every parameter of an encoder instance."""
    fe = FeatureExtractorConfig.compact(config.base_channels)
    e, f = config.model_dim, config.ffn_dim
    shapes = {}
    c_in = 1
    for i, (k, _, c_out) in enumerate(fe.layers):
        shapes[f"fe.conv{i}.weight"] = (c_out, c_in, k)
        c_in = c_out
    shapes["fe.norm.gamma"] = (c_in,)
    shapes["fe.norm.beta"] = (c_in,)
    shapes["fe.proj.weight"] = (c_in, e)
    shapes["fe.proj.bias"] = (e,)
    shapes["pos_conv.weight"] = (e, e // config.pos_conv_groups, config.pos_conv_kernel)
    shapes["input_norm.gamma"] = (e,)
    shapes["input_norm.beta"] = (e,)
    for i in range(config.depth):
        shapes[f"layer{i}.attn.w_q"] = (e, e)
        shapes[f"layer{i}.attn.w_k"] = (e, e)
        shapes[f"layer{i}.attn.w_v"] = (e, e)
        shapes[f"layer{i}.attn.w_o"] = (e, e)
        shapes[f"layer{i}.norm1.gamma"] = (e,)
        shapes[f"layer{i}.norm1.beta"] = (e,)
        shapes[f"layer{i}.ffn.w1"] = (e, f)
        shapes[f"layer{i}.ffn.b1"] = (f,)
        shapes[f"layer{i}.ffn.w2"] = (f, e)
        shapes[f"layer{i}.ffn.b2"] = (e,)
        shapes[f"layer{i}.norm2.gamma"] = (e,)
        shapes[f"layer{i}.norm2.beta"] = (e,)
    if config.max_squeeze > 1:
        shapes["upsample.weight"] = (e, e)
        shapes["upsample.bias"] = (e,)
    return shapes


def _init_value(name: str, shape: tuple, rng: Rng) -> np.ndarray:
    if name.endswith(".gamma"):
        return np.ones(shape)
    if name.endswith((".beta", ".bias", ".b1", ".b2")):
        return np.zeros(shape)
    if len(shape) == 3:  # conv weight
        fan_in = shape[1] * shape[2]
    else:  # matrix, rows = fan in
        fan_in = shape[0]
    return rng.fork(name).normal_matrix(shape, scale=1.0 / np.sqrt(fan_in))


class EncoderModel:
    """Parameters plus topology; immutable during evaluation.

    Parameters live in an ordered name -> Tensor dict. The Tensor objects
    stay stable across training steps (optimizers rebind ``.data``), which
    is what lets gradient maps be looked up by tensor.
    """

    def __init__(self, config: EncoderConfig, seed: int = 0, dtype=np.float64, params=None):
        self.config = config
        self.fe = FeatureExtractorConfig.compact(config.base_channels)
        self.dtype = np.dtype(dtype)
        shapes = parameter_spec(config)
        if params is None:
            rng = Rng(seed).fork("init")
            self.params = {
                name: Tensor(_init_value(name, shape, rng), dtype=self.dtype)
                for name, shape in shapes.items()
            }
        else:
            self.params = {}
            for name, shape in shapes.items():
                if name not in params:
                    raise InputError(f"missing parameter {name!r}")
                value = params[name].data if isinstance(params[name], Tensor) else params[name]
                if tuple(value.shape) != shape:
                    raise ShapeError(f"parameter {name!r} has shape {tuple(value.shape)}, "
                                     f"expected {shape}")
                self.params[name] = Tensor(np.asarray(value), dtype=self.dtype)
        self._attn_cache = {}

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def astype(self, dtype) -> "EncoderModel":
        return EncoderModel(self.config, dtype=dtype,
                            params={n: t.data for n, t in self.params.items()})

    def clone(self) -> "EncoderModel":
        return self.astype(self.dtype)

    def _attn_params(self, i: int) -> AttentionParams:
        cached = self._attn_cache.get(i)
        if cached is None:
            p = self.params
            cached = AttentionParams(
                w_q=p[f"layer{i}.attn.w_q"],
                w_k=p[f"layer{i}.attn.w_k"],
                w_v=p[f"layer{i}.attn.w_v"],
                w_o=p[f"layer{i}.attn.w_o"],
                heads=self.config.heads,
            )
            self._attn_cache[i] = cached
        return cached

    # ------------------------------------------------------------------
    # forward paths
    # ------------------------------------------------------------------

    def extract_features(self, audio) -> Tensor:
        """Raw 16 kHz audio -> 50 Hz frames projected to model width."""
        audio = np.asarray(audio, dtype=np.float64)
        if audio.ndim != 1:
            raise InputError(f"audio must be a 1-D sample array, got shape {audio.shape}")
        rf = self.fe.receptive_field
        if audio.size < rf:
            raise InputError(f"audio of {audio.size} samples is shorter than the "
                             f"receptive field ({rf} samples)")
        # per-utterance normalization keeps conv activations in range
        centered = audio - audio.mean()
        normed = centered / np.sqrt(centered.var() + 1e-8)
        x = Tensor(normed.reshape(-1, 1), dtype=self.dtype)
        p = self.params
        with mac_scope("fe"):
            for i, (_, stride, _) in enumerate(self.fe.layers):
                x = gelu(conv1d(x, p[f"fe.conv{i}.weight"], stride=stride))
            x = layer_norm(x, p["fe.norm.gamma"], p["fe.norm.beta"])
            x = add(matmul(x, p["fe.proj.weight"]), p["fe.proj.bias"])
        return x

    def _positional(self, x: Tensor) -> Tensor:
        cfg = self.config
        pad = (cfg.pos_conv_kernel - 1) // 2
        zeros = Tensor(np.zeros((pad, cfg.model_dim), dtype=self.dtype))
        padded = concat([zeros, x, zeros], axis=0)
        with mac_scope("fe"):
            conv = conv1d(padded, self.params["pos_conv.weight"],
                          stride=1, groups=cfg.pos_conv_groups)
        return add(x, gelu(conv))

    def forward(self, features, config: CompressionConfig, valid=None,
                _drop_final_residual: bool = False) -> Tensor:
        """Encode a T x E feature sequence at one compression configuration.

        Output length always equals input length; ``valid`` optionally
        marks real (unpadded) frames and is pooled alongside the data.
        """
        x = as_tensor(features, dtype=None if isinstance(features, Tensor) else self.dtype)
        cfg = self.config
        if x.ndim != 2 or x.shape[1] != cfg.model_dim:
            raise ShapeError(f"features must be T x {cfg.model_dim}, got {x.shape}")
        if config.depth != cfg.depth:
            raise ConfigError(f"config has {config.depth} layer entries, "
                              f"encoder depth is {cfg.depth}")
        if config.s_f > cfg.max_squeeze:
            raise ConfigError(f"squeeze factor {config.s_f} exceeds ceiling {cfg.max_squeeze}")
        for s_k, s_q in config.per_layer:
            if s_k > cfg.max_kv_pool:
                raise ConfigError(f"key-value pooling {s_k} exceeds ceiling {cfg.max_kv_pool}")
            if s_q > cfg.max_q_pool:
                raise ConfigError(f"query pooling {s_q} exceeds ceiling {cfg.max_q_pool}")
        if valid is not None:
            valid = np.asarray(valid, dtype=bool)
            if valid.shape != (x.shape[0],):
                raise ShapeError(f"valid mask must have shape ({x.shape[0]},), "
                                 f"got {valid.shape}")

        t_in = x.shape[0]
        v = valid
        if config.s_f > 1:
            if v is not None:
                x, v = masked_downsample(x, config.s_f, v)
            else:
                x = downsample(x, config.s_f)
        x = self._positional(x)
        p = self.params
        x = layer_norm(x, p["input_norm.gamma"], p["input_norm.beta"])
        last = cfg.depth - 1
        for i, (s_k, s_q) in enumerate(config.per_layer):
            attn_out = multi_head_pooled(x, self._attn_params(i),
                                         PoolFactors(s_q=s_q, s_k=s_k), v)
            x = layer_norm(add(x, attn_out),
                           p[f"layer{i}.norm1.gamma"], p[f"layer{i}.norm1.beta"])
            with mac_scope("ffn"):
                h = gelu(add(matmul(x, p[f"layer{i}.ffn.w1"]), p[f"layer{i}.ffn.b1"]))
                h = add(matmul(h, p[f"layer{i}.ffn.w2"]), p[f"layer{i}.ffn.b2"])
            if _drop_final_residual and i == last:
                x = layer_norm(h, p[f"layer{i}.norm2.gamma"], p[f"layer{i}.norm2.beta"])
            else:
                x = layer_norm(add(x, h),
                               p[f"layer{i}.norm2.gamma"], p[f"layer{i}.norm2.beta"])
        if config.s_f > 1:
            x = upsample(x, config.s_f, truncate_to=t_in)
            with mac_scope("upsample"):
                x = add(matmul(x, p["upsample.weight"]), p["upsample.bias"])
        return x

    def forward_audio(self, audio, config: CompressionConfig) -> Tensor:
        return self.forward(self.extract_features(audio), config)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"STPL"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    """Deserialized checkpoint: config, float32 parameters, free-form meta."""

    config: EncoderConfig
    params: dict = field(default_factory=dict)  # name -> float32 ndarray
    meta: dict = field(default_factory=dict)

    def build_model(self, dtype=np.float64):
        """Instantiate the encoder; returns (model, extra_params).

        Extra parameter groups (fine-tuning head, pretraining mask
        embedding, ...) ride along in the same file and are returned cast
        to ``dtype`` for the caller to reattach.
        """
        expected = parameter_spec(self.config)
        encoder_params = {n: self.params[n] for n in expected if n in self.params}
        model = EncoderModel(self.config, dtype=dtype, params=encoder_params)
        extras = {n: Tensor(v, dtype=dtype) for n, v in self.params.items()
                  if n not in expected}
        return model, extras


def save_checkpoint(path, config: EncoderConfig, params: dict, meta: dict | None = None):
    """Write the binary checkpoint: magic, version, config JSON, float32 tensors."""
    header = json.dumps({"config": config.to_dict(), "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(params)))
    for name, value in params.items():
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        data = np.ascontiguousarray(data, dtype="<f4")
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<B", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", view, 4)
    if version != CHECKPOINT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<I", view, 8)
    offset = 12
    header = json.loads(bytes(view[offset:offset + header_len]).decode("utf-8"))
    offset += header_len
    (n_params,) = struct.unpack_from("<I", view, offset)
    offset += 4
    params = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack_from("<H", view, offset)
        offset += 2
        name = bytes(view[offset:offset + name_len]).decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", view, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", view, offset)
        offset += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(view, dtype="<f4", count=size, offset=offset).reshape(shape)
        offset += 4 * size
        params[name] = data.copy()
    return Checkpoint(config=EncoderConfig.from_dict(header["config"]),
                      params=params, meta=header.get("meta", {}))
