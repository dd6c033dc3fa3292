"""The squeeze-excite transformer classifier for sensor windows.

Forward path: per-step affine input projection -> a stack of post-norm
transformer encoder layers (multi-head self-attention, then a relu FFN, each
followed by residual add and layer norm) -> squeeze-and-excitation gating
over the feature channels -> temporal attention pooling into one context
vector -> affine classifier with softmax.

There is no positional encoding and no masking anywhere, so the class
probabilities are invariant under permutations of the window's time steps.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as tt
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 3
    window_len: int = 200
    model_dim: int = 128
    num_layers: int = 2
    num_heads: int = 4
    ffn_hidden: int = 512
    se_reduction: int = 16
    pool_hidden: int = 64
    num_classes: int = 6

    def __post_init__(self):
        for name in ("input_channels", "window_len", "model_dim", "num_layers",
                     "num_heads", "ffn_hidden", "se_reduction", "pool_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.model_dim % self.num_heads:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.model_dim % self.se_reduction:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by se_reduction {self.se_reduction}")

    @property
    def head_dim(self):
        return self.model_dim // self.num_heads

    @classmethod
    def tiny(cls, num_classes=3):
        """Small configuration used for fast verification runs."""
        return cls(window_len=8, model_dim=16, num_heads=2, ffn_hidden=64,
                   se_reduction=4, pool_hidden=8, num_classes=num_classes)


def _uniform_limit(fan_in, fan_out):
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _param_shapes(cfg: ModelConfig):
    c, d = cfg.input_channels, cfg.model_dim
    shapes = [("w_proj", (c, d)), ("b_proj", (d,))]
    for i in range(1, cfg.num_layers + 1):
        p = f"layer{i}."
        for name in ("w_q", "w_k", "w_v", "w_o"):
            shapes.append((p + name, (d, d)))
            shapes.append((p + "b" + name[1:], (d,)))
        shapes += [
            (p + "ln1_gamma", (d,)), (p + "ln1_beta", (d,)),
            (p + "ffn_w1", (d, cfg.ffn_hidden)), (p + "ffn_b1", (cfg.ffn_hidden,)),
            (p + "ffn_w2", (cfg.ffn_hidden, d)), (p + "ffn_b2", (d,)),
            (p + "ln2_gamma", (d,)), (p + "ln2_beta", (d,)),
        ]
    bottleneck = d // cfg.se_reduction
    shapes += [
        ("w1_se", (d, bottleneck)), ("w2_se", (bottleneck, d)),
        ("w_a", (d, cfg.pool_hidden)), ("v", (cfg.pool_hidden,)),
        ("w_c", (cfg.num_classes, d)), ("b_c", (cfg.num_classes,)),
    ]
    return shapes


class ModelParams:
    """Named learnable tensors, in a fixed deterministic order."""

    def __init__(self, tensors):
        self._tensors = dict(tensors)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int, dtype=None):
        """Fan-scaled uniform weights, zero biases, unit layer-norm gains.

        Keeps initial logits small, so the starting loss sits near ln(K).
        Identical seeds give identical parameters.
        """
        rng = np.random.default_rng(seed)
        dtype = np.dtype(dtype) if dtype is not None else tt.default_dtype()
        tensors = {}
        for name, shape in _param_shapes(cfg):
            base = name.rsplit(".", 1)[-1]
            if base.endswith("gamma"):
                arr = np.ones(shape)
            elif len(shape) == 1 and base != "v":
                arr = np.zeros(shape)
            else:
                fan_in, fan_out = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], 1)
                if base == "w_c":
                    fan_in, fan_out = shape[1], shape[0]
                lim = _uniform_limit(fan_in, fan_out)
                arr = rng.uniform(-lim, lim, size=shape)
            tensors[name] = Tensor(arr, requires_grad=True, dtype=dtype)
        return cls(tensors)

    def __getitem__(self, name) -> Tensor:
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self):
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self):
        return list(self._tensors)

    @property
    def dtype(self):
        return next(iter(self._tensors.values())).dtype

    def num_values(self):
        return sum(t.size for t in self._tensors.values())

    def zero_grad(self):
        for t in self._tensors.values():
            t.zero_grad()

    def copy(self):
        return ModelParams({k: t.copy() for k, t in self._tensors.items()})

    def astype(self, dtype):
        return ModelParams({k: t.astype(dtype) for k, t in self._tensors.items()})

    def byte_digest(self):
        """Hash of all parameter bytes; used to assert evaluation purity."""
        import hashlib
        h = hashlib.sha256()
        for name, t in self._tensors.items():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()


@dataclass
class ForwardResult:
    """Logits plus the attention diagnostics of one forward pass.

    Tensors keep a leading batch axis; `single` marks a 2-d input that was
    promoted, and the numpy accessors squeeze it back off.
    """

    logits: Tensor
    probs: Tensor
    alpha: Tensor
    gate: Tensor
    attn_maps: list = field(default_factory=list)
    single: bool = False

    def _np(self, t):
        a = t.data
        return a[0] if self.single else a

    @property
    def class_probs(self):
        return self._np(self.probs)

    @property
    def pool_weights(self):
        return self._np(self.alpha)

    @property
    def se_gate(self):
        return self._np(self.gate)

    @property
    def attention_maps(self):
        return [self._np(m) for m in self.attn_maps]


def _stage(name, fn):
    try:
        return fn()
    except Exception as exc:
        try:
            raise type(exc)(f"{name}: {exc}") from exc
        except TypeError:
            raise RuntimeError(f"{name}: {exc}") from exc


def input_projection(x: Tensor, params: ModelParams) -> Tensor:
    """Affine map applied identically to every time step: (B,T,C) -> (B,T,d)."""
    return tt.add(tt.matmul(x, params["w_proj"]), params["b_proj"])


def multi_head_self_attention(h: Tensor, params: ModelParams, layer: int,
                              cfg: ModelConfig):
    """Scaled dot-product attention over time, no mask; returns (out, maps)."""
    p = f"layer{layer}."
    b, t, d = h.shape
    nh, dk = cfg.num_heads, cfg.head_dim

    def split_heads(z):
        return tt.transpose(tt.reshape(z, (b, t, nh, dk)), (0, 2, 1, 3))

    q = split_heads(tt.add(tt.matmul(h, params[p + "w_q"]), params[p + "b_q"]))
    k = split_heads(tt.add(tt.matmul(h, params[p + "w_k"]), params[p + "b_k"]))
    v = split_heads(tt.add(tt.matmul(h, params[p + "w_v"]), params[p + "b_v"]))
    scores = tt.scale(tt.matmul(q, tt.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    maps = tt.softmax(scores, axis=-1)
    mixed = tt.reshape(tt.transpose(tt.matmul(maps, v), (0, 2, 1, 3)), (b, t, d))
    out = tt.add(tt.matmul(mixed, params[p + "w_o"]), params[p + "b_o"])
    return out, maps


def encoder_layer(h: Tensor, params: ModelParams, layer: int, cfg: ModelConfig):
    """Post-norm encoder block: norm(h + attn(h)), then norm(h + ffn(h))."""
    p = f"layer{layer}."
    attn, maps = multi_head_self_attention(h, params, layer, cfg)
    h = tt.layer_norm(tt.add(h, attn), params[p + "ln1_gamma"], params[p + "ln1_beta"])
    ffn = tt.matmul(tt.relu(tt.add(tt.matmul(h, params[p + "ffn_w1"]),
                                   params[p + "ffn_b1"])),
                    params[p + "ffn_w2"])
    ffn = tt.add(ffn, params[p + "ffn_b2"])
    h = tt.layer_norm(tt.add(h, ffn), params[p + "ln2_gamma"], params[p + "ln2_beta"])
    return h, maps


def se_module(h: Tensor, params: ModelParams):
    """Channel gating: time-mean squeeze, bottleneck MLP, sigmoid, rescale.

    The gated channels are the model's feature dimensions, not the raw
    sensor axes. Returns (gated h, gate).
    """
    b, t, d = h.shape
    z = tt.reduce_mean(h, axis=1)
    s = tt.sigmoid(tt.matmul(tt.relu(tt.matmul(z, params["w1_se"])), params["w2_se"]))
    out = tt.mul(h, tt.reshape(s, (b, 1, d)))
    return out, s


def temporal_attention_pool(h: Tensor, params: ModelParams):
    """Softmax-weighted combination of time steps; returns (context, alpha)."""
    b, t, d = h.shape
    dp = params["w_a"].shape[1]
    scores = tt.matmul(tt.tanh(tt.matmul(h, params["w_a"])),
                       tt.reshape(params["v"], (dp, 1)))
    alpha = tt.softmax(tt.reshape(scores, (b, t)), axis=-1)
    c = tt.reduce_sum(tt.mul(h, tt.reshape(alpha, (b, t, 1))), axis=1)
    return c, alpha


def classify(c: Tensor, params: ModelParams) -> Tensor:
    """Class logits from the context vector: c W_c^T + b_c."""
    return tt.add(tt.matmul(c, tt.transpose(params["w_c"], (1, 0))), params["b_c"])


def forward(x: Tensor, params: ModelParams, cfg: ModelConfig) -> ForwardResult:
    """Full pass over one window (T,C) or a batch (B,T,C)."""
    single = x.ndim == 2
    if single:
        x = tt.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[1:] != (cfg.window_len, cfg.input_channels):
        raise tt.ShapeError(
            f"input shape {x.shape} does not match (window_len, input_channels)"
            f" = ({cfg.window_len}, {cfg.input_channels})")

    h = _stage("input_projection", lambda: input_projection(x, params))
    attn_maps = []
    for i in range(1, cfg.num_layers + 1):
        h, maps = _stage(f"encoder_layer_{i}", lambda: encoder_layer(h, params, i, cfg))
        attn_maps.append(maps)
    h, gate = _stage("se_module", lambda: se_module(h, params))
    c, alpha = _stage("temporal_attention_pool", lambda: temporal_attention_pool(h, params))
    logits = _stage("classifier", lambda: classify(c, params))
    probs = tt.softmax(logits, axis=-1)
    return ForwardResult(logits=logits, probs=probs, alpha=alpha, gate=gate,
                         attn_maps=attn_maps, single=single)


# --- checkpoint container ----------------------------------------------------
#
# Layout: magic "SETP", u32 version, u64 header length, JSON header, raw data.
# The header maps each parameter name to shape/offset/length; arrays are
# stored back to back as little-endian IEEE floats in parameter order.

_CKPT_MAGIC = b"SETP"
_CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig):
    dtype = "f8" if params.dtype == np.float64 else "f4"
    entries = []
    blobs = []
    offset = 0
    for name, t in params.items():
        raw = t.data.astype("<" + dtype, copy=False).tobytes()
        entries.append({"name": name, "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": asdict(cfg), "dtype": dtype, "params": entries},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<IQ", _CKPT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (magic {magic!r})")
        version, hlen = struct.unpack("<IQ", fh.read(12))
        if version != _CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen))
        data = fh.read()
    cfg = ModelConfig(**header["config"])
    dtype = np.float64 if header["dtype"] == "f8" else np.float32
    expected = dict(_param_shapes(cfg))
    tensors = {}
    for e in header["params"]:
        name, shape = e["name"], tuple(e["shape"])
        if expected.get(name) != shape:
            raise CheckpointError(f"{path}: parameter {name!r} has shape {shape}, "
                                  f"expected {expected.get(name)}")
        arr = np.frombuffer(data[e["offset"]:e["offset"] + e["nbytes"]],
                            dtype="<" + header["dtype"]).reshape(shape)
        tensors[name] = Tensor(arr, requires_grad=True, dtype=dtype)
    missing = set(expected) - set(tensors)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    return ModelParams(tensors), cfg
