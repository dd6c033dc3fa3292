"""Run configuration: defaults, config-file parsing, overrides, validation.

Config files are line-oriented ``key = value`` text; '#' starts a comment.
Command-line overrides are ``key=value`` tokens. Precedence is
defaults < file < overrides. Unknown keys are rejected, values are typed per
key, and cross-field invariants are checked after merging.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .data import DEFAULT_LABELS
from .model import ModelConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Bad key, unparseable value, or violated invariant."""


def _parse_bool(s):
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_labels(s):
    items = [part.strip() for part in s.split(",") if part.strip()]
    return tuple(items)


@dataclass
class RunConfig:
    # model (ffn_hidden 0 means "derive as 4 * model_dim")
    input_channels: int = 3
    window_len: int = 200
    model_dim: int = 128
    num_layers: int = 2
    num_heads: int = 4
    ffn_hidden: int = 0
    se_reduction: int = 16
    pool_hidden: int = 64
    num_classes: int = 6
    # training
    learning_rate: float = 0.001
    batch_size: int = 64
    epochs: int = 65
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # execution
    seed: int = 0
    precision: str = "f32"
    workers: int = 1
    backend: str = "auto"
    # data
    schema_fields: int = 6
    labels: tuple = field(default_factory=lambda: DEFAULT_LABELS)
    window_stride: int = 100
    train_fraction: float = 0.8
    split_by_user: bool = False
    gap_tolerance: int = 0
    synth_per_class: int = 200
    eval_split: str = "val"
    # paths
    raw_path: str = ""
    data_path: str = ""
    checkpoint_path: str = ""
    out_dir: str = "out"
    # gradient check
    gradcheck_coords: int = 600
    gradcheck_eps: float = 1e-5
    gradcheck_threshold: float = 1e-4

    def model_config(self) -> ModelConfig:
        ffn = self.ffn_hidden if self.ffn_hidden else 4 * self.model_dim
        return ModelConfig(
            input_channels=self.input_channels, window_len=self.window_len,
            model_dim=self.model_dim, num_layers=self.num_layers,
            num_heads=self.num_heads, ffn_hidden=ffn,
            se_reduction=self.se_reduction, pool_hidden=self.pool_hidden,
            num_classes=self.num_classes)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            epochs=self.epochs, beta1=self.beta1, beta2=self.beta2,
            adam_eps=self.adam_eps, seed=self.seed, precision=self.precision)

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


_PARSERS = {bool: _parse_bool, int: int, float: float, str: lambda s: s.strip(),
            tuple: _parse_labels}

_FIELD_TYPES = {
    "labels": tuple,
    **{f.name: f.type for f in fields(RunConfig) if f.name != "labels"},
}
# dataclass field types arrive as strings under `from __future__ import annotations`
_TYPE_BY_NAME = {"int": int, "float": float, "str": str, "bool": bool, "tuple": tuple}


def _coerce(key, raw, line=None):
    ftype = _FIELD_TYPES[key]
    if isinstance(ftype, str):
        ftype = _TYPE_BY_NAME[ftype]
    try:
        return _PARSERS[ftype](raw)
    except ValueError as exc:
        where = f" (line {line})" if line is not None else ""
        raise ConfigError(f"bad value for {key!r}{where}: {exc}") from None


def _apply(cfg_dict, key, raw, line=None):
    key = key.strip()
    if key not in _FIELD_TYPES:
        where = f" (line {line})" if line is not None else ""
        raise ConfigError(f"unknown key {key!r}{where}")
    cfg_dict[key] = _coerce(key, raw.strip(), line)


def _validate(cfg: RunConfig):
    checks = [
        (cfg.model_dim % cfg.num_heads == 0,
         f"model_dim {cfg.model_dim} must be divisible by num_heads {cfg.num_heads}"),
        (cfg.model_dim % cfg.se_reduction == 0,
         f"model_dim {cfg.model_dim} must be divisible by se_reduction {cfg.se_reduction}"),
        (cfg.num_classes >= 2, "num_classes must be >= 2"),
        (cfg.window_len >= 1, "window_len must be >= 1"),
        (cfg.window_stride >= 1, "window_stride must be >= 1"),
        (cfg.learning_rate > 0, "learning_rate must be > 0"),
        (cfg.batch_size >= 1, "batch_size must be >= 1"),
        (cfg.epochs >= 1, "epochs must be >= 1"),
        (cfg.workers >= 1, "workers must be >= 1"),
        (cfg.precision in ("f32", "f64"), "precision must be f32 or f64"),
        (cfg.backend in ("auto", "numpy", "compiled"),
         "backend must be auto, numpy or compiled"),
        (cfg.schema_fields >= 6, "schema_fields must be >= 6"),
        (0.0 < cfg.train_fraction < 1.0, "train_fraction must be in (0, 1)"),
        (cfg.eval_split in ("val", "train", "all"),
         "eval_split must be val, train or all"),
        (cfg.synth_per_class >= 2, "synth_per_class must be >= 2"),
        (cfg.gradcheck_coords >= 1, "gradcheck_coords must be >= 1"),
        (cfg.gradcheck_eps > 0, "gradcheck_eps must be > 0"),
        (cfg.gradcheck_threshold > 0, "gradcheck_threshold must be > 0"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)


def load_config(path=None, overrides=()) -> RunConfig:
    """Merge defaults, an optional config file and key=value overrides."""
    values = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
        for lineno, raw in enumerate(lines, start=1):
            text = raw.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"expected 'key = value' (line {lineno}): {raw.strip()!r}")
            key, value = text.split("=", 1)
            _apply(values, key, value, line=lineno)
    for token in overrides:
        if "=" not in token:
            raise ConfigError(f"override {token!r} is not of the form key=value")
        key, value = token.split("=", 1)
        _apply(values, key, value)
    cfg = RunConfig(**values)
    _validate(cfg)
    return cfg
