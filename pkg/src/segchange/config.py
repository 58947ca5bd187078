"""Run configuration and its flat ``key = value`` text format.

Top-level training keys are bare (``lr_main = 1e-4``); module settings use
dotted section keys (``bev.mode = additive_linear``). Lists are comma
separated. Unknown keys are rejected.
"""
import dataclasses
import os
from dataclasses import dataclass, field
from typing import Tuple

from .errors import ConfigError
from .textcond import URL_ENV_VAR


@dataclass
class BackboneConfig:
    name: str = "tiny"
    channels: Tuple[int, ...] = (16, 32, 64, 128)
    seed: int = 0


@dataclass
class HttpConfig:
    url: str = ""


@dataclass
class TextConfig:
    mode: str = "dynamic"
    template: str = "a remote sensing image pair with building changes"
    max_len: int = 8
    provider: str = "stub"
    seed: int = 0
    # 0 means "same as fuse.fpn_channels"
    width: int = 0
    http: HttpConfig = field(default_factory=HttpConfig)


@dataclass
class BEVConfig:
    mode: str = "additive_linear"
    attn_dim: int = 16
    seed: int = 0


@dataclass
class FuseConfig:
    diff_channels: int = 64
    fpn_channels: int = 64


@dataclass
class DecoderConfig:
    num_queries: int = 8
    layers: int = 2
    threshold: float = 0.5


@dataclass
class DataConfig:
    root: str = ""
    train_split: str = "train"
    # empty: validate on the training split
    val_split: str = ""
    prompt: str = ""


@dataclass
class TrainConfig:
    lr_main: float = 1e-4
    lr_backbone: float = 1e-5
    weight_decay: float = 1e-4
    epochs: int = 128
    batch_size: int = 16
    sched_step: int = 20
    sched_gamma: float = 0.1
    seed: int = 0
    # 0 means no cap on optimizer steps
    max_steps: int = 0
    dtype: str = "float32"
    out_dir: str = ""
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    text: TextConfig = field(default_factory=TextConfig)
    bev: BEVConfig = field(default_factory=BEVConfig)
    fuse: FuseConfig = field(default_factory=FuseConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        from .bev import MODES

        if min(self.lr_main, self.lr_backbone) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.weight_decay < 0 or not 0 < self.sched_gamma <= 1:
            raise ConfigError("weight_decay must be >= 0 and sched_gamma in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.sched_step < 1:
            raise ConfigError("epochs, batch_size and sched_step must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.bev.mode not in MODES:
            raise ConfigError(f"bev.mode must be one of {MODES}, got {self.bev.mode!r}")
        if self.text.mode not in ("none", "static", "dynamic"):
            raise ConfigError(f"text.mode must be none, static or dynamic, got {self.text.mode!r}")
        if self.text.provider not in ("stub", "http"):
            raise ConfigError(f"text.provider must be stub or http, got {self.text.provider!r}")
        if self.text.mode == "static" and not self.text.template.strip():
            raise ConfigError("text.mode=static needs a non-empty text.template")
        if self.text.max_len < 1 or self.text.width < 0:
            raise ConfigError("text.max_len must be >= 1 and text.width >= 0")
        if len(self.backbone.channels) != 4 or min(self.backbone.channels) < 1:
            raise ConfigError("backbone.channels needs 4 positive widths")
        if self.bev.attn_dim < 1 or self.fuse.diff_channels < 1 or self.fuse.fpn_channels < 1:
            raise ConfigError("bev.attn_dim and fuse widths must be >= 1")
        if self.decoder.num_queries < 1 or self.decoder.layers < 1:
            raise ConfigError("decoder.num_queries and decoder.layers must be >= 1")
        if not 0 < self.decoder.threshold < 1:
            raise ConfigError("decoder.threshold must lie in (0, 1)")
        return self

    @property
    def text_width(self):
        return self.text.width or self.fuse.fpn_channels


def _walk(obj, prefix=""):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            yield from _walk(value, key + ".")
        else:
            yield key, obj, f.name, value


def to_flat(cfg: TrainConfig) -> dict:
    return {key: value for key, _, _, value in _walk(cfg)}


def _format(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(key, default, raw):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def from_flat(values: dict, base: TrainConfig = None) -> TrainConfig:
    cfg = copy_config(base) if base else TrainConfig()
    slots = {key: (owner, name, default) for key, owner, name, default in _walk(cfg)}
    for key, raw in values.items():
        if key not in slots:
            raise ConfigError(f"unknown config key {key!r}")
        owner, name, default = slots[key]
        value = raw if not isinstance(raw, str) else _coerce(key, default, raw)
        if isinstance(default, tuple) and not isinstance(value, tuple):
            value = tuple(value)
        setattr(owner, name, value)
    return cfg


def copy_config(cfg: TrainConfig) -> TrainConfig:
    return from_flat_values(to_flat(cfg))


def from_flat_values(flat: dict) -> TrainConfig:
    cfg = TrainConfig()
    slots = {key: (owner, name) for key, owner, name, _ in _walk(cfg)}
    for key, value in flat.items():
        owner, name = slots[key]
        setattr(owner, name, value)
    return cfg


def serialize(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in to_flat(cfg).items())


def parse(text: str, env=None) -> TrainConfig:
    """Parse the flat text format; ``SEGCHANGE_TEXT_URL`` overrides ``text.http.url``."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = raw
    cfg = from_flat(values)
    env = os.environ if env is None else env
    if env.get(URL_ENV_VAR):
        cfg.text.http.url = env[URL_ENV_VAR]
    return cfg.validate()


def load_config(path: str) -> TrainConfig:
    try:
        with open(path, encoding="utf-8") as f:
            return parse(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e


def desk_preset(**overrides) -> TrainConfig:
    """Small settings that train on 64x64 synthetic scenes in minutes on one CPU core."""
    flat = {
        "epochs": 30,
        "batch_size": 4,
        "lr_main": 2e-3,
        "lr_backbone": 2e-3,
        "sched_step": 100,
        "backbone.channels": (8, 16, 24, 32),
        "bev.attn_dim": 8,
        "fuse.diff_channels": 16,
        "fuse.fpn_channels": 16,
        "decoder.num_queries": 4,
        "decoder.layers": 1,
    }
    flat.update(overrides)
    return from_flat(flat).validate()
