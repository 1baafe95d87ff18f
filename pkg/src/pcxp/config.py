"""Typed configuration with two presets and a strict key = value file format.

`desk` is the laptop-scale preset every test runs at; `paper` is the
full-scale preset used for parameter accounting. A config file can select a
preset and override individual keys; unknown sections or keys are errors.
The resolved configuration is rendered back to canonical text, and its hash
(excluding [paths], so byte-identical runs can live in different
directories) identifies the run in every report.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass

from .errors import ConfigError

LOSS_NAMES = ("cm", "im", "reg")


@dataclass(frozen=True)
class ModelConfig:
    preset: str = "desk"
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 4
    d_expert: int = 16
    ffn_mult_image: int = 4
    # 16 patches x 32 neighbours covers all 512 input points; sparser inputs
    # blur cone-vs-pyramid silhouettes for the raster side too
    n_point_patches: int = 16
    group_size: int = 32
    n_points: int = 512
    image_hw: int = 32
    patch: int = 8
    channels: int = 3
    f1_hidden: int = 32
    pos_hidden: int = 64
    d_proj: int = 64
    n_angle_bins: int = 36
    tau: float = 0.07
    sharing: str = "shared"
    ln_eps: float = 1e-5
    # roughly 1/sqrt(d_model); 0.02 starves signal propagation at desk width
    init_std: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must divide evenly into heads")
        if self.image_hw % self.patch:
            raise ConfigError("patch must tile the image exactly")
        if self.sharing not in ("shared", "separate"):
            raise ConfigError(f"unknown sharing mode {self.sharing!r}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_image_patches(self) -> int:
        return (self.image_hw // self.patch) ** 2

    @property
    def point_seq_len(self) -> int:
        return self.n_point_patches + 1

    @property
    def image_seq_len(self) -> int:
        return self.n_image_patches + 1


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    warmup_steps: int = 50
    clip_norm: float = 1.0
    losses: tuple = LOSS_NAMES
    trace_all: bool = False
    surrogate: str = "warmup"
    warmup_epochs: int = 16
    warmup_lr: float = 3e-3
    warmup_warmup_steps: int = 20
    warmup_views: int = 2
    fps_seeding: str = "per_sample"
    ckpt_every: int = 0

    def __post_init__(self):
        for name in self.losses:
            if name not in LOSS_NAMES:
                raise ConfigError(f"unknown loss term {name!r}")
        if self.surrogate not in ("warmup", "random-frozen"):
            raise ConfigError(f"unknown surrogate mode {self.surrogate!r}")
        if self.fps_seeding not in ("per_sample", "fixed"):
            raise ConfigError(f"unknown fps_seeding {self.fps_seeding!r}")


@dataclass(frozen=True)
class DataConfig:
    n_points: int = 512
    noise_sigma: float = 0.02
    scale_jitter: float = 0.2
    train_per_class: int = 100
    test_per_class: int = 20


@dataclass(frozen=True)
class EvalConfig:
    protocol: str = "linear"
    # AdamW moves each coordinate about lr per step, so a short probe needs
    # the higher rate; 50 epochs at 1e-3 leaves the head visibly undertrained
    epochs: int = 100
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.0
    warmup_steps: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.protocol not in ("full", "linear", "mlp3"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")


_MODEL_PRESETS = {
    "desk": {},
    "paper": dict(
        d_model=768,
        n_heads=12,
        n_blocks=12,
        d_expert=192,
        n_point_patches=160,
        group_size=32,
        n_points=2048,
        image_hw=224,
        patch=16,
        f1_hidden=384,
        pos_hidden=128,
        d_proj=256,
        init_std=0.02,
    ),
}

_TRAIN_PRESETS = {
    "desk": {},
    "paper": dict(epochs=300, batch_size=1024, lr=5e-4, warmup_steps=400),
}


def model_preset(name: str, **overrides) -> ModelConfig:
    if name not in _MODEL_PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    kw = dict(_MODEL_PRESETS[name])
    kw.update(overrides)
    return ModelConfig(preset=name, **kw)


def train_preset(name: str, **overrides) -> TrainConfig:
    if name not in _TRAIN_PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    kw = dict(_TRAIN_PRESETS[name])
    kw.update(overrides)
    return TrainConfig(**kw)


@dataclass
class Settings:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    eval: EvalConfig
    paths: dict

    def resolved_text(self) -> str:
        return _render(self)

    def config_hash(self) -> str:
        """Hash of the resolved config minus [paths]; identifies the run."""
        lines = [
            ln
            for ln in _render(self).splitlines(keepends=True)
            if not ln.startswith("[paths]") and not ln.startswith("path.")
        ]
        return hashlib.sha256("".join(lines).encode("utf-8")).hexdigest()


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    return repr(value) if isinstance(value, float) else str(value)


def _render(settings: Settings) -> str:
    out = io.StringIO()
    for section, obj in (
        ("model", settings.model),
        ("train", settings.train),
        ("data", settings.data),
        ("eval", settings.eval),
    ):
        out.write(f"[{section}]\n")
        for f in sorted(dataclasses.fields(obj), key=lambda f: f.name):
            out.write(f"{f.name} = {_fmt(getattr(obj, f.name))}\n")
        out.write("\n")
    out.write("[paths]\n")
    for key in sorted(settings.paths):
        out.write(f"path.{key} = {settings.paths[key]}\n")
    return out.getvalue()


def _coerce(section: str, field: dataclasses.Field, raw: str):
    raw = raw.strip()
    try:
        if field.type in ("int", int):
            return int(raw)
        if field.type in ("float", float):
            return float(raw)
        if field.type in ("bool", bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if field.type in ("tuple", tuple):
            return tuple(x.strip() for x in raw.split(",") if x.strip())
        return raw
    except ValueError as e:
        raise ConfigError(f"[{section}] {field.name}: cannot parse {raw!r}") from e


def load_settings(path: str | None = None, overrides=None) -> Settings:
    """Build Settings from an optional config file plus override triples.

    File syntax is configparser-style `key = value` under [section] headers;
    overrides is an iterable of (section, key, value) applied on top. Any key
    that does not name a dataclass field of its section is an error.
    """
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except configparser.Error as e:
            raise ConfigError(f"malformed config {path}: {e}") from e
    raw = {s: dict(parser.items(s)) for s in parser.sections()}
    for section, key, value in overrides or ():
        raw.setdefault(section, {})[key] = value

    known = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig, "eval": EvalConfig}
    for section in raw:
        if section not in known and section != "paths":
            raise ConfigError(f"unknown config section [{section}]")

    preset = raw.get("model", {}).get("preset", "desk")
    if preset not in _MODEL_PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")

    built = {}
    for section, cls in known.items():
        fields = {f.name: f for f in dataclasses.fields(cls)}
        base: dict = {}
        if section == "model":
            base.update(_MODEL_PRESETS[preset], preset=preset)
        elif section == "train":
            base.update(_TRAIN_PRESETS[preset])
        for key, value in raw.get(section, {}).items():
            if key not in fields:
                raise ConfigError(f"unknown key '{key}' in section [{section}]")
            base[key] = _coerce(section, fields[key], value)
        built[section] = cls(**base)

    paths = dict(raw.get("paths", {}))
    return Settings(built["model"], built["train"], built["data"], built["eval"], paths)
