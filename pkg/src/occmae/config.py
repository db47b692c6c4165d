"""Flat ``key = value`` run configuration shared by every command.

Precedence: command-line overrides > config file > defaults. Lines starting
with ``#`` and trailing ``# ...`` comments are ignored; tuples are written as
comma-separated values; grid dims as ``WxHxD``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Optional, Tuple

from .errors import ConfigError
from .loss import LossConfig
from .masking import MaskConfig
from .scene import SceneSpec
from .voxel import GridConfig


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 1
    learning_rate: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    scenes_per_epoch: int = 0  # 0: every scene
    resample_mask_per_step: bool = True
    loss_region: str = "all"  # or "masked": only voxels hidden from the encoder
    threshold: float = 0.5

    def validate(self):
        if int(self.epochs) != self.epochs or self.epochs < 1:
            raise ConfigError(f"epochs: must be an integer >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size: must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate: must be > 0, got {self.learning_rate}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas: need two values in [0, 1), got {self.betas}")
        if not self.eps > 0:
            raise ConfigError(f"eps: must be > 0, got {self.eps}")
        if self.scenes_per_epoch < 0:
            raise ConfigError("scenes_per_epoch: must be >= 0")
        if self.loss_region not in ("all", "masked"):
            raise ConfigError(f"loss_region: expected 'all' or 'masked', got {self.loss_region!r}")
        if not (0 < self.threshold < 1):
            raise ConfigError(f"threshold: must lie in (0, 1), got {self.threshold}")
        return self


def _floats(n):
    def parse(text):
        vals = tuple(float(v) for v in str(text).split(","))
        if len(vals) != n:
            raise ValueError(f"expected {n} comma-separated numbers")
        return vals
    return parse


def _dims(text):
    vals = tuple(int(v) for v in str(text).lower().replace(",", "x").split("x"))
    if len(vals) != 3:
        raise ValueError("expected WxHxD")
    return vals


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true/false")


def _opt_float(text):
    return None if str(text).strip().lower() in ("none", "") else float(text)


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


# key -> (section, attribute, parser)
KEYS = {
    "seed": ("root", "seed", int),
    "deterministic": ("root", "deterministic", _bool),
    "positional": ("root", "positional", _bool),
    "num_boxes": ("root", "num_boxes", int),
    "sensor_origin": ("scene", "sensor_origin", _floats(3)),
    "num_rays": ("scene", "num_rays", int),
    "max_range": ("scene", "max_range", float),
    "ground_z": ("scene", "ground_z", _opt_float),
    "dropout_per_band": ("scene", "dropout_per_band", _floats(3)),
    "noise_sigma": ("scene", "noise_sigma", float),
    "grid": ("grid", "dims", _dims),
    "voxel_size": ("grid", "voxel_size", _floats(3)),
    "min_corner": ("grid", "min_corner", _floats(3)),
    "mask_mode": ("mask", "mode", str),
    "ratios": ("mask", "ratios", _floats(3)),
    "band_edges": ("mask", "band_edges", _floats(2)),
    "range_metric": ("mask", "range_metric", str),
    "loss_mode": ("loss", "mode", str),
    "alpha": ("loss", "alpha", float),
    "gamma": ("loss", "gamma", float),
    "epochs": ("train", "epochs", int),
    "batch_size": ("train", "batch_size", int),
    "learning_rate": ("train", "learning_rate", float),
    "betas": ("train", "betas", _floats(2)),
    "adam_eps": ("train", "eps", float),
    "scenes_per_epoch": ("train", "scenes_per_epoch", int),
    "resample_mask_per_step": ("train", "resample_mask_per_step", _bool),
    "loss_region": ("train", "loss_region", str),
    "threshold": ("train", "threshold", float),
}


@dataclass(frozen=True)
class RunConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    grid: GridConfig = field(default_factory=GridConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    deterministic: bool = True
    positional: bool = True
    num_boxes: int = 8

    @property
    def sensor_origin(self):
        return self.scene.sensor_origin

    def with_values(self, values: dict) -> "RunConfig":
        """Apply raw ``{key: text}`` values (unknown keys are an error)."""
        sections = {"scene": {}, "grid": {}, "mask": {}, "loss": {}, "train": {}, "root": {}}
        for key, raw in values.items():
            if key not in KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            section, attr, parse = KEYS[key]
            try:
                sections[section][attr] = parse(raw) if isinstance(raw, str) else raw
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key}: cannot parse {raw!r} ({exc})") from None
        cfg = self
        for section in ("scene", "grid", "mask", "loss", "train"):
            if sections[section]:
                cfg = replace(cfg, **{section: replace(getattr(cfg, section), **sections[section])})
        if sections["root"]:
            cfg = replace(cfg, **sections["root"])
        # the root seed drives every consumer
        return replace(cfg, train=replace(cfg.train, seed=cfg.seed),
                       scene=replace(cfg.scene, band_edges=cfg.mask.band_edges))

    def validate(self):
        self.scene.validate()
        self.mask.validate()
        self.loss.validate()
        self.train.validate()
        if self.num_boxes < 0:
            raise ConfigError("num_boxes: must be >= 0")
        from .model import build_schedule  # local: model imports voxel only

        build_schedule(self.grid.dims, self.positional)
        return self

    def to_values(self) -> dict:
        out = {}
        for key, (section, attr, _) in KEYS.items():
            obj = self if section == "root" else getattr(self, section)
            out[key] = _fmt(getattr(obj, attr))
        return out

    def dump(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_values().items())


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    values = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                values.update(parse_config_text(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    values.update(overrides or {})
    return RunConfig().with_values(values)
