"""Flat JSON configuration with strict key checking.

Every config file is a single JSON object. Unknown keys are rejected,
missing keys take the dataclass defaults below.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass
from pathlib import Path

from .dae import CorruptionSpec
from .data.synth import SynthSpec
from .grabmask import GrabMaskParams
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    # optimisation
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 30
    seed: int = 0
    # loss weights
    lambda_s: float = 1.0
    lambda_re: float = 1.0
    lambda_d: float = 1.0
    grl_lambda: float = 1.0
    grl_schedule: str = "constant"  # "constant" or "dann" (2/(1+exp(-10 p)) - 1 ramp)
    ema_alpha: float = 0.99
    pseudo_threshold: float | None = None
    ls_rampup: float = 0.0  # fraction of training over which lambda_s ramps up; 0 disables
    # network
    feature_dim: int = 128
    conv1: int = 16
    conv2: int = 32
    disc_hidden: int = 64
    dropout: float = 0.5
    dae_hidden: int | None = None
    v_min: float = 0.1
    v_max: float = 0.5
    noise_sigma: float = 1.0
    # GrabMask preprocessing of target images
    gm_components: int = 5
    gm_gamma: float = 50.0
    gm_outer_iters: int = 5
    gm_em_iters: int = 10
    gm_seed_frac: float = 0.6
    gm_blur_sigma: float | None = None  # None: 4 px per 32 px of image side

    def __post_init__(self):
        for name in ("lr", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("weight_decay", "lambda_s", "lambda_re", "lambda_d", "grl_lambda", "epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not 0.0 <= self.ema_alpha <= 1.0:
            raise ConfigError(f"ema_alpha must lie in [0, 1], got {self.ema_alpha}")
        if self.grl_schedule not in ("constant", "dann"):
            raise ConfigError(f"grl_schedule must be 'constant' or 'dann', got {self.grl_schedule!r}")
        if not 0.0 <= self.ls_rampup <= 1.0:
            raise ConfigError(f"ls_rampup must lie in [0, 1], got {self.ls_rampup}")
        if self.pseudo_threshold is not None and not 0.0 <= self.pseudo_threshold <= 1.0:
            raise ConfigError("pseudo_threshold must lie in [0, 1]")
        try:
            self.corruption()
            self.grabmask(32)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def corruption(self) -> CorruptionSpec:
        return CorruptionSpec(self.v_min, self.v_max, self.noise_sigma)

    def model_config(self, num_classes: int, image_side: int = 32) -> ModelConfig:
        return ModelConfig(
            image_side=image_side, conv1=self.conv1, conv2=self.conv2, feature_dim=self.feature_dim,
            num_classes=num_classes, disc_hidden=self.disc_hidden, dropout=self.dropout,
            dae_hidden=self.dae_hidden, corruption=self.corruption(),
        )

    def grabmask(self, image_side: int) -> GrabMaskParams:
        blur = self.gm_blur_sigma if self.gm_blur_sigma is not None else 4.0 * image_side / 32.0
        return GrabMaskParams(
            K=self.gm_components, gamma=self.gm_gamma, outer_iters=self.gm_outer_iters,
            em_iters=self.gm_em_iters, blur_sigma=blur, seed_frac=self.gm_seed_frac,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_KINDS = {"train": TrainConfig, "grabmask": GrabMaskParams, "synth": SynthSpec}


def _check_type(key: str, value, annotation) -> object:
    hint = annotation
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        hint = next(a for a in args if a is not type(None))
        origin = typing.get_origin(hint)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key {key!r} expects a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key {key!r} expects an integer, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"key {key!r} expects a string, got {value!r}")
        return value
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"key {key!r} expects a list, got {value!r}")
        args = typing.get_args(hint)
        if args and args[-1] is Ellipsis:
            return tuple(_check_type(key, v, args[0]) for v in value)
        if len(value) != len(args):
            raise ConfigError(f"key {key!r} expects {len(args)} items, got {len(value)}")
        return tuple(_check_type(key, v, a) for v, a in zip(value, args))
    return value


def config_from_dict(data: dict, kind: str = "train"):
    cls = _KINDS.get(kind)
    if cls is None:
        raise ConfigError(f"unknown config kind {kind!r}; choose from {sorted(_KINDS)}")
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[key] = _check_type(key, value, hints[key])
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config(path, kind: str = "train"):
    """Load a flat JSON object into TrainConfig, GrabMaskParams or SynthSpec."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON: {exc}") from exc
    return config_from_dict(data, kind)
