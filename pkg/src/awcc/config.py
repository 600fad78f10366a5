"""Run configuration: one flat JSON document drives every command.

Unknown keys are rejected outright so typos never silently fall back to
defaults. The full config is embedded into every checkpoint.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

from .exceptions import ConfigError
from .losses import LossConfig
from .model import ModelConfig


@dataclass
class RunConfig:
    # model
    preset: str = "tiny"
    crop_size: int | None = None          # override the preset's crop side
    backbone_weights: str | None = None   # .npz container for the paper backbone
    # data / augmentation
    annotations: str | None = None
    u_min: float = 0.5                    # lower bound of the crop-overlap factor
    flip_prob: float = 0.5
    # optimization
    steps: int = 0
    seed: int = 0
    lr: float = 1e-5
    grad_clip: float = 10.0
    checkpoint_every: int = 0             # 0: only the final checkpoint
    out_dir: str = "runs/default"
    deterministic: bool = False
    # losses
    compact_weight: float = 1.0
    contrast_weight: float = 1.0
    temperature: float = 0.2
    queue_size: int = 64
    sigma: float = 8.0
    background_margin: float | None = None
    background: bool = True
    positive_gradient: bool = False       # run the positive's weather branch with grad
    stop_positive_gradient: bool = False  # detach the positive inside the contrastive term
    label_conditioned: bool = False       # pick queries by weather tag (4-prototype bank)
    # evaluation
    subset_key: str | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a flat JSON object")
        return cls.from_dict(data)

    _BOOL_KEYS = ("deterministic", "background", "positive_gradient",
                  "stop_positive_gradient", "label_conditioned")
    _INT_KEYS = ("steps", "seed", "checkpoint_every", "queue_size")
    _NUM_KEYS = ("u_min", "flip_prob", "lr", "grad_clip", "compact_weight",
                 "contrast_weight", "temperature", "sigma")

    def validate(self):
        for key in self._BOOL_KEYS:
            if not isinstance(getattr(self, key), bool):
                raise ConfigError(f"config key {key!r} must be a boolean")
        for key in self._INT_KEYS:
            if not isinstance(getattr(self, key), int) or isinstance(getattr(self, key), bool):
                raise ConfigError(f"config key {key!r} must be an integer")
        for key in self._NUM_KEYS:
            if not isinstance(getattr(self, key), (int, float)) \
                    or isinstance(getattr(self, key), bool):
                raise ConfigError(f"config key {key!r} must be a number")
        if self.crop_size is not None and not isinstance(self.crop_size, int):
            raise ConfigError("config key 'crop_size' must be an integer")
        if self.preset not in ("paper", "tiny"):
            raise ConfigError(f"preset must be 'paper' or 'tiny', got {self.preset!r}")
        if not 0.0 < self.u_min <= 1.0:
            raise ConfigError(f"u_min must lie in (0, 1], got {self.u_min}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.steps < 0:
            raise ConfigError(f"steps must be non-negative, got {self.steps}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.subset_key not in (None, "weather"):
            raise ConfigError(f"subset_key must be null or 'weather', got {self.subset_key!r}")
        # delegate range checks on the loss knobs
        self.loss_config()

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name)
                for f in fields(self) if not f.name.startswith("_")}

    def model_config(self) -> ModelConfig:
        overrides = {}
        if self.crop_size is not None:
            overrides["crop_size"] = self.crop_size
        return ModelConfig.from_preset(self.preset, **overrides)

    def loss_config(self) -> LossConfig:
        return LossConfig(
            compact_weight=self.compact_weight,
            contrast_weight=self.contrast_weight,
            temperature=self.temperature,
            queue_size=self.queue_size,
            sigma=self.sigma,
            background_margin=self.background_margin,
            background_enabled=self.background,
        )

    def resolve_annotations(self) -> Path:
        if not self.annotations:
            raise ConfigError("config is missing 'annotations'")
        path = Path(self.annotations)
        root = os.environ.get("AWCC_DATA_ROOT")
        if not path.is_absolute() and root:
            path = Path(root) / path
        return path
