"""Dataclass configs for training, attacks, purification and evaluation.

Every numeric experiment in the package is driven by one of these; all
of them are JSON-round-trippable so CLI runs can snapshot the exact
merged configuration into a manifest.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any


class ParameterError(ValueError):
    """Raised when a config or operation argument violates a precondition."""


@dataclass(frozen=True)
class TimestepRange:
    """Half-open diffusion timestep window [t_lo, t_hi) for attack sampling."""

    t_lo: int = 200
    t_hi: int = 300

    def __post_init__(self) -> None:
        if not (1 <= self.t_lo < self.t_hi):
            raise ParameterError(f"need 1 <= t_lo < t_hi, got [{self.t_lo}, {self.t_hi})")

    def validate_for(self, T: int) -> None:
        if self.t_hi > T:
            raise ParameterError(f"t_hi={self.t_hi} exceeds schedule T={T}")


@dataclass
class TrainConfig:
    """Victim training: plain-autoencoder codec phase, then denoiser phase."""

    ae_epochs: int = 30
    diff_epochs: int = 60
    batch_size: int = 32
    lr_ae: float = 3e-3
    lr_diff: float = 2e-3
    seed: int = 0
    image_size: int = 64
    latent_channels: int = 4
    base_channels: int = 16
    denoiser_channels: int = 64

    def __post_init__(self) -> None:
        if self.ae_epochs < 1 or self.diff_epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.lr_ae <= 0 or self.lr_diff <= 0:
            raise ParameterError("learning rates must be positive")


@dataclass
class PGDConfig:
    """Stage-I / baseline projected-gradient attack parameters."""

    delta: float = 16 / 255
    eta: float = 2 / 255
    n: int = 100
    direction: str = "descent"  # "ascent" or "descent"
    t_range: TimestepRange = field(default_factory=TimestepRange)
    eot_samples: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0 < self.eta <= self.delta):
            raise ParameterError(f"need 0 < eta <= delta, got eta={self.eta} delta={self.delta}")
        if self.n < 1:
            raise ParameterError("n must be >= 1")
        if self.eot_samples < 1:
            raise ParameterError("eot_samples must be >= 1")
        if self.direction not in ("ascent", "descent"):
            raise ParameterError(f"unknown direction {self.direction!r}")


@dataclass
class Stage2Config:
    """Inverted-latent optimization parameters for the anti-purification stage."""

    lambda1: float = 1.0
    lambda2: float = 10.0
    iters: int = 200
    lr: float = 0.01
    s: int = 100
    invert_steps: int = 20
    optimize_last_k: int = 1
    eot_samples: int = 1
    t_range: TimestepRange = field(default_factory=TimestepRange)
    seed: int = 0

    def __post_init__(self) -> None:
        if not (0 <= self.s <= self.iters):
            raise ParameterError(f"need 0 <= s <= iters, got s={self.s} iters={self.iters}")
        if self.optimize_last_k < 1:
            raise ParameterError("optimize_last_k must be >= 1")
        if self.lr <= 0:
            raise ParameterError("lr must be positive")
        if self.invert_steps < 1:
            raise ParameterError("invert_steps must be >= 1")


@dataclass
class PurifierConfig:
    """One purification adversary; `kind` selects which fields matter."""

    kind: str = "diffpure"  # jpeg | smooth | diffpure | gridpure
    jpeg_quality: int = 75
    kernel: int = 3
    t_star: int = 100
    grid_patch: int = 32
    grid_stride: int = 16
    grid_iters: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("jpeg", "smooth", "diffpure", "gridpure"):
            raise ParameterError(f"unknown purifier kind {self.kind!r}")
        if not (1 <= self.jpeg_quality <= 100):
            raise ParameterError("jpeg_quality must be in [1, 100]")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ParameterError("kernel must be odd and >= 1")
        if self.grid_stride > self.grid_patch:
            raise ParameterError("grid_stride must be <= grid_patch")
        if self.t_star < 0:
            raise ParameterError("t_star must be >= 0")


def default_purifier_config(kind: str, seed: int = 0) -> PurifierConfig:
    """Per-kind defaults: DiffPure runs at t*=100, grid purification at t*=10
    with 20 rounds of 32/16 patches (50% overlap on 64x64 inputs)."""
    if kind == "jpeg":
        return PurifierConfig(kind="jpeg", jpeg_quality=75, seed=seed)
    if kind == "smooth":
        return PurifierConfig(kind="smooth", kernel=3, seed=seed)
    if kind == "diffpure":
        return PurifierConfig(kind="diffpure", t_star=100, seed=seed)
    if kind == "gridpure":
        return PurifierConfig(
            kind="gridpure", t_star=10, grid_patch=32, grid_stride=16, grid_iters=20, seed=seed
        )
    raise ParameterError(f"unknown purifier kind {kind!r}")


def asdict_config(cfg: Any) -> dict:
    """Dataclass -> plain dict (nested dataclasses included)."""
    return dataclasses.asdict(cfg)


_CONFIG_TYPES = {
    "TrainConfig": TrainConfig,
    "PGDConfig": PGDConfig,
    "Stage2Config": Stage2Config,
    "PurifierConfig": PurifierConfig,
}


def config_from_dict(name: str, data: dict) -> Any:
    """Rebuild a config dataclass from a JSON dict, validating fields."""
    cls = _CONFIG_TYPES.get(name)
    if cls is None:
        raise ParameterError(f"unknown config type {name!r}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ParameterError(f"{name}: unknown fields {sorted(unknown)}")
    kwargs = dict(data)
    if "t_range" in kwargs and isinstance(kwargs["t_range"], dict):
        kwargs["t_range"] = TimestepRange(**kwargs["t_range"])
    return cls(**kwargs)


def merge_config(cls_name: str, *layers: dict) -> Any:
    """Layer dicts left-to-right over dataclass defaults (later wins)."""
    merged: dict = {}
    for layer in layers:
        for k, v in layer.items():
            merged[k] = v
    return config_from_dict(cls_name, merged)
