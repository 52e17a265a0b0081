"""Run configuration, the TOML config file, and the learning-rate schedule."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .gcm import LossWeights
from .networks import ArchitectureConfig


@dataclass
class TrainConfig:
    """Everything a training run needs; defaults follow the canonical recipe.

    Total iteration count and the pretraining length are configurable (the
    linear decay only fixes their relationship, not their values).
    """

    resolution: int = 256
    batch_size: int = 8
    beta1: float = 0.5
    beta2: float = 0.999
    lr_pam: float = 5e-4
    lr_main: float = 1e-4
    warm_iterations: int = 20000
    total_iterations: int = 40000
    pam_iterations: int = 10000
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    data_root: str = ""
    out_dir: str = "runs/default"
    checkpoint_every: int = 1000
    sample_every: int = 1000
    power_iterations: int = 1
    toy_image_size: int = 64  # used by the built-in toy data path

    def validate(self) -> "TrainConfig":
        if self.warm_iterations > self.total_iterations:
            raise ConfigError("warm_iterations must be <= total_iterations")
        if self.lr_pam <= 0 or self.lr_main <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.resolution < 16 or self.resolution & (self.resolution - 1):
            raise ConfigError("resolution must be a power of two >= 16")
        if self.checkpoint_every < 1 or self.sample_every < 1:
            raise ConfigError("checkpoint/sample cadence must be >= 1")
        try:
            self.weights.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def arch(self) -> ArchitectureConfig:
        return ArchitectureConfig(resolution=self.resolution,
                                  power_iterations=self.power_iterations)

    def digest(self) -> str:
        """Digest of the run-defining fields (paths excluded, so a run can
        resume into a different directory)."""
        payload = asdict(self)
        payload.pop("out_dir")
        payload.pop("data_root")
        return hashlib.sha256(
            json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    """Constant during warm-up, then linear decay to zero at the end."""
    if iteration >= cfg.total_iterations:
        return 0.0
    if iteration < cfg.warm_iterations:
        return cfg.lr_main
    span = cfg.total_iterations - cfg.warm_iterations
    return cfg.lr_main * (cfg.total_iterations - iteration) / span


# Config file sections -> dataclass fields. Flags override file values.
_SECTIONS = {
    "run": ("seed", "out_dir", "data_root"),
    "model": ("resolution", "power_iterations", "toy_image_size"),
    "train": ("batch_size", "beta1", "beta2", "lr_pam", "lr_main",
              "warm_iterations", "total_iterations", "pam_iterations",
              "checkpoint_every", "sample_every"),
}
_WEIGHT_FIELDS = tuple(f.name for f in fields(LossWeights))


def load_config(path: Path) -> TrainConfig:
    """Read a TOML config (sections: run, model, train, loss_weights)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from exc

    cfg = TrainConfig()
    for section, keys in _SECTIONS.items():
        table = raw.get(section, {})
        for key, value in table.items():
            if key not in keys:
                raise ConfigError(f"{path}: unknown key [{section}] {key}")
            cfg = replace(cfg, **{key: value})
    weight_table = raw.get("loss_weights", {})
    for key, value in weight_table.items():
        if key not in _WEIGHT_FIELDS:
            raise ConfigError(f"{path}: unknown loss weight {key!r}")
        cfg = replace(cfg, weights=replace(cfg.weights, **{key: value}))
    known = set(_SECTIONS) | {"loss_weights"}
    for section in raw:
        if section not in known:
            raise ConfigError(f"{path}: unknown section [{section}]")
    return cfg.validate()


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    """Apply non-None CLI flag values on top of a config."""
    clean = {k: v for k, v in overrides.items() if v is not None}
    if clean:
        cfg = replace(cfg, **clean)
    return cfg.validate()
