"""Configuration dataclasses for features, model and training."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_speakers: int = 8
    c_ema: int = 18
    d_hidden: int = 256
    d_style: int = 128
    n_mels: int = 40
    n_conformer_blocks: int = 8
    n_attn_heads: int = 4
    conv_kernel: int = 5
    predictor_kernel: int = 3
    d_ff: int = 1024
    lambda_mel: float = 0.8
    lambda_pitch: float = 0.1
    lambda_energy: float = 0.1
    dropout: float = 0.0
    seed: int = 0
    # baseline: residual conv blocks then transformer layers
    n_baseline_conv_blocks: int = 3
    n_baseline_transformer_layers: int = 6
    # acoustic front-end
    audio_rate_hz: int = 44100
    win_samples: int = 1024
    hop_samples: int = 768
    window: str = "hann"
    f0_min_hz: float = 60.0
    f0_max_hz: float = 400.0
    voicing_threshold: float = 0.3
    trim_threshold_db: float = -40.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_hidden % self.n_attn_heads:
            raise ConfigError("d_hidden must be divisible by n_attn_heads")
        if self.d_style % self.n_attn_heads:
            raise ConfigError("d_style must be divisible by n_attn_heads")
        if min(self.lambda_mel, self.lambda_pitch, self.lambda_energy) < 0:
            raise ConfigError("loss weights must be non-negative")
        for name in ("n_speakers", "c_ema", "d_hidden", "d_style", "n_mels", "d_ff",
                     "n_attn_heads", "win_samples", "hop_samples", "audio_rate_hz"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.conv_kernel % 2 == 0 or self.predictor_kernel % 2 == 0:
            raise ConfigError("kernel sizes must be odd for same padding")
        if self.window not in ("hann", "rect"):
            raise ConfigError(f"unknown window {self.window!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    max_steps: int = 1000
    batch_size: int = 1
    grad_clip_norm: float = 1.0
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        for name in ("max_steps", "batch_size", "grad_clip_norm", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.batch_size != 1:
            raise ConfigError("only batch_size=1 is supported (variable-length utterances)")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def small_config(**overrides) -> ModelConfig:
    """Reduced model used for the overfit experiment and quick tests."""
    base = dict(d_hidden=64, n_conformer_blocks=2)
    base.update(overrides)
    return ModelConfig(**base)
