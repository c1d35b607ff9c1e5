"""Typed run configuration.

These are non-table SQLModel classes, so they validate on construction and
dump to plain JSON for manifests and checkpoint sidecars. The defaults are the
desk-scale training setup the CLI uses.
"""

from enum import Enum
from typing import Any

from sqlmodel import Field, SQLModel


class ScheduleShape(str, Enum):
    """Curve used to raise beta from its start to its end value."""

    LINEAR = "linear"
    STEP = "step"
    COSINE = "cosine"


class Variant(str, Enum):
    """Panel embedders the relation network can sit on."""

    VAE_FROZEN = "vae_frozen"
    VAE_FINETUNE = "vae_finetune"
    CNN_BASELINE = "cnn_baseline"

    @property
    def label(self) -> str:
        return "CNN-WReN" if self == Variant.CNN_BASELINE else "VAE-WReN"


class VaeTrainConfig(SQLModel):
    epochs: int = Field(default=10, gt=0)
    lr: float = Field(default=3e-4, gt=0)
    batch_problems: int = Field(default=32, gt=0)
    beta_start: float = Field(default=0.5, ge=0)
    beta_end: float = Field(default=4.0, ge=0)
    ramp_fraction: float = Field(default=0.5, gt=0, le=1)
    schedule: ScheduleShape = ScheduleShape.LINEAR
    seed: int = 0
    latent_dim: int = Field(default=64, gt=0)
    channels: int = Field(default=32, gt=0)
    bn_momentum: float = Field(default=0.1, gt=0, lt=1)
    bn_eps: float = Field(default=1e-5, gt=0)
    max_steps: int | None = Field(default=None, gt=0)


class WrenArchitecture(SQLModel):
    g_width: int = Field(default=512, gt=0)
    g_layers: int = Field(default=3, gt=0)
    f_hidden: int = Field(default=256, gt=0)
    dropout: float = Field(default=0.5, ge=0, lt=1)
    cnn_features: int = Field(default=512, gt=0)


class WrenTrainConfig(SQLModel):
    variant: Variant = Variant.VAE_FROZEN
    frozen_epochs: int = Field(default=6, ge=0)
    finetune_epochs: int = Field(default=2, ge=0)
    lr: float = Field(default=3e-4, gt=0)
    batch_problems: int = Field(default=32, gt=0)
    seed: int = 0
    architecture: WrenArchitecture = Field(default_factory=WrenArchitecture)


class ProbeConfig(SQLModel):
    epochs: int = Field(default=5, gt=0)
    lr: float = Field(default=3e-4, gt=0)
    batch_problems: int = Field(default=32, gt=0)
    seed: int = 0
    channels: int = Field(default=32, gt=0)
    max_problems: int | None = Field(default=None, gt=0)


class RunConfig(SQLModel):
    """Everything that determines a CLI run's outputs; serialized as its manifest."""

    command: str
    version: str
    seed: int | None = None
    threads: int = Field(default=1, gt=0)
    precision: str = "float32"
    out: str
    params: dict[str, Any] = Field(default_factory=dict)
    inputs: dict[str, str] = Field(default_factory=dict)
