"""The beta-VAE over single panels.

Encoder: four stride-2 convolutions (3x3, padding 1), each followed by batch
norm and relu, then two dense heads giving the mean and log-variance of a
factorized Gaussian posterior. The decoder mirrors it: a dense layer back to
the smallest feature map, four transposed convolutions and a sigmoid.

The training objective is the negative beta-ELBO with a squared-error
reconstruction term:

    loss = sum_pixels (x_hat - x)^2 + beta * KL(q(z|x) || N(0, I))

averaged over the batch.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np
from sqlmodel import Field, SQLModel

from ravenforge.config import ScheduleShape, VaeTrainConfig
from ravenforge.errors import NumericError, ParameterError, ShapeError
from ravenforge.lib import functional as F
from ravenforge.lib.checkpoint import abort_training, load_checkpoint, save_checkpoint
from ravenforge.lib.nn import BatchNorm2d, Conv2d, ConvTranspose2d, Dense, Module
from ravenforge.lib.optim import Adam
from ravenforge.lib.tensor import Tensor, backward, default_dtype
from ravenforge.pgm.dataset import PgmDataset

logger = logging.getLogger(__name__)

LATENT_DIM = 64
N_CONVS = 4
KERNEL, STRIDE, PADDING = 3, 2, 1


def feature_sizes(resolution: int) -> list[int]:
    """Spatial size after each encoder convolution, starting with the input size."""
    sizes = [resolution]
    for _ in range(N_CONVS):
        sizes.append(F.conv_output_size(sizes[-1], KERNEL, STRIDE, PADDING))
    return sizes


class ConvStack(Module):
    """Four conv + batch norm + relu blocks; the shared backbone of every embedder."""

    def __init__(
        self,
        resolution: int,
        rng: np.random.Generator,
        channels: int = 32,
        momentum: float = 0.1,
        eps: float = 1e-5,
    ):
        self.resolution = resolution
        self.channels = channels
        self.convs = [
            Conv2d(1 if i == 0 else channels, channels, KERNEL, rng, stride=STRIDE, padding=PADDING)
            for i in range(N_CONVS)
        ]
        self.norms = [BatchNorm2d(channels, momentum, eps) for _ in range(N_CONVS)]
        self.flat_features = channels * feature_sizes(resolution)[-1] ** 2

    def forward(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[1:] != (1, self.resolution, self.resolution):
            raise ShapeError(
                f"expected images of shape (N, 1, {self.resolution}, {self.resolution}), "
                f"got {images.shape}"
            )
        h = images
        for conv, norm in zip(self.convs, self.norms):
            h = F.relu(norm(conv(h)))
        return h.reshape(h.shape[0], self.flat_features)


class VaeEncoder(Module):
    def __init__(self, backbone: ConvStack, latent_dim: int, rng: np.random.Generator):
        self.backbone = backbone
        self.mu_head = Dense(backbone.flat_features, latent_dim, rng)
        self.logvar_head = Dense(backbone.flat_features, latent_dim, rng)

    def forward(self, images: Tensor) -> tuple[Tensor, Tensor]:
        features = self.backbone(images)
        return self.mu_head(features), self.logvar_head(features)


class VaeDecoder(Module):
    """Dense projection to the smallest feature map, then four transposed convolutions."""

    def __init__(
        self,
        resolution: int,
        latent_dim: int,
        rng: np.random.Generator,
        channels: int = 32,
        momentum: float = 0.1,
        eps: float = 1e-5,
    ):
        sizes = feature_sizes(resolution)
        self.resolution, self.latent_dim, self.channels = resolution, latent_dim, channels
        self.start_size = sizes[-1]
        self.project = Dense(latent_dim, channels * self.start_size**2, rng)
        self.deconvs = []
        for i, (size_in, size_out) in enumerate(zip(sizes[:0:-1], sizes[-2::-1])):
            natural = F.conv_transpose_output_size(size_in, KERNEL, STRIDE, PADDING)
            out_channels = 1 if i == N_CONVS - 1 else channels
            self.deconvs.append(
                ConvTranspose2d(
                    channels,
                    out_channels,
                    KERNEL,
                    rng,
                    stride=STRIDE,
                    padding=PADDING,
                    output_padding=size_out - natural,
                )
            )
        self.norms = [BatchNorm2d(channels, momentum, eps) for _ in range(N_CONVS - 1)]

    def forward(self, z: Tensor) -> Tensor:
        h = F.relu(self.project(z))
        h = h.reshape(z.shape[0], self.channels, self.start_size, self.start_size)
        for deconv, norm in zip(self.deconvs, self.norms):
            h = F.relu(norm(deconv(h)))
        return F.sigmoid(self.deconvs[-1](h))


class VaeModel(Module):
    """Encoder and decoder of one beta-VAE, sized for a fixed panel resolution."""

    def __init__(
        self,
        resolution: int,
        rng: np.random.Generator,
        latent_dim: int = LATENT_DIM,
        channels: int = 32,
        momentum: float = 0.1,
        eps: float = 1e-5,
    ):
        self.resolution, self.latent_dim, self.channels = resolution, latent_dim, channels
        backbone = ConvStack(resolution, rng, channels, momentum, eps)
        self.encoder = VaeEncoder(backbone, latent_dim, rng)
        self.decoder = VaeDecoder(resolution, latent_dim, rng, channels, momentum, eps)

    def decode(self, z: Tensor) -> Tensor:
        return self.decoder(z)

    def reconstruct(self, images: np.ndarray) -> np.ndarray:
        """Decode the posterior mean of each image (eval-mode forward, no sampling)."""
        mu, _ = encode(self, images)
        return self.decode(mu).data[:, 0]


def as_image_batch(images: Tensor | np.ndarray) -> Tensor:
    """Accept (N, H, W) or (N, 1, H, W) arrays and return an (N, 1, H, W) tensor."""
    if isinstance(images, Tensor):
        return images
    images = np.asarray(images, dtype=default_dtype())
    if images.ndim == 3:
        images = images[:, None]
    return Tensor(images)


def encode(model: VaeModel, images: Tensor | np.ndarray) -> tuple[Tensor, Tensor]:
    """Posterior mean and log-variance, each (N, latent_dim).

    Raises:
        ShapeError: If the images do not match the model's resolution
    """
    return model.encoder(as_image_batch(images))


def reparameterize(mu: Tensor, logvar: Tensor, noise: np.ndarray) -> Tensor:
    """z = mu + exp(logvar / 2) * noise, differentiable in mu and logvar."""
    if mu.shape != logvar.shape or mu.shape != noise.shape:
        raise ShapeError(
            f"reparameterize got mu {mu.shape}, logvar {logvar.shape}, noise {noise.shape}"
        )
    return mu + (logvar * 0.5).exp() * Tensor(noise, dtype=mu.data.dtype)


def kl_divergence(mu: Tensor, logvar: Tensor) -> tuple[Tensor, Tensor]:
    """Analytic KL from N(mu, exp(logvar)) to N(0, 1), averaged over the batch.

    Returns:
        (per-dimension KL of shape (latent_dim,), total KL as a scalar)
    """
    per_element = (mu * mu + logvar.exp() - 1.0 - logvar) * 0.5
    per_dim = per_element.mean(axis=0)
    return per_dim, per_dim.sum()


@dataclass
class ElboBreakdown:
    """Terms of one evaluation of the beta-ELBO loss.

    `objective` is the differentiable loss tensor; it is dropped from logs.
    """

    reconstruction: float
    kl_total: float
    kl_per_dim: np.ndarray
    beta_used: float
    loss: float
    objective: Tensor | None = field(default=None, repr=False, compare=False)

    def summary(self) -> dict[str, float]:
        return {
            "reconstruction": self.reconstruction,
            "kl_total": self.kl_total,
            "beta": self.beta_used,
            "loss": self.loss,
        }


def reconstruction_error(x: Tensor, x_hat: Tensor) -> Tensor:
    """Per-image summed squared pixel error, averaged over the batch."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction got x {x.shape} and x_hat {x_hat.shape}")
    diff = x_hat - x
    return (diff * diff).sum() * (1.0 / x.shape[0])


def elbo_loss(x: Tensor, x_hat: Tensor, mu: Tensor, logvar: Tensor, beta: float) -> ElboBreakdown:
    """Negative beta-ELBO: reconstruction + beta * KL.

    Raises:
        ParameterError: If beta is negative
        ShapeError: If x and x_hat differ in shape
    """
    if beta < 0:
        raise ParameterError(f"beta must be non-negative, got {beta}")
    reconstruction = reconstruction_error(x, x_hat)
    per_dim, total = kl_divergence(mu, logvar)
    objective = reconstruction + total * beta
    return ElboBreakdown(
        reconstruction=float(reconstruction.item()),
        kl_total=float(total.item()),
        kl_per_dim=per_dim.data.astype(np.float64),
        beta_used=float(beta),
        loss=float(objective.item()),
        objective=objective,
    )


class BetaSchedule(SQLModel):
    """Step-indexed beta curve: ramp from `beta_start` to `beta_end`, then hold."""

    beta_start: float = Field(default=0.5, ge=0)
    beta_end: float = Field(default=4.0, ge=0)
    ramp_fraction: float = Field(default=0.5, gt=0, le=1)
    total_steps: int = Field(default=1, gt=0)
    shape: ScheduleShape = ScheduleShape.LINEAR

    @classmethod
    def from_config(cls, config: VaeTrainConfig, total_steps: int) -> "BetaSchedule":
        return cls(
            beta_start=config.beta_start,
            beta_end=config.beta_end,
            ramp_fraction=config.ramp_fraction,
            total_steps=total_steps,
            shape=config.schedule,
        )


def beta_at(schedule: BetaSchedule, step: int) -> float:
    """Beta to use at optimizer step `step` (0-based, inclusive of `total_steps`).

    Raises:
        ParameterError: If step is outside [0, total_steps]
    """
    if not 0 <= step <= schedule.total_steps:
        raise ParameterError(f"step {step} outside [0, {schedule.total_steps}]")
    ramp_steps = schedule.ramp_fraction * schedule.total_steps
    progress = min(1.0, step / ramp_steps)
    match schedule.shape:
        case ScheduleShape.STEP:
            # Four equal stairs, reaching beta_end when the ramp ends.
            progress = math.floor(4 * progress) / 4
        case ScheduleShape.COSINE:
            progress = (1 - math.cos(math.pi * progress)) / 2
    if progress >= 1.0:
        return schedule.beta_end
    return schedule.beta_start + (schedule.beta_end - schedule.beta_start) * progress


def panel_batch(dataset: PgmDataset, indices: np.ndarray) -> Tensor:
    """All 16 panels of the given problems as one (len(indices) * 16, 1, H, W) batch."""
    images = dataset.images(indices)
    n, panels, h, w = images.shape
    return Tensor(images.reshape(n * panels, 1, h, w))


def train_vae(
    dataset: PgmDataset,
    config: VaeTrainConfig,
    out: Path | None = None,
) -> tuple[VaeModel, list[ElboBreakdown]]:
    """Train a beta-VAE on every panel of every problem in `dataset`.

    Each step takes `config.batch_problems` problems and flattens their 16
    panels into one batch. Beta follows the configured schedule over the total
    number of steps. When `out` is given the final model is written there as
    an `RVF1` checkpoint.

    Returns:
        The trained model and one `ElboBreakdown` per step (without tensors)

    Raises:
        ParameterError: If the dataset is empty
        TrainingAborted: If the loss becomes non-finite
    """
    if len(dataset) == 0:
        raise ParameterError("cannot train a VAE on an empty dataset")
    init_rng, shuffle_rng, noise_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(3)
    )
    model = VaeModel(
        dataset.resolution,
        init_rng,
        latent_dim=config.latent_dim,
        channels=config.channels,
        momentum=config.bn_momentum,
        eps=config.bn_eps,
    )
    optimizer = Adam(model.parameters(), lr=config.lr)
    steps_per_epoch = math.ceil(len(dataset) / config.batch_problems)
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    schedule = BetaSchedule.from_config(config, total_steps)
    meta = vae_metadata(model, schedule, config.seed)

    log: list[ElboBreakdown] = []
    step = 0
    model.train()
    for epoch in range(config.epochs):
        epoch_start = len(log)
        for indices in dataset.batches(config.batch_problems, shuffle_rng):
            if step >= total_steps:
                break
            beta = beta_at(schedule, step)
            x = panel_batch(dataset, indices)
            try:
                mu, logvar = model.encoder(x)
                z = reparameterize(mu, logvar, noise_rng.standard_normal(mu.shape))
                breakdown = elbo_loss(x, model.decode(z), mu, logvar, beta)
                optimizer.zero_grad()
                backward(breakdown.objective)
            except NumericError as exc:
                abort_training(model.state_dict(), out, step, meta, exc)
            optimizer.step()
            log.append(replace(breakdown, objective=None))
            logger.debug("step %d beta=%.3f %s", step, beta, breakdown.summary())
            step += 1
        epoch_log = log[epoch_start:]
        if epoch_log:
            logger.info(
                "epoch %d: reconstruction=%.3f kl=%.3f beta=%.3f",
                epoch,
                np.mean([b.reconstruction for b in epoch_log]),
                np.mean([b.kl_total for b in epoch_log]),
                epoch_log[-1].beta_used,
            )
    model.eval()
    if out is not None:
        save_vae(model, out, schedule, config.seed, step)
    return model, log


def vae_metadata(
    model: VaeModel, schedule: BetaSchedule, seed: int, step: int = 0
) -> dict[str, Any]:
    return {
        "kind": "vae",
        "resolution": model.resolution,
        "latent_dim": model.latent_dim,
        "channels": model.channels,
        "schedule": schedule.model_dump(mode="json"),
        "seed": seed,
        "step": step,
    }


def save_vae(model: VaeModel, path: Path, schedule: BetaSchedule, seed: int, step: int) -> Path:
    return save_checkpoint(path, model.state_dict(), vae_metadata(model, schedule, seed, step))


def load_vae(path: Path) -> tuple[VaeModel, dict[str, Any]]:
    """Rebuild a VAE from an `RVF1` checkpoint and its sidecar, in eval mode.

    Raises:
        FormatError: If the checkpoint is corrupt
        ShapeError: If the tensors do not fit the architecture in the sidecar
    """
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "vae":
        raise ShapeError(f"{path} is not a VAE checkpoint (kind {meta.get('kind')!r})")
    model = VaeModel(
        meta["resolution"],
        np.random.default_rng(0),
        latent_dim=meta["latent_dim"],
        channels=meta.get("channels", 32),
    )
    model.load_state_dict(state)
    model.eval()
    return model, meta
