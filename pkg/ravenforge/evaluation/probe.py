"""How much of a panel can be recovered from a frozen embedding?

A fresh VAE-style decoder is trained to reconstruct panels from the output of
a frozen embedder. Its final mean squared error measures how much pixel
information the embedding retains: a supervised CNN embedder typically keeps
far less than a VAE encoder trained to reconstruct.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sqlmodel import Field, SQLModel

from ravenforge.config import ProbeConfig
from ravenforge.errors import ContractError, NumericError, ParameterError
from ravenforge.evaluation.latents import save_grid_png
from ravenforge.lib.checkpoint import abort_training, state_hash
from ravenforge.lib.optim import Adam
from ravenforge.lib.tensor import Tensor, backward, no_grad
from ravenforge.models.vae import (
    VaeDecoder,
    VaeModel,
    encode,
    kl_divergence,
    panel_batch,
    reconstruction_error,
)
from ravenforge.models.wren import PanelEmbedder
from ravenforge.pgm.dataset import PgmDataset

logger = logging.getLogger(__name__)

STRIP_PANELS = 8


class ProbeReport(SQLModel):
    variant: str
    embedding_dim: int
    n_panels: int
    epochs: int
    mse: float
    losses: list[float] = Field(default_factory=list)


@dataclass
class ReconstructionStats:
    """Mean per-panel reconstruction error and KL of a VAE over a dataset."""

    mse: float
    kl_total: float
    n_panels: int


def reconstruction_stats(
    vae: VaeModel, dataset: PgmDataset, batch_problems: int = 32
) -> ReconstructionStats:
    """Evaluate a VAE on every panel of `dataset` with posterior-mean decoding."""
    vae.eval()
    recon, kl, n = 0.0, 0.0, 0
    with no_grad():
        for indices in dataset.batches(batch_problems):
            x = panel_batch(dataset, indices)
            mu, logvar = encode(vae, x)
            _, total = kl_divergence(mu, logvar)
            recon += reconstruction_error(x, vae.decode(mu)).item() * x.shape[0]
            kl += total.item() * x.shape[0]
            n += x.shape[0]
    return ReconstructionStats(recon / n, kl / n, n)


def _embed(embedder: PanelEmbedder, x: Tensor) -> Tensor:
    with no_grad():
        return embedder(x).detach()


def probe_mse(
    decoder: VaeDecoder, embedder: PanelEmbedder, dataset: PgmDataset, batch_problems: int = 32
) -> float:
    """Mean per-panel squared error of `decoder` reconstructing panels from embeddings."""
    decoder.eval()
    total, n = 0.0, 0
    with no_grad():
        for indices in dataset.batches(batch_problems):
            x = panel_batch(dataset, indices)
            total += reconstruction_error(x, decoder(_embed(embedder, x))).item() * x.shape[0]
            n += x.shape[0]
    return total / n


def reconstruction_strip(
    decoder: VaeDecoder, embedder: PanelEmbedder, dataset: PgmDataset, problem: int = 0
) -> np.ndarray:
    """Inputs (top row) above their reconstructions (bottom row) for one problem's panels."""
    decoder.eval()
    x = panel_batch(dataset, np.array([problem]))
    with no_grad():
        x_hat = decoder(_embed(embedder, x)).data
    inputs = np.concatenate(list(x.data[:STRIP_PANELS, 0]), axis=1)
    outputs = np.concatenate(list(x_hat[:STRIP_PANELS, 0]), axis=1)
    return np.concatenate([inputs, outputs], axis=0).astype(np.float64)


def reconstruction_probe(
    embedder: PanelEmbedder,
    dataset: PgmDataset,
    config: ProbeConfig,
    out_dir: Path | None = None,
) -> tuple[VaeDecoder, ProbeReport]:
    """Train a decoder on the frozen embeddings of `dataset` and report its final MSE.

    The embedder is frozen and runs in eval mode; its state hash is compared
    before and after training. With `out_dir`, a strip of inputs and
    reconstructions is written to `probe_strip.png`.

    Raises:
        ParameterError: If the dataset is empty or does not match the embedder's resolution
        ContractError: If the embedder changed during training
        TrainingAborted: If the loss becomes non-finite
    """
    if len(dataset) == 0:
        raise ParameterError("cannot probe on an empty dataset")
    if dataset.resolution != embedder.resolution:
        raise ParameterError(
            f"dataset resolution {dataset.resolution} != embedder resolution {embedder.resolution}"
        )
    if config.max_problems is not None and config.max_problems < len(dataset):
        dataset = dataset.subset(np.arange(config.max_problems))
    embedder.requires_grad_(False)
    embedder.eval()
    before = state_hash(embedder.state_dict())

    init_rng, shuffle_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2)
    )
    decoder = VaeDecoder(dataset.resolution, embedder.output_dim, init_rng, config.channels)
    optimizer = Adam(decoder.parameters(), lr=config.lr)
    dump = None if out_dir is None else Path(out_dir) / "probe_decoder.rvf"
    meta = {"kind": "probe_decoder", "variant": embedder.variant.value}

    losses: list[float] = []
    step = 0
    decoder.train()
    for epoch in range(config.epochs):
        epoch_losses = []
        for indices in dataset.batches(config.batch_problems, shuffle_rng):
            x = panel_batch(dataset, indices)
            try:
                loss = reconstruction_error(x, decoder(_embed(embedder, x)))
                optimizer.zero_grad()
                backward(loss)
            except NumericError as exc:
                abort_training(decoder.state_dict(), dump, step, meta, exc)
            optimizer.step()
            epoch_losses.append(loss.item())
            step += 1
        losses.append(float(np.mean(epoch_losses)))
        logger.info("probe epoch %d: reconstruction=%.3f", epoch, losses[-1])

    if state_hash(embedder.state_dict()) != before:
        raise ContractError("embedder changed during probe training")
    mse = probe_mse(decoder, embedder, dataset, config.batch_problems)
    report = ProbeReport(
        variant=embedder.variant.value,
        embedding_dim=embedder.output_dim,
        n_panels=len(dataset) * dataset.panels.shape[1],
        epochs=config.epochs,
        mse=mse,
        losses=losses,
    )
    logger.info("%s probe: mean per-panel MSE %.3f", report.variant, report.mse)
    if out_dir is not None:
        strip = reconstruction_strip(decoder, embedder, dataset)
        save_grid_png(strip, Path(out_dir) / "probe_strip.png")
    return decoder, report
