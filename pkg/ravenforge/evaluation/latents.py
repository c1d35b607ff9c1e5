"""Latent-space diagnostics for a trained VAE.

`latent_support` measures, over a probe set of panels, the range of each
posterior-mean coordinate and its average KL to the prior. Traversals sweep
one coordinate across that range while the others stay at the encoded image's
mean, so decoded tiles never leave the region the encoder actually uses.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.figure import Figure
from matplotlib.image import imsave

from ravenforge.errors import ParameterError
from ravenforge.lib.tensor import Tensor, no_grad
from ravenforge.models.vae import VaeModel, encode

logger = logging.getLogger(__name__)

DEFAULT_PROBE_SIZE = 5000


@dataclass
class LatentSupport:
    """Per-dimension posterior-mean range and mean KL over a probe set."""

    min_mu: np.ndarray
    max_mu: np.ndarray
    mean_kl: np.ndarray
    n_probe: int

    @property
    def ranking(self) -> np.ndarray:
        """Dimensions ordered by decreasing mean KL (ties by index)."""
        return np.argsort(-self.mean_kl, kind="stable")

    def top(self, k: int = 2) -> list[int]:
        return [int(d) for d in self.ranking[:k]]

    def to_dict(self) -> dict:
        return {
            "n_probe": self.n_probe,
            "min_mu": self.min_mu.tolist(),
            "max_mu": self.max_mu.tolist(),
            "mean_kl": self.mean_kl.tolist(),
            "ranking": self.ranking.tolist(),
        }


def posterior_stats(
    vae: VaeModel, images: np.ndarray, batch_size: int = 256
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means and log-variances (float64) for (N, H, W) images, eval mode."""
    vae.eval()
    mus, logvars = [], []
    with no_grad():
        for start in range(0, len(images), batch_size):
            mu, logvar = encode(vae, images[start : start + batch_size])
            mus.append(mu.data.astype(np.float64))
            logvars.append(logvar.data.astype(np.float64))
    return np.concatenate(mus), np.concatenate(logvars)


def latent_support(vae: VaeModel, probe_images: np.ndarray) -> LatentSupport:
    """Support and mean KL of every latent dimension over `probe_images` (N, H, W).

    Raises:
        ParameterError: If fewer than 2 probe images are given
    """
    if len(probe_images) < 2:
        raise ParameterError(
            f"latent_support needs at least 2 probe images, got {len(probe_images)}"
        )
    mu, logvar = posterior_stats(vae, probe_images)
    kl = 0.5 * (mu**2 + np.exp(logvar) - 1.0 - logvar)
    return LatentSupport(mu.min(axis=0), mu.max(axis=0), kl.mean(axis=0), len(probe_images))


def latent_traversal(
    vae: VaeModel,
    image: np.ndarray,
    dims: Sequence[int],
    steps: int,
    support: LatentSupport,
) -> np.ndarray:
    """Grid of decoded sweeps, one row per dimension, the input image leftmost.

    Each row holds the original image followed by `steps` decodings with the
    row's coordinate swept linearly from `support.min_mu` to `support.max_mu`.

    Returns:
        Array of shape (len(dims) * H, (steps + 1) * W) with values in [0, 1]

    Raises:
        ParameterError: If a dimension is out of range or steps < 2
    """
    if steps < 2:
        raise ParameterError(f"a traversal needs at least 2 steps, got {steps}")
    bad = [d for d in dims if not 0 <= d < vae.latent_dim]
    if bad or not dims:
        raise ParameterError(
            f"dims must be a non-empty subset of 0..{vae.latent_dim - 1}, got {list(dims)}"
        )
    image = np.asarray(image, dtype=np.float64)
    mu, _ = posterior_stats(vae, image[None])
    rows = []
    with no_grad():
        for d in dims:
            z = np.repeat(mu, steps, axis=0)
            z[:, d] = np.linspace(support.min_mu[d], support.max_mu[d], steps)
            tiles = vae.decode(Tensor(z)).data[:, 0].astype(np.float64)
            rows.append(np.concatenate([image, *tiles], axis=1))
    return np.concatenate(rows, axis=0)


def save_grid_png(grid: np.ndarray, path: Path) -> Path:
    """Write a [0, 1] grayscale array as a PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    imsave(path, np.clip(grid, 0.0, 1.0), cmap="gray", vmin=0.0, vmax=1.0)
    return path


@dataclass
class Histogram:
    counts: np.ndarray
    edges: np.ndarray

    @classmethod
    def of(cls, values: np.ndarray, bins: int) -> "Histogram":
        counts, edges = np.histogram(values, bins=bins)
        return cls(counts, edges)


@dataclass
class LatentHistograms:
    dim: int
    mu: Histogram
    sigma: Histogram
    sampled_z: Histogram


def _write_histogram(path: Path, histogram: Histogram) -> None:
    table = np.column_stack([histogram.edges[:-1], histogram.edges[1:], histogram.counts])
    np.savetxt(path, table, fmt=["%.6g", "%.6g", "%d"], header="left right count")


def _plot_histograms(path: Path, summary: LatentHistograms) -> None:
    figure = Figure(figsize=(9, 3))
    axes = figure.subplots(1, 3)
    for ax, (name, histogram) in zip(
        axes, [("mu", summary.mu), ("sigma", summary.sigma), ("sampled z", summary.sampled_z)]
    ):
        ax.stairs(histogram.counts, histogram.edges, fill=True, color="0.4")
        ax.set_title(f"dim {summary.dim}: {name}")
    figure.tight_layout()
    figure.savefig(path)


def latent_distribution_plot(
    vae: VaeModel,
    probe_images: np.ndarray,
    dims: Sequence[int],
    out_dir: Path | None = None,
    rng: np.random.Generator | None = None,
    bins: int = 50,
) -> dict[int, LatentHistograms]:
    """Histograms of mu, sigma and one posterior sample z per probe image for each dim.

    When `out_dir` is given, writes `dim{d}_{mu,sigma,z}.txt` histogram tables
    and a `dim{d}.png` figure per dimension.

    Raises:
        ParameterError: If the probe set is empty
    """
    if len(probe_images) == 0:
        raise ParameterError("latent_distribution_plot needs a non-empty probe set")
    rng = rng if rng is not None else np.random.default_rng(0)
    mu, logvar = posterior_stats(vae, probe_images)
    sigma = np.exp(0.5 * logvar)
    sampled = mu + sigma * rng.standard_normal(mu.shape)
    summaries = {}
    for d in dims:
        summaries[d] = LatentHistograms(
            d,
            Histogram.of(mu[:, d], bins),
            Histogram.of(sigma[:, d], bins),
            Histogram.of(sampled[:, d], bins),
        )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for d, summary in summaries.items():
            _write_histogram(out_dir / f"dim{d}_mu.txt", summary.mu)
            _write_histogram(out_dir / f"dim{d}_sigma.txt", summary.sigma)
            _write_histogram(out_dir / f"dim{d}_z.txt", summary.sampled_z)
            _plot_histograms(out_dir / f"dim{d}.png", summary)
        logger.info("Wrote latent histograms for dims %s to %s", list(dims), out_dir)
    return summaries
