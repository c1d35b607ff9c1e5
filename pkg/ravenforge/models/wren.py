"""Wild Relation Network scoring head and the panel embedders it runs on.

For each answer choice k the 8 context embeddings and the embedding of choice
k form a stack of 9. Every embedding is tagged with its one-hot grid slot and
projected back to the embedding size; g is applied to all 72 ordered pairs of
distinct slots and summed; f maps the sum to one sigmoid score. A softmax over
the 8 scores gives the answer distribution.

The first g layer acts on a concatenated pair [e_i, e_j], so it splits into
W_a e_i + W_b e_j; both halves are computed once per slot and combined per
pair.
"""

import logging
from dataclasses import asdict, dataclass
from itertools import permutations
from pathlib import Path
from typing import Any

import numpy as np

from ravenforge.config import Variant, WrenArchitecture, WrenTrainConfig
from ravenforge.errors import ContractError, NumericError, ParameterError, ShapeError
from ravenforge.lib import functional as F
from ravenforge.lib.checkpoint import abort_training, load_checkpoint, save_checkpoint, state_hash
from ravenforge.lib.nn import Dense, Module
from ravenforge.lib.optim import Adam
from ravenforge.lib.tensor import Tensor, backward, default_dtype, no_grad
from ravenforge.models.vae import ConvStack, VaeEncoder, VaeModel, reparameterize
from ravenforge.pgm.dataset import PgmDataset

logger = logging.getLogger(__name__)

N_SLOTS = 9
N_CHOICES = 8
# Ordered pairs (i, j), i != j, of the 9 stack slots.
PAIRS = np.array(list(permutations(range(N_SLOTS), 2)))
# Panel indices of the 8 stacks: context 0..7 followed by choice k (panel 8 + k).
STACKS = np.array([list(range(N_CHOICES)) + [N_CHOICES + k] for k in range(N_CHOICES)])


class PanelEmbedder(Module):
    """Maps (N, 1, H, W) panels to (N, output_dim) embeddings.

    VAE variants wrap a VAE encoder and use its posterior; the CNN baseline
    is the same conv stack followed by a dense projection.
    """

    def __init__(
        self,
        variant: Variant,
        resolution: int,
        rng: np.random.Generator,
        latent_dim: int = 64,
        channels: int = 32,
        cnn_features: int = 512,
        encoder: VaeEncoder | None = None,
    ):
        self.variant = Variant(variant)
        self.resolution, self.channels = resolution, channels
        if self.variant == Variant.CNN_BASELINE:
            self.backbone = ConvStack(resolution, rng, channels)
            self.projection = Dense(self.backbone.flat_features, cnn_features, rng)
            self.output_dim = cnn_features
        else:
            if encoder is None:
                encoder = VaeEncoder(ConvStack(resolution, rng, channels), latent_dim, rng)
            self.encoder = encoder
            self.output_dim = latent_dim

    @classmethod
    def from_vae(cls, vae: VaeModel, variant: Variant) -> "PanelEmbedder":
        if Variant(variant) == Variant.CNN_BASELINE:
            raise ParameterError("the CNN baseline does not use a VAE encoder")
        return cls(
            variant,
            vae.resolution,
            np.random.default_rng(0),
            latent_dim=vae.latent_dim,
            channels=vae.channels,
            encoder=vae.encoder,
        )

    @property
    def is_vae(self) -> bool:
        return self.variant != Variant.CNN_BASELINE

    def forward(
        self, images: Tensor, sample: bool = False, rng: np.random.Generator | None = None
    ) -> Tensor:
        if not self.is_vae:
            return F.relu(self.projection(self.backbone(images)))
        mu, logvar = self.encoder(images)
        if not sample:
            return mu
        rng = rng if rng is not None else np.random.default_rng()
        return reparameterize(mu, logvar, rng.standard_normal(mu.shape))

    def metadata(self) -> dict[str, Any]:
        return {
            "variant": self.variant.value,
            "resolution": self.resolution,
            "output_dim": self.output_dim,
            "channels": self.channels,
        }


def embed_panels(
    embedder: PanelEmbedder,
    panels: np.ndarray,
    mode: F.Mode = "eval",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Embed (B, 16, H, W) panels in [0, 1] to a (B, 16, dim) tensor.

    Train mode draws a fresh posterior sample per panel for VAE embedders;
    eval mode uses the posterior mean. The CNN baseline ignores the mode.

    Raises:
        ShapeError: If the panels do not match the embedder's resolution
    """
    panels = np.asarray(panels, dtype=default_dtype())
    if panels.ndim != 4 or panels.shape[2:] != (embedder.resolution, embedder.resolution):
        raise ShapeError(
            f"expected panels (B, 16, {embedder.resolution}, {embedder.resolution}), "
            f"got {panels.shape}"
        )
    batch, count = panels.shape[:2]
    images = Tensor(panels.reshape(batch * count, 1, *panels.shape[2:]))
    embeddings = embedder(images, sample=mode == "train", rng=rng)
    return embeddings.reshape(batch, count, embedder.output_dim)


class WrenModel(Module):
    def __init__(
        self,
        embedding_dim: int,
        rng: np.random.Generator,
        architecture: WrenArchitecture | None = None,
    ):
        arch = architecture or WrenArchitecture()
        self.embedding_dim = embedding_dim
        self.architecture = arch
        self.tag_projection = Dense(embedding_dim + N_SLOTS, embedding_dim, rng)
        self.g = [Dense(2 * embedding_dim, arch.g_width, rng)]
        self.g += [Dense(arch.g_width, arch.g_width, rng) for _ in range(arch.g_layers - 1)]
        self.f = [
            Dense(arch.g_width, arch.f_hidden, rng),
            Dense(arch.f_hidden, arch.f_hidden, rng),
            Dense(arch.f_hidden, 1, rng),
        ]
        self.dropout_p = arch.dropout
        self.dropout_rng = np.random.default_rng(rng.integers(2**32))

    def relation_sum(self, tagged: Tensor) -> Tensor:
        """Sum of g over all ordered slot pairs: (B, 9, dim) -> (B, g_width)."""
        first = self.g[0]
        dim = self.embedding_dim
        left = F.dense(tagged, first.weight[:, :dim], first.bias)
        right = tagged @ first.weight[:, dim:].transpose(1, 0)
        h = F.relu(left[:, PAIRS[:, 0]] + right[:, PAIRS[:, 1]])
        for layer in self.g[1:]:
            h = F.relu(layer(h))
        return h.sum(axis=1)

    def score(self, relations: Tensor) -> Tensor:
        """f head: (B, g_width) -> (B,) scores in (0, 1)."""
        h = F.relu(self.f[0](relations))
        h = F.relu(self.f[1](h))
        h = F.dropout(h, self.dropout_p, self.mode, self.dropout_rng)
        out = F.sigmoid(self.f[2](h))
        return out.reshape(out.shape[0])

    def forward(self, embeddings: Tensor) -> Tensor:
        """Scores of all 8 choices from (B, 16, dim) panel embeddings -> (B, 8)."""
        batch = embeddings.shape[0]
        stacks = embeddings[:, STACKS].reshape(batch * N_CHOICES, N_SLOTS, self.embedding_dim)
        scores = self.score(self.relation_sum(tag_positions(self, stacks)))
        return scores.reshape(batch, N_CHOICES)


def tag_positions(model: WrenModel, embeddings: Tensor) -> Tensor:
    """Concatenate each slot's one-hot tag and project back: (..., 9, dim) -> (..., 9, dim).

    Raises:
        ContractError: If there are not exactly 9 embeddings per stack
    """
    if embeddings.ndim < 2 or embeddings.shape[-2] != N_SLOTS:
        raise ContractError(
            f"tag_positions needs {N_SLOTS} embeddings per stack, got {embeddings.shape}"
        )
    tags = np.broadcast_to(np.eye(N_SLOTS), embeddings.shape[:-1] + (N_SLOTS,))
    tagged = Tensor.concat([embeddings, Tensor(tags, dtype=embeddings.data.dtype)], axis=-1)
    return model.tag_projection(tagged)


def score_choice(model: WrenModel, context: Tensor, choice: Tensor) -> Tensor:
    """Score of one choice given the 8 context embeddings: (8, dim), (dim,) -> scalar."""
    if context.shape != (N_CHOICES, model.embedding_dim) or choice.shape != (model.embedding_dim,):
        raise ShapeError(f"score_choice got context {context.shape} and choice {choice.shape}")
    stack = Tensor.concat([context, choice.reshape(1, model.embedding_dim)], axis=0)
    tagged = tag_positions(model, stack.reshape(1, N_SLOTS, model.embedding_dim))
    return model.score(model.relation_sum(tagged)).reshape(())


def predict(
    model: WrenModel, embedder: PanelEmbedder, panels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Answer distribution and argmax for one problem (16, H, W) or a batch (B, 16, H, W).

    Runs both networks in eval mode without recording a graph.
    """
    single = np.ndim(panels) == 3
    batch = np.asarray(panels)[None] if single else np.asarray(panels)
    model.eval()
    embedder.eval()
    with no_grad():
        scores = model(embed_panels(embedder, batch, mode="eval"))
        probabilities = F.softmax(scores, axis=-1).data
    answers = probabilities.argmax(axis=-1)
    if single:
        return probabilities[0], answers[0]
    return probabilities, answers


@dataclass
class EpochLog:
    phase: int
    epoch: int
    loss: float
    accuracy: float


def _set_frozen(embedder: PanelEmbedder, frozen: bool) -> None:
    embedder.requires_grad_(not frozen)
    # Frozen backbones normalize with running statistics so their buffers stay put.
    embedder.train(not frozen)


def _run_epoch(
    model: WrenModel,
    embedder: PanelEmbedder,
    dataset: PgmDataset,
    optimizer: Adam,
    config: WrenTrainConfig,
    rng: np.random.Generator,
    step: int,
    out: Path | None,
) -> tuple[float, float, int]:
    losses, correct = [], 0
    for indices in dataset.batches(config.batch_problems, rng):
        targets = dataset.targets[indices]
        try:
            embeddings = embed_panels(embedder, dataset.images(indices), mode="train", rng=rng)
            scores = model(embeddings)
            loss = F.cross_entropy(scores, targets)
            optimizer.zero_grad()
            backward(loss)
        except NumericError as exc:
            abort_training(wren_state(model, embedder), out, step, {"kind": "wren"}, exc)
        optimizer.step()
        losses.append(loss.item() * len(indices))
        correct += int((scores.data.argmax(axis=-1) == targets).sum())
        step += 1
    return float(np.sum(losses) / len(dataset)), correct / len(dataset), step


def train_wren(
    dataset: PgmDataset,
    embedder: PanelEmbedder,
    config: WrenTrainConfig,
    out: Path | None = None,
) -> tuple[WrenModel, PanelEmbedder, list[EpochLog]]:
    """Train a relation network on `dataset` in two phases.

    Phase 1 (`frozen_epochs`) updates only the relation network when the
    embedder is a VAE encoder and audits that the encoder is bit-identical
    afterwards. Phase 2 (`finetune_epochs`) also updates the encoder for
    `vae_finetune`; `vae_frozen` stays frozen and the CNN baseline is trained
    end to end throughout.

    Raises:
        ParameterError: If the dataset is empty or the embedder's variant disagrees with the config
        ContractError: If the freeze audit fails
        TrainingAborted: If the loss becomes non-finite
    """
    if len(dataset) == 0:
        raise ParameterError("cannot train on an empty dataset")
    variant = Variant(config.variant)
    if embedder.variant != variant:
        raise ParameterError(
            f"embedder is {embedder.variant.value} but config asks for {variant.value}"
        )
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    init_rng, data_rng = (np.random.default_rng(s) for s in seeds)
    model = WrenModel(embedder.output_dim, init_rng, config.architecture)
    model.train()

    log: list[EpochLog] = []
    step = 0
    phases = [(1, config.frozen_epochs, variant == Variant.CNN_BASELINE)]
    phases.append((2, config.finetune_epochs, variant != Variant.VAE_FROZEN))
    # The embedder may share its encoder with the caller's VAE; hand it back as found.
    flags = [param.requires_grad for param in embedder.parameters()]
    was_training = embedder.training
    try:
        for phase, epochs, train_embedder in phases:
            if epochs == 0:
                continue
            _set_frozen(embedder, not train_embedder)
            params = model.parameters() + (embedder.parameters() if train_embedder else [])
            optimizer = Adam(params, lr=config.lr)
            before = None if train_embedder else state_hash(embedder.state_dict())
            for epoch in range(epochs):
                loss, accuracy, step = _run_epoch(
                    model, embedder, dataset, optimizer, config, data_rng, step, out
                )
                log.append(EpochLog(phase, epoch, loss, accuracy))
                logger.info(
                    "phase %d epoch %d: loss=%.4f accuracy=%.3f", phase, epoch, loss, accuracy
                )
            if before is not None and state_hash(embedder.state_dict()) != before:
                raise ContractError(f"embedder changed during frozen phase {phase}")
    finally:
        for param, flag in zip(embedder.parameters(), flags):
            param.requires_grad = flag
        embedder.train(was_training)
    model.eval()
    if out is not None:
        save_wren(model, embedder, out, {"phase": phases[-1][0], "seed": config.seed})
    return model, embedder, log


def wren_state(model: WrenModel, embedder: PanelEmbedder) -> dict[str, np.ndarray]:
    state = {f"wren.{k}": v for k, v in model.state_dict().items()}
    state.update({f"embedder.{k}": v for k, v in embedder.state_dict().items()})
    return state


def save_wren(model: WrenModel, embedder: PanelEmbedder, path: Path, meta: dict[str, Any]) -> Path:
    """Write both networks to one `RVF1` file; the sidecar records variant, phase and sizes."""
    sidecar = {
        "kind": "wren",
        "embedding_dim": model.embedding_dim,
        "architecture": model.architecture.model_dump(mode="json"),
        "embedder": embedder.metadata(),
        **meta,
    }
    sidecar["variant"] = embedder.variant.value
    return save_checkpoint(path, wren_state(model, embedder), sidecar)


def load_wren(path: Path) -> tuple[WrenModel, PanelEmbedder, dict[str, Any]]:
    """Rebuild a relation network and its embedder from a `save_wren` checkpoint, in eval mode.

    Raises:
        FormatError: If the checkpoint is corrupt
        ShapeError: If the tensors do not fit the architecture in the sidecar
    """
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "wren":
        raise ShapeError(f"{path} is not a relation-network checkpoint (kind {meta.get('kind')!r})")
    rng = np.random.default_rng(0)
    info = meta["embedder"]
    embedder = PanelEmbedder(
        Variant(info["variant"]),
        info["resolution"],
        rng,
        latent_dim=info["output_dim"],
        channels=info["channels"],
        cnn_features=info["output_dim"],
    )
    model = WrenModel(meta["embedding_dim"], rng, WrenArchitecture(**meta["architecture"]))
    model.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("wren.")})
    embedder.load_state_dict({k[9:]: v for k, v in state.items() if k.startswith("embedder.")})
    model.eval()
    embedder.eval()
    return model, embedder, meta


def epoch_log_dicts(log: list[EpochLog]) -> list[dict[str, Any]]:
    return [asdict(entry) for entry in log]
