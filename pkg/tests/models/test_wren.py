from unittest import mock

import numpy as np
import pytest

from ravenforge.config import Variant, VaeTrainConfig, WrenArchitecture, WrenTrainConfig
from ravenforge.errors import (
    ContractError,
    NumericError,
    ParameterError,
    ShapeError,
    TrainingAborted,
)
from ravenforge.evaluation.metrics import evaluate
from ravenforge.lib import functional as F
from ravenforge.lib.checkpoint import state_hash
from ravenforge.lib.tensor import Tensor, no_grad
from ravenforge.models.vae import VaeModel, train_vae
from ravenforge.models.wren import (
    PAIRS,
    STACKS,
    PanelEmbedder,
    WrenModel,
    embed_panels,
    epoch_log_dicts,
    load_wren,
    predict,
    score_choice,
    tag_positions,
    train_wren,
)
from ravenforge.pgm.dataset import PgmDataset, build_dataset, generate_problem, load_dataset
from ravenforge.pgm.splits import Regime

ARCH = WrenArchitecture(g_width=16, g_layers=2, f_hidden=8, dropout=0.0, cnn_features=12)


def vae_embedder(rng, variant=Variant.VAE_FROZEN):
    return PanelEmbedder(variant, 40, rng, latent_dim=6, channels=4)


def wren_config(variant=Variant.VAE_FROZEN, **overrides):
    values = {
        "variant": variant,
        "frozen_epochs": 1,
        "finetune_epochs": 1,
        "batch_problems": 4,
        "seed": 2,
        "architecture": ARCH,
        **overrides,
    }
    return WrenTrainConfig(**values)


def test_pair_and_stack_layout():
    assert PAIRS.shape == (72, 2)
    assert (PAIRS[:, 0] != PAIRS[:, 1]).all()
    assert len({tuple(p) for p in PAIRS}) == 72
    assert STACKS.shape == (8, 9)
    assert (STACKS[:, :8] == np.arange(8)).all()
    assert STACKS[:, 8].tolist() == list(range(8, 16))


def test_scores_for_every_choice(rng):
    model = WrenModel(6, rng, ARCH)
    scores = model(Tensor(rng.normal(size=(2, 16, 6))))
    assert scores.shape == (2, 8)
    assert ((scores.data > 0) & (scores.data < 1)).all()


def test_tag_positions_needs_nine_slots(rng):
    model = WrenModel(6, rng, ARCH)
    assert tag_positions(model, Tensor(rng.normal(size=(3, 9, 6)))).shape == (3, 9, 6)
    with pytest.raises(ContractError):
        tag_positions(model, Tensor(rng.normal(size=(3, 8, 6))))


def test_relation_sum_matches_explicit_pairs(rng):
    model = WrenModel(6, rng, ARCH)
    tagged = Tensor(rng.normal(size=(1, 9, 6)))
    expected = np.zeros(ARCH.g_width)
    for i, j in PAIRS:
        h = Tensor.concat([tagged[0, i], tagged[0, j]], axis=0).reshape(1, 12)
        for layer in model.g:
            h = F.relu(layer(h))
        expected += h.data[0]
    np.testing.assert_allclose(model.relation_sum(tagged).data[0], expected, rtol=1e-5, atol=1e-5)


def test_score_choice_agrees_with_the_batched_head(rng):
    model = WrenModel(6, rng, ARCH)
    model.eval()
    embeddings = Tensor(rng.normal(size=(1, 16, 6)))
    scores = model(embeddings).data[0]
    context = embeddings[0, :8]
    for k in (0, 5):
        score = score_choice(model, context, embeddings[0, 8 + k])
        assert score.shape == ()
        assert score.item() == pytest.approx(float(scores[k]), rel=1e-5)
    with pytest.raises(ShapeError):
        score_choice(model, embeddings[0, :7], embeddings[0, 8])


def test_relation_sum_ignores_pair_order(rng):
    model = WrenModel(6, rng, ARCH)
    tagged = Tensor(rng.normal(size=(2, 9, 6)))
    expected = model.relation_sum(tagged).data
    shuffled = PAIRS[rng.permutation(len(PAIRS))]
    with mock.patch("ravenforge.models.wren.PAIRS", shuffled):
        np.testing.assert_allclose(model.relation_sum(tagged).data, expected, rtol=1e-5)


def test_choice_score_ignores_the_other_choices(rng, tiny_train):
    """Score k depends only on the context and choice k."""
    model = WrenModel(6, rng, ARCH)
    embedder = vae_embedder(rng)
    model.eval()
    embedder.eval()
    panels = tiny_train.images(np.array([0]))
    noisy = panels.copy()
    others = [8 + k for k in range(8) if k != 3]
    noisy[0, others] = rng.uniform(size=(7, 40, 40))
    with no_grad():
        scores = model(embed_panels(embedder, panels)).data[0]
        noisy_scores = model(embed_panels(embedder, noisy)).data[0]
    assert noisy_scores[3] == pytest.approx(scores[3], rel=1e-6)
    assert not np.allclose(np.delete(noisy_scores, 3), np.delete(scores, 3))


def test_identical_choices_are_equally_likely(rng, tiny_train):
    model = WrenModel(6, rng, ARCH)
    panels = tiny_train.images(np.array([2]))[0]
    panels[8:] = panels[8]
    probabilities, _ = predict(model, vae_embedder(rng), panels)
    np.testing.assert_allclose(probabilities, np.full(8, 0.125), atol=1e-7)


def test_embedding_modes(rng, tiny_train):
    embedder = vae_embedder(rng)
    embedder.eval()
    panels = tiny_train.images(np.array([0, 1]))
    with no_grad():
        a = embed_panels(embedder, panels, mode="eval")
        b = embed_panels(embedder, panels, mode="eval")
        sampled = embed_panels(embedder, panels, mode="train", rng=np.random.default_rng(1))
    assert a.shape == (2, 16, 6)
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.allclose(a.data, sampled.data)
    with pytest.raises(ShapeError):
        embed_panels(embedder, np.zeros((1, 16, 80, 80)))


def test_from_vae_shares_the_encoder(rng):
    vae = VaeModel(40, rng, latent_dim=6, channels=4)
    embedder = PanelEmbedder.from_vae(vae, Variant.VAE_FINETUNE)
    assert embedder.encoder is vae.encoder
    assert embedder.output_dim == 6
    with pytest.raises(ParameterError):
        PanelEmbedder.from_vae(vae, Variant.CNN_BASELINE)


def test_predict_single_and_batched(rng, tiny_train):
    model = WrenModel(6, rng, ARCH)
    embedder = vae_embedder(rng)
    panels = tiny_train.images(np.arange(3))
    probabilities, answers = predict(model, embedder, panels)
    assert probabilities.shape == (3, 8)
    np.testing.assert_allclose(probabilities.sum(axis=1), 1.0, rtol=1e-5)
    assert answers.tolist() == probabilities.argmax(axis=1).tolist()
    single, answer = predict(model, embedder, panels[1])
    np.testing.assert_allclose(single, probabilities[1], rtol=1e-5)
    assert answer == answers[1]


def test_frozen_encoder_is_untouched(rng, tiny_train):
    embedder = vae_embedder(rng)
    before = state_hash(embedder.state_dict())
    model, trained, log = train_wren(tiny_train, embedder, wren_config())
    assert trained is embedder
    assert state_hash(embedder.state_dict()) == before
    assert [(entry.phase, entry.epoch) for entry in log] == [(1, 0), (2, 0)]
    assert all(0.0 <= entry.accuracy <= 1.0 for entry in log)
    assert epoch_log_dicts(log)[0].keys() == {"phase", "epoch", "loss", "accuracy"}


def test_finetuning_updates_the_encoder_only_in_phase_two(rng, tiny_train):
    embedder = vae_embedder(rng, Variant.VAE_FINETUNE)
    before = state_hash(embedder.state_dict())
    train_wren(tiny_train, embedder, wren_config(Variant.VAE_FINETUNE, finetune_epochs=0))
    assert state_hash(embedder.state_dict()) == before
    train_wren(tiny_train, embedder, wren_config(Variant.VAE_FINETUNE))
    assert state_hash(embedder.state_dict()) != before


def test_cnn_baseline_trains_end_to_end(rng, tiny_train):
    embedder = PanelEmbedder(Variant.CNN_BASELINE, 40, rng, channels=4, cnn_features=12)
    before = state_hash(embedder.state_dict())
    config = wren_config(Variant.CNN_BASELINE, finetune_epochs=0)
    train_wren(tiny_train, embedder, config)
    assert state_hash(embedder.state_dict()) != before


def test_variant_mismatch(rng, tiny_train):
    with pytest.raises(ParameterError):
        train_wren(tiny_train, vae_embedder(rng), wren_config(Variant.VAE_FINETUNE))


def test_freeze_audit_catches_a_changed_encoder(rng, tiny_train):
    embedder = vae_embedder(rng)

    def tamper(model, embedder, dataset, optimizer, config, data_rng, step, out):
        embedder.encoder.mu_head.bias.data = embedder.encoder.mu_head.bias.data + 1.0
        return 0.0, 0.0, step + 1

    with mock.patch("ravenforge.models.wren._run_epoch", side_effect=tamper):
        with pytest.raises(ContractError, match="frozen phase 1"):
            train_wren(tiny_train, embedder, wren_config())


def test_checkpoint_round_trip(tmp_path, rng, tiny_train):
    out = tmp_path / "wren.rvf"
    model, embedder, _ = train_wren(tiny_train, vae_embedder(rng), wren_config(), out)
    loaded, loaded_embedder, meta = load_wren(out)
    assert meta["kind"] == "wren"
    assert meta["variant"] == "vae_frozen"
    assert meta["phase"] == 2
    assert loaded_embedder.variant == Variant.VAE_FROZEN
    panels = tiny_train.images(np.arange(4))
    np.testing.assert_array_equal(
        predict(loaded, loaded_embedder, panels)[0], predict(model, embedder, panels)[0]
    )


def test_non_finite_loss_aborts(tmp_path, rng, tiny_train):
    out = tmp_path / "wren.rvf"
    with mock.patch(
        "ravenforge.lib.functional.cross_entropy", side_effect=NumericError("loss is inf")
    ):
        with pytest.raises(TrainingAborted) as excinfo:
            train_wren(tiny_train, vae_embedder(rng), wren_config(), out)
    assert excinfo.value.dump_path == tmp_path / "wren.abort.rvf"
    assert excinfo.value.dump_path.exists()


def test_training_hands_back_a_shared_encoder_as_found(rng, tiny_train):
    vae = VaeModel(40, rng, latent_dim=6, channels=4)
    vae.eval()
    embedder = PanelEmbedder.from_vae(vae, Variant.VAE_FROZEN)
    train_wren(tiny_train, embedder, wren_config())
    assert all(param.requires_grad for param in vae.parameters())
    assert not vae.encoder.training

    # Also after an aborted run
    with mock.patch(
        "ravenforge.lib.functional.cross_entropy", side_effect=NumericError("loss is inf")
    ):
        with pytest.raises(TrainingAborted):
            train_wren(tiny_train, embedder, wren_config())
    assert all(param.requires_grad for param in vae.parameters())


def _train_vae_wren(train, vae_epochs=10):
    vae, _ = train_vae(train, VaeTrainConfig(epochs=vae_epochs, seed=0, channels=16))
    embedder = PanelEmbedder.from_vae(vae, Variant.VAE_FROZEN)
    config = WrenTrainConfig(frozen_epochs=6, finetune_epochs=2, seed=0)
    model, embedder, log = train_wren(train, embedder, config)
    return model, embedder, log


def _single_triple_split(count, seed, split):
    problems = [
        generate_problem(np.random.default_rng([seed, index]), lambda s: len(s) == 1)
        for index in range(count)
    ]
    return PgmDataset(
        panels=np.stack([p.panels for p in problems]),
        targets=np.array([p.target for p in problems]),
        structures=[p.structure for p in problems],
        regimes=[p.regime for p in problems],
        resolution=40,
        split=split,
    )


@pytest.mark.slow
def test_single_triple_problems_are_learnable():
    train = _single_triple_split(500, 0, "train")
    held_out = _single_triple_split(100, 1, "test")
    model, embedder, log = _train_vae_wren(train)
    assert log[-1].accuracy >= 0.9
    assert evaluate(model, embedder, held_out).test_accuracy >= 0.6


@pytest.mark.slow
def test_accuracy_drops_with_the_generalization_demand(tmp_path):
    accuracies = []
    for regime in Regime:
        out = tmp_path / regime.value
        build_dataset(regime, {"train": 500, "val": 50, "test": 200}, 40, seed=0, out_dir=out)
        model, embedder, _ = _train_vae_wren(load_dataset(out, "train"))
        accuracies.append(evaluate(model, embedder, load_dataset(out, "test")).test_accuracy)
    assert accuracies == sorted(accuracies, reverse=True)


@pytest.mark.slow
def test_untrained_model_scores_at_chance(tmp_path):
    out = tmp_path / "chance"
    build_dataset(Regime.NEUTRAL, {"train": 1, "val": 1, "test": 2000}, 40, seed=4, out_dir=out)
    rng = np.random.default_rng(4)
    model = WrenModel(6, rng, ARCH)
    report = evaluate(model, vae_embedder(rng), load_dataset(out, "test"))
    assert report.n_test == 2000
    assert abs(report.test_accuracy - 0.125) <= 0.02
