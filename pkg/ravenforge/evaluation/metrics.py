"""Accuracy, chance-corrected kappa and per-regime reports."""

import logging
from typing import Sequence

import numpy as np
from sqlmodel import Field, SQLModel

from ravenforge.config import Variant
from ravenforge.errors import ParameterError
from ravenforge.models.wren import PanelEmbedder, WrenModel, predict
from ravenforge.pgm.dataset import PgmDataset
from ravenforge.pgm.splits import Regime

logger = logging.getLogger(__name__)

CHANCE = 1 / 8


def cohens_kappa(accuracy: float) -> float:
    """Chance-corrected accuracy for 8-way choice: 0 at chance (1/8), 1 when perfect.

    Raises:
        ParameterError: If accuracy is outside [0, 1]
    """
    if not 0.0 <= accuracy <= 1.0:
        raise ParameterError(f"accuracy must be in [0, 1], got {accuracy}")
    return (accuracy - CHANCE) / (1 - CHANCE)


def score_answers(
    answers: Sequence[int] | np.ndarray, targets: Sequence[int] | np.ndarray
) -> float:
    """Fraction of `answers` equal to `targets`.

    Raises:
        ParameterError: If the inputs are empty or differ in length
    """
    answers, targets = np.asarray(answers), np.asarray(targets)
    if answers.shape != targets.shape or answers.size == 0:
        raise ParameterError(
            f"cannot score {answers.shape} answers against {targets.shape} targets"
        )
    return float((answers == targets).mean())


class RegimeReport(SQLModel):
    """Table row for one (regime, variant) evaluation."""

    regime: Regime
    variant: Variant = Variant.VAE_FROZEN
    val_accuracy: float | None = Field(default=None, ge=0, le=1)
    test_accuracy: float = Field(ge=0, le=1)
    test_kappa: float
    n_val: int = Field(default=0, ge=0)
    n_test: int = Field(gt=0)


def predict_dataset(
    model: WrenModel, embedder: PanelEmbedder, dataset: PgmDataset, batch_problems: int = 64
) -> np.ndarray:
    """Predicted answer for every problem, in dataset order."""
    answers = [
        predict(model, embedder, dataset.images(indices))[1]
        for indices in dataset.batches(batch_problems)
    ]
    return np.concatenate(answers)


def evaluate(
    model: WrenModel,
    embedder: PanelEmbedder,
    dataset: PgmDataset,
    val: PgmDataset | None = None,
    batch_problems: int = 64,
) -> RegimeReport:
    """Accuracy and kappa of the relation network on `dataset` (and optionally `val`).

    Raises:
        ParameterError: If a split is empty
    """
    if len(dataset) == 0:
        raise ParameterError("cannot evaluate on an empty split")
    answers = predict_dataset(model, embedder, dataset, batch_problems)
    test_accuracy = score_answers(answers, dataset.targets)
    val_accuracy = None
    if val is not None:
        if len(val) == 0:
            raise ParameterError("cannot evaluate on an empty validation split")
        val_answers = predict_dataset(model, embedder, val, batch_problems)
        val_accuracy = score_answers(val_answers, val.targets)
    report = RegimeReport(
        regime=dataset.regime,
        variant=embedder.variant,
        val_accuracy=val_accuracy,
        test_accuracy=test_accuracy,
        test_kappa=cohens_kappa(test_accuracy),
        n_val=0 if val is None else len(val),
        n_test=len(dataset),
    )
    logger.info(
        "%s %s: test accuracy %.3f (kappa %.3f) over %d problems",
        report.regime.value,
        report.variant.value,
        report.test_accuracy,
        report.test_kappa,
        report.n_test,
    )
    return report


def _percent(value: float | None) -> str:
    return "-" if value is None else f"{100 * value:.1f}"


def regime_table(reports: Sequence[RegimeReport]) -> str:
    """Markdown table with one row per regime (in generalization order) and one
    column group per variant. Later reports for the same cell replace earlier ones.
    """
    cells = {(Regime(r.regime), Variant(r.variant)): r for r in reports}
    variants = [v for v in Variant if any(key[1] == v for key in cells)]
    labels = [v.label for v in variants]
    header = ["Regime"]
    for variant in variants:
        name = variant.label if labels.count(variant.label) == 1 else variant.value
        header += [f"{name} Val %", f"{name} Test %", f"{name} Test kappa"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for regime in Regime:
        if not any(key[0] == regime for key in cells):
            continue
        row = [regime.label]
        for variant in variants:
            report = cells.get((regime, variant))
            if report is None:
                row += ["-", "-", "-"]
            else:
                row += [
                    _percent(report.val_accuracy),
                    _percent(report.test_accuracy),
                    f"{cohens_kappa(report.test_accuracy):.3f}",
                ]
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"
