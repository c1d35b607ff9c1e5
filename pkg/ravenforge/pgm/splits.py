"""Generalization regimes and the structure filters that implement them."""

import logging
from enum import Enum
from itertools import combinations

import numpy as np

from ravenforge.errors import ParameterError
from ravenforge.pgm.structures import ALL_TRIPLES, StructureFilter, Triple, Unit, can_coexist

logger = logging.getLogger(__name__)

DEFAULT_HOLDOUT_FRACTION = 0.2


class Regime(str, Enum):
    """Train/test split policies, ordered by how much generalization they demand."""

    NEUTRAL = "neutral"
    HO_TRIPLE_PAIRS = "ho_triple_pairs"
    HO_ATTRIBUTE_PAIRS = "ho_attribute_pairs"
    HO_TRIPLES = "ho_triples"

    @property
    def label(self) -> str:
        return REGIME_TITLES[self]

    @property
    def code(self) -> int:
        return list(Regime).index(self)


REGIME_TITLES = {
    Regime.NEUTRAL: "Neutral",
    Regime.HO_TRIPLE_PAIRS: "H.O. Triple Pairs",
    Regime.HO_ATTRIBUTE_PAIRS: "H.O. Attribute Pairs",
    Regime.HO_TRIPLES: "H.O. Triples",
}

HOLDOUT_UNITS: dict[Regime, Unit] = {
    Regime.HO_TRIPLE_PAIRS: "triple_pair",
    Regime.HO_ATTRIBUTE_PAIRS: "attribute_pair",
    Regime.HO_TRIPLES: "triple",
}


def feasible_units(unit: Unit) -> list:
    """Every unit of the given kind that some valid structure contains, in a fixed order."""
    triples = sorted(ALL_TRIPLES, key=lambda t: t.codes)
    if unit == "triple":
        return triples
    pairs: list[tuple[Triple, Triple]] = [
        (a, b) for a, b in combinations(triples, 2) if can_coexist(a, b)
    ]
    if unit == "triple_pair":
        return pairs
    return sorted({tuple(sorted((a.attribute.value, b.attribute.value))) for a, b in pairs})


def make_split(
    regime: Regime,
    rng: np.random.Generator,
    holdout_fraction: float = DEFAULT_HOLDOUT_FRACTION,
) -> tuple[StructureFilter, StructureFilter, StructureFilter]:
    """Build the (train, val, test) filters for a regime.

    Validation shares the training distribution. For the held-out regimes a
    fixed random subset of units is drawn once; train and val exclude every
    structure containing one of them and test requires at least one.

    Raises:
        ParameterError: If `holdout_fraction` is not in (0, 1)
    """
    if not 0 < holdout_fraction < 1:
        raise ParameterError(f"holdout_fraction must be in (0, 1), got {holdout_fraction}")
    regime = Regime(regime)
    if regime == Regime.NEUTRAL:
        neutral = StructureFilter()
        return neutral, neutral, neutral
    unit = HOLDOUT_UNITS[regime]
    units = feasible_units(unit)
    count = max(1, round(holdout_fraction * len(units)))
    picks = sorted(int(i) for i in rng.choice(len(units), size=count, replace=False))
    held_out = frozenset(units[i] for i in picks)
    logger.debug("Holding out %d of %d %s units for %s", count, len(units), unit, regime.value)
    train = StructureFilter(kind="exclude", unit=unit, held_out=held_out)
    test = StructureFilter(kind="require", unit=unit, held_out=held_out)
    return train, train, test
