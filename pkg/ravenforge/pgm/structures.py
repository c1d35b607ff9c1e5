"""Relation/object/attribute triples and the structures they form.

A `Structure` is the ordered set of 1-4 triples that governs one matrix problem.
Which relations may act on which (object, attribute) pair is fixed by
`COMPATIBILITY`; set operations (XOR/OR/AND) only act on shape position and
shape number.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from typing import Any, Literal

import numpy as np

from ravenforge.errors import ContractError, GenerationError

logger = logging.getLogger(__name__)

MAX_TRIPLES = 4


class Relation(str, Enum):
    """Rules a triple can impose along each row of the grid."""

    PROGRESSION = "progression"
    XOR = "XOR"
    OR = "OR"
    AND = "AND"
    CONSISTENT_UNION = "consistent_union"


class ObjectType(str, Enum):
    SHAPE = "shape"
    LINE = "line"


class Attribute(str, Enum):
    SIZE = "size"
    TYPE = "type"
    COLOUR = "colour"
    POSITION = "position"
    NUMBER = "number"


LOGICAL = (Relation.XOR, Relation.OR, Relation.AND)

COMPATIBILITY: dict[tuple[ObjectType, Attribute], tuple[Relation, ...]] = {
    (ObjectType.SHAPE, Attribute.SIZE): (Relation.PROGRESSION, Relation.CONSISTENT_UNION),
    (ObjectType.SHAPE, Attribute.TYPE): (Relation.PROGRESSION, Relation.CONSISTENT_UNION),
    (ObjectType.SHAPE, Attribute.COLOUR): (Relation.PROGRESSION, Relation.CONSISTENT_UNION),
    (ObjectType.SHAPE, Attribute.NUMBER): (
        Relation.PROGRESSION,
        Relation.CONSISTENT_UNION,
        *LOGICAL,
    ),
    (ObjectType.SHAPE, Attribute.POSITION): LOGICAL,
    (ObjectType.LINE, Attribute.TYPE): (Relation.PROGRESSION, Relation.CONSISTENT_UNION),
    (ObjectType.LINE, Attribute.COLOUR): (Relation.PROGRESSION, Relation.CONSISTENT_UNION),
}

# The occupied-cell set fixes the count, so these two are never governed together.
EXCLUSIVE_PAIRS = frozenset(
    {frozenset({(ObjectType.SHAPE, Attribute.POSITION), (ObjectType.SHAPE, Attribute.NUMBER)})}
)


@dataclass(frozen=True, order=True)
class Triple:
    """One generative rule [relation, object, attribute]."""

    relation: Relation
    object: ObjectType
    attribute: Attribute

    def __post_init__(self) -> None:
        allowed = COMPATIBILITY.get((self.object, self.attribute), ())
        if self.relation not in allowed:
            raise ContractError(f"{self} is not in the compatibility table")

    def __str__(self) -> str:
        return f"[{self.relation.value}, {self.object.value}, {self.attribute.value}]"

    @property
    def target(self) -> tuple[ObjectType, Attribute]:
        return self.object, self.attribute

    @property
    def codes(self) -> tuple[int, int, int]:
        return (
            list(Relation).index(self.relation),
            list(ObjectType).index(self.object),
            list(Attribute).index(self.attribute),
        )

    @classmethod
    def from_codes(cls, codes: tuple[int, int, int]) -> "Triple":
        r, o, a = codes
        return cls(list(Relation)[r], list(ObjectType)[o], list(Attribute)[a])

    def to_list(self) -> list[str]:
        return [self.relation.value, self.object.value, self.attribute.value]

    @classmethod
    def from_list(cls, values: list[str]) -> "Triple":
        return cls(Relation(values[0]), ObjectType(values[1]), Attribute(values[2]))


ALL_TRIPLES: tuple[Triple, ...] = tuple(
    Triple(relation, obj, attr)
    for (obj, attr), relations in COMPATIBILITY.items()
    for relation in relations
)


def can_coexist(a: Triple, b: Triple) -> bool:
    """Whether two triples may appear in the same structure."""
    if a.target == b.target:
        return False
    return frozenset({a.target, b.target}) not in EXCLUSIVE_PAIRS


@dataclass(frozen=True)
class Structure:
    """The set of triples governing one problem, stored in canonical order."""

    triples: tuple[Triple, ...]

    def __post_init__(self) -> None:
        triples = tuple(sorted(set(self.triples), key=lambda t: t.codes))
        if len(triples) != len(self.triples):
            raise ContractError(f"duplicate triples in {self.triples}")
        if not 1 <= len(triples) <= MAX_TRIPLES:
            raise ContractError(f"a structure holds 1..{MAX_TRIPLES} triples, got {len(triples)}")
        for a, b in combinations(triples, 2):
            if not can_coexist(a, b):
                raise ContractError(f"{a} and {b} cannot govern the same problem")
        object.__setattr__(self, "triples", triples)

    def __str__(self) -> str:
        return "{" + ", ".join(str(t) for t in self.triples) + "}"

    def __len__(self) -> int:
        return len(self.triples)

    def governs(self, obj: ObjectType, attr: Attribute) -> Triple | None:
        return next((t for t in self.triples if t.target == (obj, attr)), None)

    @property
    def objects(self) -> set[ObjectType]:
        return {t.object for t in self.triples}

    def to_list(self) -> list[list[str]]:
        return [t.to_list() for t in self.triples]

    @classmethod
    def from_list(cls, values: list[list[str]]) -> "Structure":
        return cls(tuple(Triple.from_list(v) for v in values))


def triple_pairs(structure: Structure) -> set[tuple[Triple, Triple]]:
    return set(combinations(structure.triples, 2))


def attribute_pairs(structure: Structure) -> set[tuple[str, str]]:
    return {
        tuple(sorted((a.attribute.value, b.attribute.value)))
        for a, b in combinations(structure.triples, 2)
    }


Unit = Literal["triple", "triple_pair", "attribute_pair"]


def _encode_unit(unit: Any) -> Any:
    if isinstance(unit, Triple):
        return unit.to_list()
    return [_encode_unit(u) if isinstance(u, Triple) else u for u in unit]


@dataclass(frozen=True)
class StructureFilter:
    """Admits or rejects structures by the held-out units they contain.

    kind "all" admits everything, "exclude" admits structures containing no
    held-out unit, "require" admits only structures containing at least one.
    """

    kind: Literal["all", "exclude", "require"] = "all"
    unit: Unit | None = None
    held_out: frozenset = field(default_factory=frozenset)

    def units(self, structure: Structure) -> set:
        match self.unit:
            case "triple":
                return set(structure.triples)
            case "triple_pair":
                return triple_pairs(structure)
            case "attribute_pair":
                return attribute_pairs(structure)
        return set()

    def __call__(self, structure: Structure) -> bool:
        if self.kind == "all":
            return True
        hits = self.units(structure) & self.held_out
        return not hits if self.kind == "exclude" else bool(hits)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "unit": self.unit,
            "held_out": sorted((_encode_unit(u) for u in self.held_out), key=str),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StructureFilter":
        unit = data.get("unit")

        def decode(value: Any) -> Any:
            match unit:
                case "triple":
                    return Triple.from_list(value)
                case "triple_pair":
                    pair = (Triple.from_list(v) for v in value)
                    return tuple(sorted(pair, key=lambda t: t.codes))
            return tuple(value)

        return cls(
            kind=data.get("kind", "all"),
            unit=unit,
            held_out=frozenset(decode(v) for v in data.get("held_out", [])),
        )


def _draw_triples(rng: np.random.Generator, size: int) -> Structure | None:
    chosen: list[Triple] = []
    while len(chosen) < size:
        candidates = [t for t in ALL_TRIPLES if all(can_coexist(t, c) for c in chosen)]
        if not candidates:
            return None
        chosen.append(candidates[int(rng.integers(len(candidates)))])
    return Structure(tuple(chosen))


def sample_structure(
    rng: np.random.Generator,
    allowed: StructureFilter | None = None,
    max_retries: int = 1000,
) -> Structure:
    """Draw a structure: |S| uniform over 1..4, then compatible triples without replacement.

    Candidates rejected by `allowed` are redrawn at the same size, so a filter
    that rejects large structures more often does not skew |S|. A size with no
    admitted draw in `max_retries // 4` attempts is dropped and |S| is redrawn
    among the remaining sizes.

    Raises:
        GenerationError: If no admissible structure is found within `max_retries`
    """
    allowed = allowed or StructureFilter()
    sizes = list(range(1, MAX_TRIPLES + 1))
    per_size = max(1, max_retries // MAX_TRIPLES)
    draws = 0
    while sizes and draws < max_retries:
        size = sizes[int(rng.integers(len(sizes)))]
        for _ in range(min(per_size, max_retries - draws)):
            draws += 1
            structure = _draw_triples(rng, size)
            if structure is not None and allowed(structure):
                return structure
        if draws < max_retries:
            logger.debug("No size-%d structure admitted by %s; dropping the size", size, allowed)
            sizes.remove(size)
    logger.warning("No structure admitted by %s after %d draws", allowed, draws)
    raise GenerationError(f"filter admitted no structure in {draws} draws")
