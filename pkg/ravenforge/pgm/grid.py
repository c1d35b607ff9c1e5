"""Realize a structure as a 3x3 grid of panel specs.

Each governed (object, attribute) pair gets a 3x3 table of values built
forward from its relation. Ungoverned attributes are held constant along each
row (shape positions are free noise). A realization is rejected and redrawn
when a governed pair also happens to satisfy another relation it is
compatible with, so every governed pair carries exactly one rule.
"""

import logging
from collections import Counter
from typing import Any, Callable

import numpy as np

from ravenforge.errors import GenerationError
from ravenforge.pgm.panels import (
    LINE_MOTIFS,
    MAX_COUNT,
    N_COLOURS,
    N_POSITIONS,
    N_SIZES,
    SHAPE_TYPES,
    LineObject,
    PanelSpec,
    ShapeObject,
)
from ravenforge.pgm.structures import COMPATIBILITY, Attribute, ObjectType, Relation, Structure

logger = logging.getLogger(__name__)

Rows = list[list[Any]]
Target = tuple[ObjectType, Attribute]

# Inclusive integer ranges of the scalar attributes.
LEVELS: dict[Target, tuple[int, int]] = {
    (ObjectType.SHAPE, Attribute.SIZE): (1, N_SIZES),
    (ObjectType.SHAPE, Attribute.TYPE): (0, len(SHAPE_TYPES) - 1),
    (ObjectType.SHAPE, Attribute.COLOUR): (1, N_COLOURS),
    (ObjectType.SHAPE, Attribute.NUMBER): (1, MAX_COUNT),
    (ObjectType.LINE, Attribute.TYPE): (0, len(LINE_MOTIFS) - 1),
    (ObjectType.LINE, Attribute.COLOUR): (1, N_COLOURS),
}

SET_OPS: dict[Relation, Callable[[frozenset, frozenset], frozenset]] = {
    Relation.XOR: lambda a, b: a ^ b,
    Relation.OR: lambda a, b: a | b,
    Relation.AND: lambda a, b: a & b,
}
COUNT_OPS: dict[Relation, Callable[[int, int], int]] = {
    Relation.XOR: lambda a, b: abs(a - b),
    Relation.OR: max,
    Relation.AND: min,
}

LINE_TYPE = (ObjectType.LINE, Attribute.TYPE)


def _random_subset(rng: np.random.Generator, universe: int, low: int, high: int) -> frozenset:
    size = int(rng.integers(low, high + 1))
    return frozenset(int(v) for v in rng.choice(universe, size=size, replace=False))


def _progression_rows(target: Target, rng: np.random.Generator) -> Rows:
    lo, hi = LEVELS[target]
    step = int(rng.choice([1, 2]))
    rows = []
    for _ in range(3):
        start = int(rng.integers(lo, hi - 2 * step + 1))
        rows.append([start, start + step, start + 2 * step])
    if target == LINE_TYPE:
        rows = [[frozenset({v}) for v in row] for row in rows]
    return rows


def _union_domain(target: Target) -> list[Any]:
    if target == LINE_TYPE:
        singles = [frozenset({m}) for m in range(len(LINE_MOTIFS))]
        n = len(LINE_MOTIFS)
        pairs = [frozenset({a, b}) for a in range(n) for b in range(a + 1, n)]
        return singles + pairs
    lo, hi = LEVELS[target]
    return list(range(lo, hi + 1))


def _union_rows(target: Target, rng: np.random.Generator) -> Rows:
    domain = _union_domain(target)
    picks = [domain[i] for i in rng.choice(len(domain), size=3, replace=False)]
    return [[picks[i] for i in rng.permutation(3)] for _ in range(3)]


def _logical_rows(relation: Relation, attribute: Attribute, rng: np.random.Generator) -> Rows:
    rows = []
    while len(rows) < 3:
        if attribute == Attribute.POSITION:
            a = _random_subset(rng, N_POSITIONS, 2, 5)
            b = _random_subset(rng, N_POSITIONS, 2, 5)
            result: Any = SET_OPS[relation](a, b)
        else:
            a, b = (int(v) for v in rng.integers(1, MAX_COUNT + 1, size=2))
            result = COUNT_OPS[relation](a, b)
        if result:
            rows.append([a, b, result])
    return rows


def _progression_step(row: list[Any]) -> int | None:
    if all(isinstance(v, frozenset) for v in row):
        if any(len(v) != 1 for v in row):
            return None
        row = [next(iter(v)) for v in row]
    step = row[1] - row[0]
    return step if row[2] - row[1] == step else None


def relation_holds(relation: Relation, rows: Rows) -> bool:
    """Whether `relation` holds along all three rows of a value table."""
    if relation == Relation.PROGRESSION:
        steps = {_progression_step(row) for row in rows}
        return len(steps) == 1 and steps.pop() in (1, 2)
    if relation == Relation.CONSISTENT_UNION:
        return Counter(rows[0]) == Counter(rows[1]) == Counter(rows[2])
    ops: dict = SET_OPS if isinstance(rows[0][0], frozenset) else COUNT_OPS
    return all(row[2] == ops[relation](row[0], row[1]) for row in rows)


def _governed_rows(relation: Relation, target: Target, rng: np.random.Generator) -> Rows:
    if relation == Relation.PROGRESSION:
        return _progression_rows(target, rng)
    if relation == Relation.CONSISTENT_UNION:
        return _union_rows(target, rng)
    return _logical_rows(relation, target[1], rng)


def _row_constant(values: list[Any]) -> Rows:
    return [[v, v, v] for v in values]


def _is_unambiguous(structure: Structure, tables: dict[Target, Rows]) -> bool:
    for triple in structure.triples:
        rows = tables[triple.target]
        if not relation_holds(triple.relation, rows):
            return False
        for other in COMPATIBILITY[triple.target]:
            if other != triple.relation and relation_holds(other, rows):
                return False
    return True


def _value_tables(structure: Structure, rng: np.random.Generator) -> dict[Target, Rows]:
    tables = {t.target: _governed_rows(t.relation, t.target, rng) for t in structure.triples}
    if ObjectType.SHAPE in structure.objects:
        for attr in (Attribute.SIZE, Attribute.TYPE, Attribute.COLOUR):
            target = (ObjectType.SHAPE, attr)
            if target not in tables:
                lo, hi = LEVELS[target]
                tables[target] = _row_constant([int(v) for v in rng.integers(lo, hi + 1, size=3)])
        cells = {(ObjectType.SHAPE, Attribute.POSITION), (ObjectType.SHAPE, Attribute.NUMBER)}
        if not cells & tables.keys():
            counts = [int(v) for v in rng.integers(1, 5, size=3)]
            tables[(ObjectType.SHAPE, Attribute.NUMBER)] = _row_constant(counts)
    if ObjectType.LINE in structure.objects:
        if LINE_TYPE not in tables:
            motifs = [_random_subset(rng, len(LINE_MOTIFS), 1, 2) for _ in range(3)]
            tables[LINE_TYPE] = _row_constant(motifs)
        colour = (ObjectType.LINE, Attribute.COLOUR)
        if colour not in tables:
            tables[colour] = _row_constant([int(v) for v in rng.integers(1, N_COLOURS + 1, size=3)])
    return tables


def _panel(tables: dict[Target, Rows], index: int, rng: np.random.Generator) -> PanelSpec:
    row, col = divmod(index, 3)

    def value(obj: ObjectType, attr: Attribute) -> Any:
        return tables[(obj, attr)][row][col]

    shapes: tuple[ShapeObject, ...] = ()
    if (ObjectType.SHAPE, Attribute.SIZE) in tables:
        if (ObjectType.SHAPE, Attribute.POSITION) in tables:
            cells = value(ObjectType.SHAPE, Attribute.POSITION)
        else:
            count = value(ObjectType.SHAPE, Attribute.NUMBER)
            cells = rng.choice(N_POSITIONS, size=count, replace=False)
        shapes = tuple(
            ShapeObject(
                position=int(cell),
                shape_type=value(ObjectType.SHAPE, Attribute.TYPE),
                size=value(ObjectType.SHAPE, Attribute.SIZE),
                colour=value(ObjectType.SHAPE, Attribute.COLOUR),
            )
            for cell in cells
        )
    lines: tuple[LineObject, ...] = ()
    if LINE_TYPE in tables:
        colour = value(ObjectType.LINE, Attribute.COLOUR)
        lines = tuple(LineObject(motif=m, colour=colour) for m in value(*LINE_TYPE))
    return PanelSpec(shapes=shapes, lines=lines)


def realize_grid(
    structure: Structure, rng: np.random.Generator, max_retries: int = 100
) -> tuple[PanelSpec, ...]:
    """Build the 9 panels (row-major) of a grid on which every triple of `structure` holds.

    Raises:
        GenerationError: If no unambiguous realization is found within `max_retries`
    """
    for _ in range(max_retries):
        tables = _value_tables(structure, rng)
        if _is_unambiguous(structure, tables):
            return tuple(_panel(tables, i, rng) for i in range(9))
    logger.warning("Could not realize %s in %d attempts", structure, max_retries)
    raise GenerationError(f"could not realize {structure} in {max_retries} attempts")
