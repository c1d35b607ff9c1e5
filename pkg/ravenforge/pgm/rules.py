"""Rule checker used to verify generated grids.

Reads attribute values back off the finished panels and tests each triple on
every row. Nothing here is shared with the grid builder in `grid.py`; the two
are kept separate so that one can audit the other.
"""

from typing import Any, Sequence

from ravenforge.pgm.panels import PanelSpec
from ravenforge.pgm.structures import Attribute, ObjectType, Relation, Structure, Triple

_SHAPE_FIELDS = {Attribute.SIZE: "size", Attribute.TYPE: "shape_type", Attribute.COLOUR: "colour"}


def _uniform(values: set[Any]) -> Any:
    # Absent or mixed attributes have no single value.
    return next(iter(values)) if len(values) == 1 else None


def read_attribute(panel: PanelSpec, obj: ObjectType, attr: Attribute) -> Any:
    """Value of (obj, attr) on a panel, or None when it is undefined there."""
    if obj == ObjectType.SHAPE:
        if attr == Attribute.NUMBER:
            return len(panel.shapes)
        if attr == Attribute.POSITION:
            return frozenset(shape.position for shape in panel.shapes)
        return _uniform({getattr(shape, _SHAPE_FIELDS[attr]) for shape in panel.shapes})
    if attr == Attribute.TYPE:
        return frozenset(line.motif for line in panel.lines) or None
    if attr == Attribute.COLOUR:
        return _uniform({line.colour for line in panel.lines})
    return None


def _as_level(value: Any) -> int | None:
    if isinstance(value, frozenset):
        return min(value) if len(value) == 1 else None
    return value


def _progression(rows: list[list[Any]]) -> bool:
    deltas = set()
    for row in rows:
        levels = [_as_level(v) for v in row]
        if None in levels:
            return False
        first, second = levels[1] - levels[0], levels[2] - levels[1]
        if first != second:
            return False
        deltas.add(first)
    return len(deltas) == 1 and deltas <= {1, 2}


def _consistent_union(rows: list[list[Any]]) -> bool:
    key = repr  # frozensets do not order, their reprs do
    signatures = [sorted(row, key=key) for row in rows]
    return signatures[0] == signatures[1] == signatures[2]


def _combine_cells(relation: Relation, a: frozenset, b: frozenset) -> frozenset:
    if relation == Relation.XOR:
        return (a - b) | (b - a)
    if relation == Relation.OR:
        return a.union(b)
    return a.intersection(b)


def _combine_counts(relation: Relation, a: int, b: int) -> int:
    # A count n stands for the cell prefix {0, ..., n-1}.
    return len(_combine_cells(relation, frozenset(range(a)), frozenset(range(b))))


def _logical(relation: Relation, attr: Attribute, rows: list[list[Any]]) -> bool:
    combine = _combine_cells if attr == Attribute.POSITION else _combine_counts
    for a, b, c in rows:
        if not c or combine(relation, a, b) != c:
            return False
    return True


def triple_holds(triple: Triple, grid: Sequence[PanelSpec]) -> bool:
    values = [read_attribute(panel, triple.object, triple.attribute) for panel in grid]
    if any(v is None for v in values):
        return False
    rows = [values[0:3], values[3:6], values[6:9]]
    match triple.relation:
        case Relation.PROGRESSION:
            return _progression(rows)
        case Relation.CONSISTENT_UNION:
            return _consistent_union(rows)
        case _:
            return _logical(triple.relation, triple.attribute, rows)


def check_rules(structure: Structure, grid: Sequence[PanelSpec]) -> bool:
    """True iff every triple of `structure` holds on all three rows of the 9-panel `grid`."""
    if len(grid) != 9:
        return False
    return all(triple_holds(triple, grid) for triple in structure.triples)
