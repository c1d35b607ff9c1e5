from ravenforge.pgm.panels import LineObject, PanelSpec, ShapeObject
from ravenforge.pgm.rules import check_rules, read_attribute, triple_holds
from ravenforge.pgm.structures import Attribute, ObjectType, Relation, Structure, Triple

SIZE_PROGRESSION = Triple(Relation.PROGRESSION, ObjectType.SHAPE, Attribute.SIZE)
POSITION_OR = Triple(Relation.OR, ObjectType.SHAPE, Attribute.POSITION)
LINE_TYPE_UNION = Triple(Relation.CONSISTENT_UNION, ObjectType.LINE, Attribute.TYPE)


def shapes(cells, size=3, shape_type=1, colour=5):
    return PanelSpec(
        shapes=tuple(ShapeObject(c, shape_type, size, colour) for c in cells), lines=()
    )


def size_grid(sizes):
    return tuple(shapes([0, 4], size=s) for s in sizes)


def test_read_attribute():
    panel = PanelSpec(
        shapes=(ShapeObject(0, 2, 4, 7), ShapeObject(5, 2, 4, 3)),
        lines=(LineObject(1, 6), LineObject(4, 6)),
    )
    assert read_attribute(panel, ObjectType.SHAPE, Attribute.NUMBER) == 2
    assert read_attribute(panel, ObjectType.SHAPE, Attribute.POSITION) == frozenset({0, 5})
    assert read_attribute(panel, ObjectType.SHAPE, Attribute.SIZE) == 4
    # Mixed colours have no single value.
    assert read_attribute(panel, ObjectType.SHAPE, Attribute.COLOUR) is None
    assert read_attribute(panel, ObjectType.LINE, Attribute.TYPE) == frozenset({1, 4})
    assert read_attribute(panel, ObjectType.LINE, Attribute.COLOUR) == 6


def test_progression_holds_and_breaks():
    structure = Structure((SIZE_PROGRESSION,))
    sizes = [1, 2, 3, 4, 5, 6, 2, 3, 4]
    assert check_rules(structure, size_grid(sizes))
    assert not check_rules(structure, size_grid(sizes[:8] + [7]))
    # Rows must share the step.
    assert not check_rules(structure, size_grid([1, 2, 3, 2, 4, 6, 1, 2, 3]))
    assert check_rules(structure, size_grid([1, 3, 5, 2, 4, 6, 4, 6, 8]))


def test_position_or():
    rows = [([0], [1], [0, 1]), ([2, 3], [3], [2, 3]), ([8], [4, 8], [4, 8])]
    grid = tuple(shapes(cells) for row in rows for cells in row)
    assert triple_holds(POSITION_OR, grid)
    broken = grid[:8] + (shapes([4]),)
    assert not triple_holds(POSITION_OR, broken)


def test_consistent_union_on_line_types():
    motifs = [{0}, {1}, {2, 3}, {1}, {2, 3}, {0}, {2, 3}, {0}, {1}]
    grid = tuple(
        PanelSpec(shapes=(), lines=tuple(LineObject(m, 4) for m in sorted(cell))) for cell in motifs
    )
    assert check_rules(Structure((LINE_TYPE_UNION,)), grid)
    assert not check_rules(Structure((LINE_TYPE_UNION,)), grid[:8] + (grid[0],))


def test_missing_objects_fail():
    empty = PanelSpec(shapes=(), lines=())
    assert not check_rules(Structure((LINE_TYPE_UNION,)), (empty,) * 9)
    assert not check_rules(Structure((SIZE_PROGRESSION,)), size_grid([1, 2, 3] * 3)[:8])
