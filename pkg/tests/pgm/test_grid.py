import numpy as np
import pytest

from ravenforge.pgm.grid import realize_grid, relation_holds
from ravenforge.pgm.rules import check_rules, triple_holds
from ravenforge.pgm.structures import (
    ALL_TRIPLES,
    COMPATIBILITY,
    Attribute,
    ObjectType,
    Relation,
    Structure,
    Triple,
    sample_structure,
)


@pytest.mark.parametrize("triple", ALL_TRIPLES, ids=str)
def test_single_triple_grids_satisfy_their_rule(triple):
    rng = np.random.default_rng(7)
    for _ in range(5):
        grid = realize_grid(Structure((triple,)), rng)
        assert len(grid) == 9
        assert triple_holds(triple, grid)
        # No competing relation on the same attribute explains the grid too.
        for other in COMPATIBILITY[triple.target]:
            if other != triple.relation:
                assert not triple_holds(Triple(other, *triple.target), grid)


def test_sampled_structures_realize():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        structure = sample_structure(rng)
        grid = realize_grid(structure, rng)
        assert check_rules(structure, grid)


def test_objects_appear_only_when_governed():
    rng = np.random.default_rng(1)
    line_only = Structure((Triple(Relation.PROGRESSION, ObjectType.LINE, Attribute.COLOUR),))
    grid = realize_grid(line_only, rng)
    assert all(not panel.shapes and panel.lines for panel in grid)


def test_realization_is_reproducible():
    structure = sample_structure(np.random.default_rng(3))
    a = realize_grid(structure, np.random.default_rng(4))
    b = realize_grid(structure, np.random.default_rng(4))
    assert a == b


def test_relation_holds_on_value_tables():
    assert relation_holds(Relation.PROGRESSION, [[1, 2, 3], [4, 5, 6], [2, 3, 4]])
    assert relation_holds(Relation.PROGRESSION, [[1, 3, 5], [2, 4, 6], [4, 6, 8]])
    assert not relation_holds(Relation.PROGRESSION, [[1, 2, 3], [1, 3, 5], [2, 3, 4]])
    assert not relation_holds(Relation.PROGRESSION, [[3, 3, 3], [2, 2, 2], [1, 1, 1]])
    assert relation_holds(Relation.CONSISTENT_UNION, [[1, 2, 3], [3, 1, 2], [2, 3, 1]])
    assert not relation_holds(Relation.CONSISTENT_UNION, [[1, 2, 3], [3, 1, 2], [2, 3, 3]])

    a, b = frozenset({0, 1}), frozenset({1, 2})
    rows = [[a, b, frozenset({0, 2})]] * 3
    assert relation_holds(Relation.XOR, rows)
    assert not relation_holds(Relation.OR, rows)
    assert relation_holds(Relation.OR, [[a, b, frozenset({0, 1, 2})]] * 3)
    assert relation_holds(Relation.AND, [[a, b, frozenset({1})]] * 3)


def test_count_logic_uses_prefix_cells():
    assert relation_holds(Relation.OR, [[2, 5, 5], [3, 1, 3], [4, 4, 4]])
    assert relation_holds(Relation.AND, [[2, 5, 2], [3, 1, 1], [4, 4, 4]])
    assert relation_holds(Relation.XOR, [[2, 5, 3], [3, 1, 2], [1, 4, 3]])


def test_position_grids_place_shapes_on_the_set():
    rng = np.random.default_rng(9)
    triple = next(
        t
        for t in ALL_TRIPLES
        if t.target == (ObjectType.SHAPE, Attribute.POSITION) and t.relation == Relation.AND
    )
    grid = realize_grid(Structure((triple,)), rng)
    for a, b, c in (grid[0:3], grid[3:6], grid[6:9]):
        cells = [frozenset(s.position for s in panel.shapes) for panel in (a, b, c)]
        assert cells[2] == cells[0] & cells[1]
