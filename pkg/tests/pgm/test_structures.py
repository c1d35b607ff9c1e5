from collections import Counter

import numpy as np
import pytest
from scipy import stats

from ravenforge.errors import ContractError, GenerationError
from ravenforge.pgm.structures import (
    ALL_TRIPLES,
    Attribute,
    ObjectType,
    Relation,
    Structure,
    StructureFilter,
    Triple,
    can_coexist,
    sample_structure,
)

SIZE_PROGRESSION = Triple(Relation.PROGRESSION, ObjectType.SHAPE, Attribute.SIZE)
COLOUR_UNION = Triple(Relation.CONSISTENT_UNION, ObjectType.SHAPE, Attribute.COLOUR)
POSITION_XOR = Triple(Relation.XOR, ObjectType.SHAPE, Attribute.POSITION)
NUMBER_OR = Triple(Relation.OR, ObjectType.SHAPE, Attribute.NUMBER)
LINE_TYPE_UNION = Triple(Relation.CONSISTENT_UNION, ObjectType.LINE, Attribute.TYPE)


def test_compatibility_table_has_18_triples():
    assert len(ALL_TRIPLES) == 18
    assert len(set(ALL_TRIPLES)) == 18
    by_target = Counter(t.target for t in ALL_TRIPLES)
    assert by_target[(ObjectType.SHAPE, Attribute.NUMBER)] == 5
    assert by_target[(ObjectType.SHAPE, Attribute.POSITION)] == 3
    assert by_target[(ObjectType.LINE, Attribute.COLOUR)] == 2


@pytest.mark.parametrize(
    "relation,obj,attr",
    [
        (Relation.PROGRESSION, ObjectType.SHAPE, Attribute.POSITION),
        (Relation.XOR, ObjectType.SHAPE, Attribute.SIZE),
        (Relation.AND, ObjectType.LINE, Attribute.TYPE),
        (Relation.PROGRESSION, ObjectType.LINE, Attribute.NUMBER),
    ],
)
def test_incompatible_triples_are_rejected(relation, obj, attr):
    with pytest.raises(ContractError):
        Triple(relation, obj, attr)


def test_triple_codes_identify_the_triple():
    assert all(Triple.from_codes(t.codes) == t for t in ALL_TRIPLES)
    assert Triple.from_list(SIZE_PROGRESSION.to_list()) == SIZE_PROGRESSION


def test_structure_is_stored_in_canonical_order():
    a = Structure((LINE_TYPE_UNION, SIZE_PROGRESSION, COLOUR_UNION))
    b = Structure((COLOUR_UNION, LINE_TYPE_UNION, SIZE_PROGRESSION))
    assert a == b
    assert a.triples == b.triples
    assert Structure.from_list(a.to_list()) == a
    assert a.objects == {ObjectType.SHAPE, ObjectType.LINE}
    assert a.governs(ObjectType.SHAPE, Attribute.SIZE) == SIZE_PROGRESSION
    assert a.governs(ObjectType.SHAPE, Attribute.TYPE) is None


def test_structure_contracts():
    with pytest.raises(ContractError, match="duplicate"):
        Structure((SIZE_PROGRESSION, SIZE_PROGRESSION))
    with pytest.raises(ContractError):
        Structure(())
    with pytest.raises(ContractError):
        Structure(
            (
                SIZE_PROGRESSION,
                COLOUR_UNION,
                LINE_TYPE_UNION,
                NUMBER_OR,
                Triple(Relation.PROGRESSION, ObjectType.LINE, Attribute.COLOUR),
            )
        )
    # Two rules on the same (object, attribute).
    with pytest.raises(ContractError):
        Structure((SIZE_PROGRESSION, Triple(Relation.CONSISTENT_UNION, *SIZE_PROGRESSION.target)))
    with pytest.raises(ContractError):
        Structure((POSITION_XOR, NUMBER_OR))


def test_position_and_number_never_coexist():
    assert not can_coexist(POSITION_XOR, NUMBER_OR)
    assert can_coexist(POSITION_XOR, SIZE_PROGRESSION)


def test_sampled_structures_are_valid_and_sizes_uniform():
    rng = np.random.default_rng(11)
    structures = [sample_structure(rng) for _ in range(4000)]
    sizes = Counter(len(s) for s in structures)
    assert set(sizes) == {1, 2, 3, 4}
    _, p_value = stats.chisquare([sizes[k] for k in (1, 2, 3, 4)])
    assert p_value > 1e-3
    assert {t for s in structures for t in s.triples} == set(ALL_TRIPLES)


def test_filter_kinds():
    held_out = frozenset({SIZE_PROGRESSION})
    exclude = StructureFilter("exclude", "triple", held_out)
    require = StructureFilter("require", "triple", held_out)
    with_it = Structure((SIZE_PROGRESSION, LINE_TYPE_UNION))
    without = Structure((COLOUR_UNION, LINE_TYPE_UNION))
    assert StructureFilter()(with_it)
    assert not exclude(with_it) and exclude(without)
    assert require(with_it) and not require(without)


def test_filter_survives_serialization():
    pair = tuple(sorted((SIZE_PROGRESSION, LINE_TYPE_UNION), key=lambda t: t.codes))
    structures = [
        Structure((SIZE_PROGRESSION, LINE_TYPE_UNION)),
        Structure((SIZE_PROGRESSION, COLOUR_UNION)),
    ]
    for original in (
        StructureFilter("require", "triple_pair", frozenset({pair})),
        StructureFilter("exclude", "attribute_pair", frozenset({("size", "type")})),
        StructureFilter("exclude", "triple", frozenset({COLOUR_UNION})),
    ):
        restored = StructureFilter.from_dict(original.to_dict())
        assert restored == original
        assert [restored(s) for s in structures] == [original(s) for s in structures]


def test_sampling_under_a_filter():
    rng = np.random.default_rng(5)
    require = StructureFilter("require", "triple", frozenset({POSITION_XOR}))
    for _ in range(50):
        assert POSITION_XOR in sample_structure(rng, require).triples


def test_sampling_gives_up_when_nothing_is_admitted():
    impossible = StructureFilter("require", "triple", frozenset())
    with pytest.raises(GenerationError):
        sample_structure(np.random.default_rng(0), impossible, max_retries=20)


def test_filters_do_not_skew_sizes():
    """Rejected draws are redrawn at the same size."""
    rng = np.random.default_rng(12)
    exclude = StructureFilter("exclude", "triple", frozenset(ALL_TRIPLES[::4]))
    structures = [sample_structure(rng, exclude) for _ in range(4000)]
    assert all(exclude(s) for s in structures)
    sizes = Counter(len(s) for s in structures)
    _, p_value = stats.chisquare([sizes[k] for k in (1, 2, 3, 4)])
    assert p_value > 1e-3


def test_sizes_no_filter_can_admit_are_skipped():
    rng = np.random.default_rng(13)
    pairs = {tuple(sorted((POSITION_XOR, SIZE_PROGRESSION), key=lambda t: t.codes))}
    require = StructureFilter("require", "triple_pair", frozenset(pairs))
    for _ in range(20):
        structure = sample_structure(rng, require)
        assert {POSITION_XOR, SIZE_PROGRESSION} <= set(structure.triples)
