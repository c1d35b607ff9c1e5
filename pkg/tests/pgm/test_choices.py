import numpy as np
import pytest

from ravenforge.errors import GenerationError
from ravenforge.pgm.choices import N_CHOICES, generate_choices
from ravenforge.pgm.dataset import count_passing
from ravenforge.pgm.grid import realize_grid
from ravenforge.pgm.render import render_panel
from ravenforge.pgm.structures import (
    ALL_TRIPLES,
    Attribute,
    ObjectType,
    Relation,
    Structure,
    Triple,
    sample_structure,
)


def make_choices(structure, seed):
    rng = np.random.default_rng(seed)
    grid = realize_grid(structure, rng)
    choices, target = generate_choices(grid, structure, rng)
    return grid, choices, target


@pytest.mark.parametrize("triple", ALL_TRIPLES, ids=str)
def test_exactly_the_answer_satisfies_the_structure(triple):
    structure = Structure((triple,))
    grid, choices, target = make_choices(structure, seed=31)
    assert len(choices) == N_CHOICES
    assert choices[target] == grid[8]
    assert count_passing(structure, tuple(grid[:8]), choices) == [target]


def test_choices_are_raster_distinct():
    rng = np.random.default_rng(8)
    for _ in range(30):
        structure = sample_structure(rng)
        _, choices, _ = make_choices(structure, int(rng.integers(1 << 30)))
        rasters = {render_panel(choice, 40).tobytes() for choice in choices}
        assert len(rasters) == N_CHOICES


def test_target_slot_is_roughly_uniform():
    structure = Structure((Triple(Relation.PROGRESSION, ObjectType.SHAPE, Attribute.COLOUR),))
    targets = [make_choices(structure, seed)[2] for seed in range(400)]
    counts = np.bincount(targets, minlength=N_CHOICES)
    assert counts.min() > 20


def test_gives_up_when_no_distractor_can_be_found():
    structure = Structure((Triple(Relation.PROGRESSION, ObjectType.SHAPE, Attribute.SIZE),))
    rng = np.random.default_rng(0)
    grid = realize_grid(structure, rng)
    with pytest.raises(GenerationError):
        generate_choices(grid, structure, rng, max_retries=0)
