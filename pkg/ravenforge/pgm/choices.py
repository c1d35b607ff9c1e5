"""Answer-choice synthesis.

Each distractor is a copy of the correct panel with one governed attribute
changed. Candidates that still satisfy the structure, or that rasterize to an
image already among the choices, are rejected and redrawn. Some structures
admit fewer than seven raster-distinct single changes (a governed glyph type
has only six alternatives); once plain candidates keep failing, a distractor
also changes one ungoverned attribute.
"""

import logging
from dataclasses import replace
from typing import Any, Callable, Sequence

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
)
from ravenforge.pgm.render import render_panel
from ravenforge.pgm.rules import check_rules
from ravenforge.pgm.structures import Attribute, ObjectType, Structure

logger = logging.getLogger(__name__)

N_CHOICES = 8
# Failed draws before distractors may also change an ungoverned attribute.
ESCALATE_AFTER = 20

Perturbation = Callable[[PanelSpec, np.random.Generator], PanelSpec | None]


def _other_level(current: int, levels: range, rng: np.random.Generator) -> int:
    options = [v for v in levels if v != current]
    return options[int(rng.integers(len(options)))]


def _shape_field(field: str, levels: range) -> Perturbation:
    def perturb(panel: PanelSpec, rng: np.random.Generator) -> PanelSpec | None:
        if not panel.shapes:
            return None
        value = _other_level(getattr(panel.shapes[0], field), levels, rng)
        return panel.with_shapes(tuple(replace(s, **{field: value}) for s in panel.shapes))

    return perturb


def _add_shapes(panel: PanelSpec, cells: Sequence[int]) -> PanelSpec:
    template = panel.shapes[0]
    added = tuple(replace(template, position=int(cell)) for cell in cells)
    return panel.with_shapes(panel.shapes + added)


def _free_cells(panel: PanelSpec) -> list[int]:
    taken = {s.position for s in panel.shapes}
    return [cell for cell in range(N_POSITIONS) if cell not in taken]


def _perturb_number(panel: PanelSpec, rng: np.random.Generator) -> PanelSpec | None:
    if not panel.shapes:
        return None
    count = _other_level(len(panel.shapes), range(1, MAX_COUNT + 1), rng)
    if count < len(panel.shapes):
        keep = rng.choice(len(panel.shapes), size=count, replace=False)
        return panel.with_shapes(tuple(panel.shapes[int(i)] for i in keep))
    free = _free_cells(panel)
    extra = rng.choice(free, size=count - len(panel.shapes), replace=False)
    return _add_shapes(panel, extra)


def _perturb_position(panel: PanelSpec, rng: np.random.Generator) -> PanelSpec | None:
    if not panel.shapes:
        return None
    free = _free_cells(panel)
    move = bool(free) and (len(panel.shapes) == 1 or rng.random() < 0.5)
    if move:
        # Move one shape to an empty cell, keeping the count.
        moved = panel.shapes[int(rng.integers(len(panel.shapes)))]
        cell = free[int(rng.integers(len(free)))]
        rest = tuple(s for s in panel.shapes if s != moved)
        return panel.with_shapes(rest + (replace(moved, position=cell),))
    cell = int(rng.integers(N_POSITIONS))
    if cell in free:
        return _add_shapes(panel, [cell])
    if len(panel.shapes) == 1:
        return None
    return panel.with_shapes(tuple(s for s in panel.shapes if s.position != cell))


def _perturb_line_type(panel: PanelSpec, rng: np.random.Generator) -> PanelSpec | None:
    if not panel.lines:
        return None
    colour = panel.lines[0].colour
    motifs = {line.motif for line in panel.lines}
    motif = int(rng.integers(len(LINE_MOTIFS)))
    if motif in motifs:
        if len(motifs) == 1:
            return None
        motifs.discard(motif)
    elif rng.random() < 0.5:
        motifs = {motif}
    else:
        motifs.add(motif)
    return panel.with_lines(tuple(LineObject(m, colour) for m in motifs))


def _perturb_line_colour(panel: PanelSpec, rng: np.random.Generator) -> PanelSpec | None:
    if not panel.lines:
        return None
    colour = _other_level(panel.lines[0].colour, range(1, N_COLOURS + 1), rng)
    return panel.with_lines(tuple(replace(line, colour=colour) for line in panel.lines))


PERTURBATIONS: dict[tuple[ObjectType, Attribute], Perturbation] = {
    (ObjectType.SHAPE, Attribute.SIZE): _shape_field("size", range(1, N_SIZES + 1)),
    (ObjectType.SHAPE, Attribute.TYPE): _shape_field("shape_type", range(len(SHAPE_TYPES))),
    (ObjectType.SHAPE, Attribute.COLOUR): _shape_field("colour", range(1, N_COLOURS + 1)),
    (ObjectType.SHAPE, Attribute.NUMBER): _perturb_number,
    (ObjectType.SHAPE, Attribute.POSITION): _perturb_position,
    (ObjectType.LINE, Attribute.TYPE): _perturb_line_type,
    (ObjectType.LINE, Attribute.COLOUR): _perturb_line_colour,
}

# Ungoverned attributes a distractor may change in addition; free shape
# positions are left out since they vary from panel to panel anyway.
_NOISE_TARGETS = (
    (ObjectType.SHAPE, Attribute.SIZE),
    (ObjectType.SHAPE, Attribute.TYPE),
    (ObjectType.SHAPE, Attribute.COLOUR),
    (ObjectType.LINE, Attribute.TYPE),
    (ObjectType.LINE, Attribute.COLOUR),
)


def _pick(items: Sequence, rng: np.random.Generator) -> Any:
    return items[int(rng.integers(len(items)))]


def _candidate(
    answer: PanelSpec, structure: Structure, rng: np.random.Generator, escalate: bool
) -> PanelSpec | None:
    triple = _pick(structure.triples, rng)
    candidate = PERTURBATIONS[triple.target](answer, rng)
    if candidate is None or not escalate:
        return candidate
    governed = {t.target for t in structure.triples}
    noise = [t for t in _NOISE_TARGETS if t not in governed and t[0] in structure.objects]
    if not noise:
        return candidate
    return PERTURBATIONS[_pick(noise, rng)](candidate, rng) or candidate


def generate_choices(
    grid: Sequence[PanelSpec],
    structure: Structure,
    rng: np.random.Generator,
    resolution: int = 40,
    max_retries: int = 100,
) -> tuple[tuple[PanelSpec, ...], int]:
    """Build the 8 answer choices for a realized grid.

    Args:
        grid: The 9 panels of a grid satisfying `structure`; the last one is the answer
        structure: The structure the grid realizes
        rng: Random generator; the target slot is drawn first
        resolution: Raster size used for the distinctness check
        max_retries: Rejected candidates allowed before giving up

    Returns:
        (choices, target) with `choices[target] == grid[8]`

    Raises:
        GenerationError: If 7 valid distractors are not found within `max_retries` rejections
    """
    target = int(rng.integers(N_CHOICES))
    context, answer = tuple(grid[:8]), grid[8]
    seen = {render_panel(answer, resolution).tobytes()}
    distractors: list[PanelSpec] = []
    failures = 0
    while len(distractors) < N_CHOICES - 1:
        if failures >= max_retries:
            logger.warning("Gave up on distractors for %s after %d rejections", structure, failures)
            raise GenerationError(
                f"found {len(distractors)} of {N_CHOICES - 1} distractors for {structure} "
                f"in {max_retries} retries"
            )
        candidate = _candidate(answer, structure, rng, escalate=failures >= ESCALATE_AFTER)
        if candidate is None or check_rules(structure, context + (candidate,)):
            failures += 1
            continue
        raster = render_panel(candidate, resolution).tobytes()
        if raster in seen:
            failures += 1
            continue
        seen.add(raster)
        distractors.append(candidate)
    choices = distractors[:target] + [answer] + distractors[target:]
    return tuple(choices), target
