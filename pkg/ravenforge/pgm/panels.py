"""Symbolic panel descriptions.

A panel holds shapes on a 3x3 placement lattice (cells 0..8, row-major) and a
set of line motifs. All discrete levels are 1-based except glyph and motif
indices, which index `SHAPE_TYPES` and `LINE_MOTIFS`.
"""

from dataclasses import dataclass, field, replace
from typing import Any

from ravenforge.errors import ContractError

N_POSITIONS = 9
N_SIZES = 10
N_COLOURS = 10
MAX_COUNT = 9

SHAPE_TYPES = ("triangle", "square", "pentagon", "hexagon", "circle", "diamond", "cross")
LINE_MOTIFS = ("horizontal", "vertical", "diagonal_down", "diagonal_up", "frame", "ring")


@dataclass(frozen=True, order=True)
class ShapeObject:
    position: int
    shape_type: int
    size: int
    colour: int

    def __post_init__(self) -> None:
        if not 0 <= self.position < N_POSITIONS:
            raise ContractError(f"shape position {self.position} outside 0..{N_POSITIONS - 1}")
        if not 0 <= self.shape_type < len(SHAPE_TYPES):
            raise ContractError(f"shape type {self.shape_type} outside 0..{len(SHAPE_TYPES) - 1}")
        if not 1 <= self.size <= N_SIZES:
            raise ContractError(f"size level {self.size} outside 1..{N_SIZES}")
        if not 1 <= self.colour <= N_COLOURS:
            raise ContractError(f"colour level {self.colour} outside 1..{N_COLOURS}")


@dataclass(frozen=True, order=True)
class LineObject:
    motif: int
    colour: int

    def __post_init__(self) -> None:
        if not 0 <= self.motif < len(LINE_MOTIFS):
            raise ContractError(f"line motif {self.motif} outside 0..{len(LINE_MOTIFS) - 1}")
        if not 1 <= self.colour <= N_COLOURS:
            raise ContractError(f"line colour level {self.colour} outside 1..{N_COLOURS}")


@dataclass(frozen=True)
class PanelSpec:
    """Everything drawn in one panel; objects are kept sorted so equal panels compare equal."""

    shapes: tuple[ShapeObject, ...] = field(default_factory=tuple)
    lines: tuple[LineObject, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        shapes = tuple(sorted(self.shapes))
        lines = tuple(sorted(self.lines))
        if len({s.position for s in shapes}) != len(shapes):
            raise ContractError(f"two shapes share a cell: {[s.position for s in shapes]}")
        if len({line.motif for line in lines}) != len(lines):
            raise ContractError(f"duplicate line motifs: {[line.motif for line in lines]}")
        object.__setattr__(self, "shapes", shapes)
        object.__setattr__(self, "lines", lines)

    @property
    def is_empty(self) -> bool:
        return not self.shapes and not self.lines

    def with_shapes(self, shapes: tuple[ShapeObject, ...]) -> "PanelSpec":
        return replace(self, shapes=shapes)

    def with_lines(self, lines: tuple[LineObject, ...]) -> "PanelSpec":
        return replace(self, lines=lines)

    def to_dict(self) -> dict[str, Any]:
        return {
            "shapes": [[s.position, s.shape_type, s.size, s.colour] for s in self.shapes],
            "lines": [[line.motif, line.colour] for line in self.lines],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "PanelSpec":
        return cls(
            shapes=tuple(ShapeObject(*values) for values in data.get("shapes", [])),
            lines=tuple(LineObject(*values) for values in data.get("lines", [])),
        )
