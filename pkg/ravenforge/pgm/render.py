"""Rasterize panel specs to grayscale images.

White background, lines first and shapes on top. A colour level L is drawn
with ink 255 - 22 * L, so level 10 is the darkest. Glyph outlines are
`matplotlib.path.Path` polygons sampled at pixel centres; masks are cached.
"""

from functools import lru_cache
from typing import Sequence

import numpy as np
from matplotlib.path import Path

from ravenforge.errors import ParameterError
from ravenforge.pgm.panels import LINE_MOTIFS, SHAPE_TYPES, PanelSpec

RESOLUTIONS = (40, 80)
BACKGROUND = 255
INK_STEP = 22


def ink(level: int) -> int:
    return BACKGROUND - INK_STEP * level


def _check_resolution(resolution: int) -> None:
    if resolution not in RESOLUTIONS:
        raise ParameterError(f"resolution must be one of {RESOLUTIONS}, got {resolution}")


@lru_cache(maxsize=8)
def _pixel_centres(resolution: int) -> tuple[np.ndarray, np.ndarray]:
    coords = np.arange(resolution) + 0.5
    return np.meshgrid(coords, coords)


def _regular_polygon(sides: int, offset: float = 0.0, squash: float = 1.0) -> np.ndarray:
    angles = np.pi / 2 + offset + 2 * np.pi * np.arange(sides) / sides
    return np.stack([squash * np.cos(angles), np.sin(angles)], axis=1)


def _cross() -> np.ndarray:
    a, b = 0.35, 1.0
    return np.array(
        [(-a, b), (a, b), (a, a), (b, a), (b, -a), (a, -a),
         (a, -b), (-a, -b), (-a, -a), (-b, -a), (-b, a), (-a, a)]
    )


# Unit outlines, y pointing up; None marks the circle.
GLYPHS: dict[str, np.ndarray | None] = {
    "triangle": _regular_polygon(3),
    "square": _regular_polygon(4, offset=np.pi / 4),
    "pentagon": _regular_polygon(5),
    "hexagon": _regular_polygon(6),
    "circle": None,
    "diamond": _regular_polygon(4, squash=0.6),
    "cross": _cross(),
}


def glyph_radius(size: int, resolution: int) -> float:
    cell = resolution / 3
    return 0.5 * cell * (0.25 + 0.07 * size)


@lru_cache(maxsize=4096)
def shape_mask(shape_type: int, size: int, position: int, resolution: int) -> np.ndarray:
    cell = resolution / 3
    row, col = divmod(position, 3)
    cx, cy = (col + 0.5) * cell, (row + 0.5) * cell
    radius = glyph_radius(size, resolution)
    xs, ys = _pixel_centres(resolution)
    outline = GLYPHS[SHAPE_TYPES[shape_type]]
    if outline is None:
        mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= radius**2
    else:
        vertices = np.column_stack([cx + radius * outline[:, 0], cy - radius * outline[:, 1]])
        points = np.column_stack([xs.ravel(), ys.ravel()])
        mask = Path(vertices).contains_points(points).reshape(resolution, resolution)
    mask.flags.writeable = False
    return mask


@lru_cache(maxsize=64)
def line_mask(motif: int, resolution: int) -> np.ndarray:
    xs, ys = _pixel_centres(resolution)
    c = resolution / 2
    half_width = 0.6 * max(1, resolution // 40)
    match LINE_MOTIFS[motif]:
        case "horizontal":
            distance = np.abs(ys - c)
        case "vertical":
            distance = np.abs(xs - c)
        case "diagonal_down":
            distance = np.abs(xs - ys) / np.sqrt(2)
        case "diagonal_up":
            distance = np.abs(xs + ys - resolution) / np.sqrt(2)
        case "frame":
            inset = 0.06 * resolution
            distance = np.abs(np.maximum(np.abs(xs - c), np.abs(ys - c)) - (c - inset))
        case _:
            distance = np.abs(np.hypot(xs - c, ys - c) - 0.42 * resolution)
    mask = distance <= half_width
    mask.flags.writeable = False
    return mask


def render_panel(spec: PanelSpec, resolution: int = 40) -> np.ndarray:
    """Draw one panel as a (resolution, resolution) uint8 image.

    Raises:
        ParameterError: If `resolution` is not 40 or 80
    """
    _check_resolution(resolution)
    image = np.full((resolution, resolution), BACKGROUND, dtype=np.uint8)
    for line in spec.lines:
        image[line_mask(line.motif, resolution)] = ink(line.colour)
    for shape in spec.shapes:
        mask = shape_mask(shape.shape_type, shape.size, shape.position, resolution)
        image[mask] = ink(shape.colour)
    return image


def render_panels(specs: Sequence[PanelSpec], resolution: int = 40) -> np.ndarray:
    _check_resolution(resolution)
    return np.stack([render_panel(spec, resolution) for spec in specs])
