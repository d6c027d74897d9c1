"""Axis-aligned box arithmetic in normalized canvas coordinates.

All coordinates are fractions of the collage canvas: a box is described by
its center ``(cx, cy)`` and its size ``(w, h)``, each in ``[0, 1]``. Working
in fractions keeps every similarity computation independent of the pixel
resolution the collage is eventually rendered at.

Similarity between two boxes is the Jaccard coefficient (intersection over
union), computed on the full geometric extent of the boxes. Edges derived
from ``cx +/- w/2`` may extend past the canvas; no clipping is applied.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

__all__ = ["Box", "area", "jaccard", "assign_cell"]


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle: center ``(cx, cy)``, size ``(w, h)``.

    Centers lie in ``[0, 1]``; sizes lie in ``(0, 1]`` (zero-area boxes are
    rejected at construction). Derived edges may extend beyond the canvas.
    """

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.cx <= 1.0) or not (0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center ({self.cx}, {self.cy}) outside [0, 1]")
        if not (0.0 < self.w <= 1.0) or not (0.0 < self.h <= 1.0):
            raise ValueError(f"box size ({self.w}, {self.h}) outside (0, 1]")

    @property
    def left(self) -> float:
        return self.cx - self.w / 2.0

    @property
    def right(self) -> float:
        return self.cx + self.w / 2.0

    @property
    def top(self) -> float:
        return self.cy - self.h / 2.0

    @property
    def bottom(self) -> float:
        return self.cy + self.h / 2.0


def area(b: Box) -> float:
    """Area of a box (product of its sides)."""
    return b.w * b.h


def jaccard(a: Box, b: Box) -> float:
    """Jaccard similarity (IoU) of two boxes: ``inter / (A + B - inter)``.

    Returns a value in ``[0, 1]``: 0 for disjoint boxes and exactly 1 for
    boxes with identical extents. Both areas are derived from the same edge
    differences as the intersection so the identity and upper-bound cases
    hold exactly in floating point.
    """
    ix = min(a.right, b.right) - max(a.left, b.left)
    iy = min(a.bottom, b.bottom) - max(a.top, b.top)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    area_a = (a.right - a.left) * (a.bottom - a.top)
    area_b = (b.right - b.left) * (b.bottom - b.top)
    return inter / (area_a + area_b - inter)


def assign_cell(p: Box, cells: Sequence[Box]) -> int | None:
    """Index of the cell with the largest Jaccard similarity to ``p``.

    ``cells`` is the grid's ground-truth cell boxes in index order
    (``CollageLayout.cells`` for a collage grid). Ties break to the lowest
    cell index. Returns ``None`` when every similarity is exactly 0, in
    which case the prediction is discarded downstream; with a full grid
    tiling the canvas this cannot happen for a valid box (any box with its
    center on the canvas overlaps some cell), so the ``None`` branch only
    triggers for partial cell sets.
    """
    best_index: int | None = None
    best_sim = 0.0
    for index, cell in enumerate(cells):
        sim = jaccard(p, cell)
        if sim > best_sim:
            best_sim = sim
            best_index = index
    return best_index
