import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codedcollage.codec import build_layout
from codedcollage.geometry import Box, area, assign_cell, jaccard

from oracles import grid_box, pixel_iou, pixel_iou_mask


@st.composite
def boxes(draw):
    # Coordinates on the 1/256 grid: valid by construction and exactly
    # rasterizable by the pixel oracle.
    return Box(
        draw(st.integers(0, 256)) / 256,
        draw(st.integers(0, 256)) / 256,
        draw(st.integers(1, 256)) / 256,
        draw(st.integers(1, 256)) / 256,
    )


class TestBoxValidation:
    def test_rejects_center_outside_canvas(self):
        with pytest.raises(ValueError):
            Box(1.5, 0.5, 0.1, 0.1)
        with pytest.raises(ValueError):
            Box(0.5, -0.01, 0.1, 0.1)

    def test_rejects_nonpositive_and_oversized_sides(self):
        with pytest.raises(ValueError):
            Box(0.5, 0.5, 0.0, 0.1)
        with pytest.raises(ValueError):
            Box(0.5, 0.5, 0.1, -0.2)
        with pytest.raises(ValueError):
            Box(0.5, 0.5, 1.1, 0.1)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Box(float("nan"), 0.5, 0.1, 0.1)
        with pytest.raises(ValueError):
            Box(0.5, 0.5, float("nan"), 0.1)

    def test_edges_may_extend_past_canvas(self):
        b = Box(0.0, 1.0, 0.5, 0.5)
        assert b.left == -0.25
        assert b.bottom == 1.25


def test_area_examples():
    assert area(Box(0.5, 0.5, 1, 1)) == 1.0
    assert area(Box(0.25, 0.25, 0.5, 0.5)) == 0.25
    assert area(Box(0.5, 0.5, 0.3, 0.7)) == pytest.approx(0.21)


def test_jaccard_identity_is_exactly_one():
    for b in (Box(0.5, 0.5, 1, 1), Box(0.13671875, 0.75, 0.35546875, 0.015625)):
        assert jaccard(b, b) == 1.0


def test_jaccard_disjoint_halves():
    assert jaccard(Box(0.25, 0.5, 0.5, 1), Box(0.75, 0.5, 0.5, 1)) == 0.0


def test_jaccard_half_in_whole():
    assert jaccard(Box(0.5, 0.5, 1, 1), Box(0.25, 0.5, 0.5, 1)) == 0.5


def test_jaccard_touching_edges_do_not_intersect():
    # Shared boundary has zero area.
    assert jaccard(Box(0.25, 0.25, 0.5, 0.5), Box(0.75, 0.25, 0.5, 0.5)) == 0.0


@given(boxes(), boxes())
def test_jaccard_symmetry(a, b):
    assert jaccard(a, b) == jaccard(b, a)


@given(boxes(), boxes())
def test_jaccard_bounds(a, b):
    j = jaccard(a, b)
    assert 0.0 <= j <= 1.0


def test_jaccard_matches_pixel_oracle_quick():
    rng = np.random.Generator(np.random.Philox(key=[7, 0]))
    for _ in range(1000):
        a, b = grid_box(rng), grid_box(rng)
        assert abs(jaccard(a, b) - pixel_iou(a, b)) < 1e-6


def test_pixel_oracle_agrees_with_full_mask_rasterization():
    rng = np.random.Generator(np.random.Philox(key=[8, 0]))
    for _ in range(100):
        a, b = grid_box(rng), grid_box(rng)
        assert pixel_iou(a, b) == pixel_iou_mask(a, b)


class TestAssignCell:
    def test_identity_box_wins_its_cell(self):
        cells = build_layout(3).cells
        assert assign_cell(cells[4], cells) == 4

    def test_published_similarity_pattern_picks_first_cell(self):
        cells = build_layout(2).cells
        p = Box(
            0.40550888174769323, 0.40550888174769323,
            0.5669467095138409, 0.5669467095138409,
        )
        sims = [jaccard(p, c) for c in cells]
        assert sims[0] == pytest.approx(1 / 3, abs=1e-12)
        assert sims[1] == pytest.approx(1 / 7, abs=1e-12)
        assert sims[2] == pytest.approx(1 / 7, abs=1e-12)
        assert sims[3] == pytest.approx(1 / 15, abs=1e-12)
        assert assign_cell(p, cells) == 0

    def test_tie_breaks_to_lowest_index(self):
        cells = build_layout(2).cells
        # Straddles cells 0 and 1 symmetrically: both similarities are 1/3.
        p = Box(0.5, 0.25, 0.5, 0.5)
        assert jaccard(p, cells[0]) == jaccard(p, cells[1]) > 0
        assert assign_cell(p, cells) == 0

    def test_no_overlap_returns_none(self):
        top_row = build_layout(2).cells[:2]
        bottom_box = Box(0.5, 0.9, 0.2, 0.2)
        assert assign_cell(bottom_box, top_row) is None

    @given(boxes())
    def test_full_tiling_always_assigns(self, p):
        cells = build_layout(3).cells
        assert assign_cell(p, cells) is not None

    def test_canvas_resolution_never_matters(self):
        # Cell geometry is normalized; the pixel canvas size must not
        # change any assignment.
        a = build_layout(3, canvas_px=416).cells
        b = build_layout(3, canvas_px=1000).cells
        assert a == b
        rng = np.random.Generator(np.random.Philox(key=[9, 0]))
        for _ in range(50):
            p = grid_box(rng)
            assert assign_cell(p, a) == assign_cell(p, b)
