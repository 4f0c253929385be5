from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevfuse.errors import GeometryError
from bevfuse.geometry import (
    FIDELITY_GRID,
    BevGrid,
    GridSpec,
    Pose2D,
    cell_center,
    pose_apply,
    pose_compose,
    pose_inverse,
    world_to_cell,
    world_to_cells,
)

coord = st.floats(-50, 50, allow_nan=False)
angle = st.floats(-10, 10, allow_nan=False)
poses = st.builds(Pose2D, coord, coord, angle)
points = st.tuples(coord, coord)


def test_fidelity_grid_dimensions():
    assert FIDELITY_GRID.shape == (600, 1200)


def test_desk_grid_dimensions():
    assert GridSpec().shape == (120, 240)


def test_anchor_maps_into_row_zero():
    spec = GridSpec(6.0, 6.0, 0.01)
    row, col = world_to_cell(spec, (0.0, 0.0))
    assert row == 0 and col == 600


def test_half_cell_behind_and_right_of_vehicle_is_center_column():
    # "Left" as seen by the rearward-looking camera is vehicle -y.
    spec = GridSpec(6.0, 6.0, 0.01)
    assert world_to_cell(spec, (-0.005, -0.005)) == (0, 600)
    assert np.allclose(cell_center(spec, (0, 600)), (-0.005, -0.005))


def test_outside_extent_is_absent():
    spec = GridSpec()
    assert world_to_cell(spec, (0.1, 0.0)) is None
    assert world_to_cell(spec, (-6.5, 0.0)) is None
    assert world_to_cell(spec, (-1.0, 6.5)) is None


def test_boundary_goes_to_larger_index():
    spec = GridSpec(1.0, 1.0, 0.25)
    assert world_to_cell(spec, (-0.25, 0.0)) == (1, 4)


def test_cell_center_out_of_range():
    with pytest.raises(GeometryError):
        cell_center(GridSpec(), (120, 0))
    with pytest.raises(GeometryError):
        cell_center(GridSpec(), (0, -1))


def test_adjacent_columns_differ_by_cell_size_in_y():
    spec = GridSpec()
    a, b = cell_center(spec, (7, 30)), cell_center(spec, (7, 31))
    assert a[0] == b[0]
    assert a[1] - b[1] == pytest.approx(spec.cell_size, abs=1e-12)


def test_centimetre_centres_on_half_centimetre_lattice():
    c = FIDELITY_GRID.cell_centers()
    frac = np.abs(c * 100.0 - np.floor(c * 100.0) - 0.5)
    assert frac.max() < 1e-9


def test_round_trip_all_cells():
    spec = GridSpec(1.5, 2.0, 0.05, Pose2D(0.3, -0.2, 0.4))
    rows, cols, valid = world_to_cells(spec, spec.cell_centers())
    assert valid.all()
    rr, cc = np.indices(spec.shape)
    assert (rows == rr).all() and (cols == cc).all()


def test_non_integral_extent_rejected():
    with pytest.raises(GeometryError):
        GridSpec(1.0, 1.0, 0.3)
    with pytest.raises(GeometryError):
        GridSpec(1.0, 1.0, 0.0)


def test_scaled_keeps_extent():
    s = GridSpec().scaled(2)
    assert s.shape == (60, 120)


def test_grid_spec_dict_round_trip():
    spec = GridSpec(3.0, 2.0, 0.1, Pose2D(1.0, 2.0, 0.5))
    assert GridSpec.from_dict(spec.to_dict()) == spec


def test_bev_grid_shape_check():
    with pytest.raises(GeometryError):
        BevGrid(GridSpec(), np.zeros((10, 10)))
    g = BevGrid(GridSpec(), np.zeros((120, 240)))
    assert g.channels == 1


def test_quarter_turn():
    assert np.allclose(pose_apply(Pose2D(0, 0, math.pi / 2), (1.0, 0.0)), (0.0, 1.0), atol=1e-15)


def test_identity_pose_is_noop():
    p = np.array([1.25, -3.5])
    assert np.array_equal(Pose2D.identity().apply(p), p)


@settings(max_examples=200, deadline=None)
@given(poses, poses, points)
def test_compose_matches_sequential_apply(a, b, p):
    lhs = pose_apply(pose_compose(a, b), p)
    rhs = pose_apply(a, pose_apply(b, p))
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-12 * max(1.0, np.abs(rhs).max()))


@settings(max_examples=200, deadline=None)
@given(poses, points)
def test_inverse_round_trip(a, p):
    q = pose_apply(pose_compose(a, pose_inverse(a)), p)
    assert np.allclose(q, p, rtol=0, atol=1e-12 * max(1.0, abs(a.x), abs(a.y), np.abs(p).max()))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 119), st.integers(0, 239))
def test_world_to_cell_inverts_cell_center(r, c):
    spec = GridSpec()
    assert world_to_cell(spec, cell_center(spec, (r, c))) == (r, c)


@settings(max_examples=200, deadline=None)
@given(st.floats(-5.99, -0.01), st.floats(-5.99, 5.99))
def test_centre_of_found_cell_is_within_half_cell(x, y):
    spec = GridSpec()
    idx = world_to_cell(spec, (x, y))
    assert idx is not None
    c = cell_center(spec, idx)
    assert abs(c[0] - x) <= spec.cell_size / 2 + 1e-12
    assert abs(c[1] - y) <= spec.cell_size / 2 + 1e-12
