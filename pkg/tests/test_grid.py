import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pigp.grid import (
    BoundaryData,
    Domain,
    GridError,
    build_grid,
    build_grid_family,
    interpolate_counts,
    sample_grid,
    select_nodes,
    tag_boundaries,
)
from pigp.shapefn import grid_geometry, integrate


def test_family_endpoints_match_coarse_and_fine():
    fam = build_grid_family(Domain((200, 100)), (201, 101), (401, 201), 51)
    assert fam.n_g == 51
    assert fam.coarse.shape == (201, 101)
    assert fam.fine.shape == (401, 201)


def test_single_grid_family():
    fam = build_grid_family(Domain((200, 100)), (11, 6), (11, 6), 1)
    assert fam.n_g == 1 and fam[0].n_elements == 50


def test_intermediate_counts_round_half_up():
    assert interpolate_counts((11, 6), (21, 11), 3)[1] == (16, 9)


@pytest.mark.parametrize("lengths,bad", [((0, 1), True), ((1, -2), True), ((1, 1), False)])
def test_degenerate_domain_rejected(lengths, bad):
    if bad:
        with pytest.raises(GridError):
            Domain(lengths)
    else:
        Domain(lengths)


def test_fine_below_coarse_rejected():
    with pytest.raises(GridError):
        interpolate_counts((21, 11), (11, 6), 3)


@settings(max_examples=30, deadline=None)
@given(nx=st.integers(2, 30), ny=st.integers(2, 30), lx=st.floats(0.5, 500), ly=st.floats(0.5, 500))
def test_volume_recovered(nx, ny, lx, ly):
    grid = build_grid(Domain((lx, ly)), (nx, ny))
    vol = integrate(np.ones(grid.n_elements), grid_geometry(grid))
    assert abs(vol - lx * ly) / (lx * ly) < 1e-12


def test_lshape_volume_and_connectivity():
    grid = build_grid(Domain((100, 100), "lshape"), (21, 21))
    vol = integrate(np.ones(grid.n_elements), grid_geometry(grid))
    assert abs(vol - 7500) / 7500 < 1e-12
    assert grid.n_elements == 300
    # no orphan nodes
    assert np.array_equal(np.unique(grid.elements), np.arange(grid.n_nodes))


def test_3d_volume():
    grid = build_grid(Domain((6, 3, 2)), (7, 4, 3))
    assert abs(integrate(np.ones(grid.n_elements), grid_geometry(grid)) - 36) < 1e-12


def test_interior_nodes_shared_by_four_elements():
    grid = build_grid(Domain((10, 5)), (11, 6))
    count = np.bincount(grid.elements.ravel(), minlength=grid.n_nodes)
    interior = np.setdiff1d(np.arange(grid.n_nodes), grid.boundary)
    assert np.all(count[interior] == 4)
    assert len(grid.boundary) == 2 * (11 + 6) - 4


def test_elements_counter_clockwise_and_centers_inside():
    grid = build_grid(Domain((3, 2)), (4, 3))
    x = grid.nodes[grid.elements]
    # shoelace area positive => CCW
    area = 0.5 * np.sum(x[:, :, 0] * np.roll(x[:, :, 1], -1, 1) - np.roll(x[:, :, 0], -1, 1) * x[:, :, 1], axis=1)
    assert np.all(area > 0)
    lo, hi = x.min(axis=1), x.max(axis=1)
    assert np.all((grid.centers > lo) & (grid.centers < hi))


def test_sampling_reproducible_and_uniform():
    fam = build_grid_family(Domain((2, 1)), (3, 2), (53, 27), 51)
    a = [sample_grid(fam, np.random.default_rng(7)).index for _ in range(1)]
    b = [sample_grid(fam, np.random.default_rng(7)).index for _ in range(1)]
    assert a == b
    rng = np.random.default_rng(0)
    draws = np.array([sample_grid(fam, rng).index for _ in range(10_000)])
    freq = np.bincount(draws, minlength=51)
    p = 1 / 51
    sigma = np.sqrt(10_000 * p * (1 - p))
    assert np.all(np.abs(freq - 10_000 * p) < 5 * sigma)


def test_single_grid_sampling_always_first():
    fam = build_grid_family(Domain((2, 1)), (3, 2), (3, 2), 1)
    rng = np.random.default_rng(1)
    assert all(sample_grid(fam, rng).index == 0 for _ in range(20))


def test_point_snap_tie_goes_to_lowest_index():
    # (L, H/2) on an 11x6 grid of 200x100 lies between j=2 and j=3
    grid = build_grid(Domain((200, 100)), (11, 6))
    idx, snap = select_nodes(grid, {"point": [200, 50]})
    assert idx[0] == 10 + 11 * 2
    assert snap == pytest.approx(10.0)


def test_mbb_tags():
    grid = build_grid(Domain((200, 100)), (11, 6))
    specs = [
        BoundaryData("symmetry", "dirichlet-displacement", {"edge": "x0"}, (0,), (0,)),
        BoundaryData("roller", "dirichlet-displacement", {"point": [200, 0]}, (0,), (1,)),
    ]
    tagged = tag_boundaries(grid, specs)
    assert np.allclose(grid.nodes[tagged.boundary_tags["symmetry"], 0], 0)
    assert len(tagged.boundary_tags["symmetry"]) == 6
    assert tagged.node("roller") == 10


def test_empty_spec_leaves_grid_unchanged():
    grid = build_grid(Domain((2, 1)), (3, 2))
    assert tag_boundaries(grid, []) is grid


def test_region_matching_nothing_rejected():
    grid = build_grid(Domain((2, 1)), (3, 2))
    bad = BoundaryData("ghost", "dirichlet-temperature", {"box": [[5, 5], [6, 6]]})
    with pytest.raises(GridError, match="ghost"):
        tag_boundaries(grid, [bad])


def test_direction_normalized_and_zero_rejected():
    bc = BoundaryData("s", "point-spring", {"point": [0, 0]}, direction=(3, 4), stiffness=1)
    assert np.allclose(bc.direction, (0.6, 0.8))
    with pytest.raises(GridError):
        BoundaryData("s", "point-spring", {"point": [0, 0]}, direction=(0, 0))
