import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from p23d.geometry import PointCloud
from p23d.voxel import (
    OccupancyGrid,
    VoxelError,
    downsample_mask,
    dumps,
    grid_iou,
    load_grid,
    loads,
    save_grid,
    sparse_coords,
    upsample_mask,
    voxel_centers,
    voxelize,
)

from oracles import block_any_loop, voxelize_loop

coords = st.floats(-0.7, 0.7, allow_nan=False, width=64)
clouds = arrays(np.float64, st.tuples(st.integers(1, 60), st.just(3)), elements=coords)


def test_origin_point_n4():
    g = voxelize(PointCloud([[0.0, 0.0, 0.0]]), 4)
    assert g.count() == 1 and g.occ[2, 2, 2]


def test_corner_is_clamped_and_counted():
    g = voxelize(PointCloud([[0.5, 0.5, 0.5], [0.1, 0.1, 0.1]]), 8)
    assert g.occ[7, 7, 7]
    assert g.clamped == 1
    g = voxelize(PointCloud([[-3.0, 0.0, 9.0]]), 8)
    assert g.occ[0, 4, 7] and g.clamped == 1


def test_duplicates_idempotent():
    a = voxelize(PointCloud([[0.1, -0.2, 0.3]]), 16)
    b = voxelize(PointCloud([[0.1, -0.2, 0.3]] * 5), 16)
    assert a == b


def test_empty_cloud_rejected():
    with pytest.raises(VoxelError):
        voxelize(PointCloud(np.zeros((0, 3))), 8)


def test_grid_invariants():
    with pytest.raises(VoxelError):
        OccupancyGrid(np.zeros((1, 1, 1)))
    with pytest.raises(VoxelError):
        OccupancyGrid(np.zeros((2, 2, 3)))


@settings(max_examples=60, deadline=None)
@given(clouds)
def test_voxelize_matches_loop(pts):
    np.testing.assert_array_equal(voxelize(PointCloud(pts), 8).occ, voxelize_loop(pts, 8))


@settings(max_examples=60, deadline=None)
@given(clouds, st.sampled_from([(8, 2), (16, 4), (16, 8), (32, 4)]))
def test_downsample_consistency(pts, nr):
    N, r = nr
    fine = voxelize(PointCloud(pts), N)
    m = downsample_mask(fine, r)
    np.testing.assert_array_equal(m, voxelize(PointCloud(pts), r).occ)
    np.testing.assert_array_equal(m, block_any_loop(fine.occ, r))


def test_downsample_cases():
    full = OccupancyGrid(np.ones((8, 8, 8), bool))
    assert downsample_mask(full, 2).all()
    one = OccupancyGrid.empty(8)
    one.occ[5, 1, 6] = True
    m = downsample_mask(one, 4)
    assert m.sum() == 1 and m[2, 0, 3]
    big = OccupancyGrid.empty(64)
    big.occ[3, 0, 63] = True
    m = downsample_mask(big, 16)
    assert m.sum() == 1 and m[0, 0, 15]
    with pytest.raises(VoxelError):
        downsample_mask(full, 3)


@settings(max_examples=40, deadline=None)
@given(clouds, clouds)
def test_monotone_under_added_points(a, b):
    ga = voxelize(PointCloud(a), 16)
    gab = voxelize(PointCloud(np.concatenate([a, b])), 16)
    assert not (ga.occ & ~gab.occ).any()
    assert not (downsample_mask(ga, 4) & ~downsample_mask(gab, 4)).any()


def test_upsample_inverts_block_structure():
    m = np.zeros((4, 4, 4), bool)
    m[1, 2, 3] = True
    up = upsample_mask(m, 16)
    assert up.sum() == 64 and up[4:8, 8:12, 12:16].all()
    np.testing.assert_array_equal(downsample_mask(OccupancyGrid(up), 4), m)


def test_sparse_coords_and_centers():
    g = OccupancyGrid.empty(2)
    assert sparse_coords(g).shape == (0, 3)
    with pytest.raises(VoxelError):
        voxel_centers(g)
    g.occ[0, 0, 0] = True
    np.testing.assert_array_equal(sparse_coords(g), [[0, 0, 0]])
    np.testing.assert_array_equal(voxel_centers(g).points, [[-0.25, -0.25, -0.25]])


@settings(max_examples=40, deadline=None)
@given(arrays(bool, (8, 8, 8)))
def test_centers_round_trip(occ):
    if not occ.any():
        return
    g = OccupancyGrid(occ)
    assert voxelize(voxel_centers(g), 8) == g
    c = sparse_coords(g)
    assert [tuple(x) for x in c] == sorted(tuple(x) for x in c)


def test_iou_cases():
    a = OccupancyGrid.empty(4)
    assert grid_iou(a, OccupancyGrid.empty(4)) == 1.0
    a.occ[0, 0, 0] = a.occ[0, 0, 1] = True
    b = OccupancyGrid.empty(4)
    b.occ[0, 0, 1] = b.occ[0, 0, 2] = True
    assert grid_iou(a, a) == 1.0
    assert grid_iou(a, b) == pytest.approx(1 / 3)
    c = OccupancyGrid.empty(4)
    c.occ[3, 3, 3] = True
    assert grid_iou(a, c) == 0.0
    with pytest.raises(VoxelError):
        grid_iou(a, OccupancyGrid.empty(8))


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([2, 3, 5, 8, 16]), st.integers(0, 10**6))
def test_file_round_trip(N, seed):
    occ = np.random.default_rng(seed).random((N, N, N)) < 0.3
    g = OccupancyGrid(occ, bbox=np.array([-0.5, -0.25, 0, 0.5, 0.25, 0.125]))
    back = loads(dumps(g))
    assert back == g
    np.testing.assert_array_equal(back.bbox, g.bbox)


def test_file_layout_and_errors(tmp_path):
    g = OccupancyGrid.empty(4)
    g.occ[0, 0, 1] = True                      # flat index 1 -> bit 1 of byte 0
    blob = dumps(g)
    assert blob[:4] == b"VOXG"
    assert blob[12] == 0b10
    assert len(blob) == 12 + 8 + 24
    save_grid(g, tmp_path / "g.voxg")
    assert load_grid(tmp_path / "g.voxg") == g
    with pytest.raises(VoxelError):
        loads(b"NOPE" + blob[4:])
    with pytest.raises(VoxelError):
        loads(blob[:-1])
