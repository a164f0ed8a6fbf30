import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from sparselstm.voxel import (DEFAULT_VOXEL_SIZE, EgoPose, PatternMismatch, PointCloud,
                              SparseVoxelGrid, devoxelize, joint_voxelize, pack_coords,
                              transform_points, unpack_keys, voxelize)
from sparselstm.data import SceneConfig


def brute_force_cells(points, feats, size, origin=(0.0, 0.0, 0.0)):
    """Dense grouping: for each distinct floor cell, average the rows of its members."""
    cells = {}
    for p, f in zip(points, feats):
        key = tuple(int(np.floor((p[i] - origin[i]) / size)) for i in range(3))
        cells.setdefault(key, []).append(np.concatenate([p, f]))
    return {k: np.mean(v, axis=0) for k, v in cells.items()}


def test_single_point_lands_in_origin_cell():
    grid, mp = voxelize(PointCloud([[0.05, 0.05, 0.05]]), (0.2, 0.2, 0.2))
    assert grid.coords.tolist() == [[0, 0, 0]]
    np.testing.assert_array_equal(grid.features.data, [[0.05, 0.05, 0.05]])
    assert mp.cell_index.tolist() == [0]


def test_default_voxel_size_is_twenty_centimetres():
    assert DEFAULT_VOXEL_SIZE == (0.2, 0.2, 0.2)


def test_cell_means_match_dense_grouping(rng):
    pts = rng.uniform(0, 1, (100, 3))
    feats = rng.normal(size=(100, 2))
    grid, _ = voxelize(PointCloud(pts, feats), (0.25, 0.25, 0.25))
    oracle = brute_force_cells(pts, feats, 0.25)
    got = grid.as_dict()
    assert set(got) == set(oracle)
    for k, v in oracle.items():
        np.testing.assert_allclose(got[k], v, rtol=0, atol=1e-12)


def test_boundary_point_goes_to_higher_cell():
    grid, _ = voxelize(PointCloud([[0.2, 0.0, 0.0]]), (0.2, 0.2, 0.2))
    assert grid.coords.tolist() == [[1, 0, 0]]


def test_nonpositive_voxel_size_rejected():
    with pytest.raises(ValueError):
        voxelize(PointCloud([[0.0, 0.0, 0.0]]), (0.2, 0.0, 0.2))


def test_nonfinite_points_rejected():
    with pytest.raises(ValueError):
        PointCloud([[np.nan, 0.0, 0.0]])


def test_coordinate_packing_round_trip(rng):
    c = rng.integers(-1000, 1000, (50, 3))
    np.testing.assert_array_equal(unpack_keys(pack_coords(c)), c)
    order = np.lexsort((c[:, 2], c[:, 1], c[:, 0]))
    assert np.all(np.diff(pack_coords(c[order])) >= 0)


def test_devoxelize_broadcasts_cell_feature():
    grid = SparseVoxelGrid.from_cells({(0, 0, 0): [1.0, 2.0, 3.0]}, (0.2, 0.2, 0.2))
    _, mp = voxelize(PointCloud([[0.01, 0.02, 0.03], [0.1, 0.1, 0.1]]), (0.2, 0.2, 0.2))
    np.testing.assert_array_equal(devoxelize(grid, mp).data, [[1, 2, 3], [1, 2, 3]])


def test_devoxelize_gives_co_voxel_mean(rng):
    pts = rng.uniform(0, 1, (60, 3))
    grid, mp = voxelize(PointCloud(pts), (0.3, 0.3, 0.3))
    out = devoxelize(grid, mp).data
    cell = np.floor(pts / 0.3).astype(int)
    for i in range(len(pts)):
        same = np.all(cell == cell[i], axis=1)
        np.testing.assert_allclose(out[i], pts[same].mean(axis=0), atol=1e-12)


def test_devoxelize_empty_mapping():
    grid = SparseVoxelGrid.from_cells({(0, 0, 0): [1.0, 2.0]})
    _, mp = voxelize(PointCloud(np.zeros((0, 3))))
    assert devoxelize(grid, mp).shape == (0, 2)


def test_devoxelize_rejects_foreign_mapping():
    grid = SparseVoxelGrid.from_cells({(0, 0, 0): [1.0]})
    _, mp = voxelize(PointCloud([[5.0, 5.0, 5.0]]))
    with pytest.raises(PatternMismatch):
        devoxelize(grid, mp)


def test_joint_voxelize_disjoint_clouds_zero_pad():
    a = PointCloud([[0.1, 0.1, 0.1]])
    b = PointCloud([[0.5, 0.1, 0.1]])
    grid, maps = joint_voxelize([a, b], (0.2, 0.2, 0.2))
    d = grid.as_dict()
    assert set(d) == {(0, 0, 0), (2, 0, 0)}
    np.testing.assert_array_equal(d[(0, 0, 0)], [0.1, 0.1, 0.1, 0, 0, 0])
    np.testing.assert_array_equal(d[(2, 0, 0)], [0, 0, 0, 0.5, 0.1, 0.1])


def test_joint_voxelize_identical_clouds_fill_both_blocks(rng):
    pts = rng.uniform(0, 2, (30, 3))
    grid, _ = joint_voxelize([PointCloud(pts), PointCloud(pts)], (0.5, 0.5, 0.5))
    f = grid.features.data
    np.testing.assert_array_equal(f[:, :3], f[:, 3:])


def test_joint_voxelize_matches_independent_calls(rng):
    a = PointCloud(rng.uniform(0, 2, (40, 3)), rng.normal(size=(40, 3)))
    b = PointCloud(rng.uniform(1, 3, (30, 3)), rng.normal(size=(30, 5)))
    vs = (0.5, 0.5, 0.5)
    grid, maps = joint_voxelize([a, b], vs)
    ga, _ = voxelize(a, vs)
    gb, _ = voxelize(b, vs)
    union = set(ga.as_dict()) | set(gb.as_dict())
    assert set(grid.as_dict()) == union
    joint = grid.as_dict()
    for k, v in ga.as_dict().items():
        np.testing.assert_array_equal(joint[k][:6], v)
    for k, v in gb.as_dict().items():
        np.testing.assert_array_equal(joint[k][6:], v)


def test_transform_identity_and_translation():
    pc = PointCloud([[1.0, 2.0, 3.0]])
    p = EgoPose.from_yaw(0.3, [1, 2, 0])
    np.testing.assert_allclose(transform_points(pc, p, p).positions, pc.positions, atol=1e-12)
    moved = transform_points(PointCloud([[0.0, 0.0, 0.0]]), EgoPose.from_yaw(0.0, [1, 0, 0]),
                             EgoPose.identity())
    np.testing.assert_allclose(moved.positions, [[1.0, 0.0, 0.0]])


def test_bad_pose_rejected():
    with pytest.raises(ValueError):
        EgoPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


points = arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)),
                elements=st.floats(-5, 5, allow_nan=False, width=64))


@given(points, st.floats(0.1, 2.0))
def test_voxelization_is_permutation_invariant(pts, size):
    perm = np.random.default_rng(0).permutation(len(pts))
    g1, _ = voxelize(PointCloud(pts), (size,) * 3)
    g2, _ = voxelize(PointCloud(pts[perm]), (size,) * 3)
    np.testing.assert_array_equal(g1.coords, g2.coords)
    np.testing.assert_allclose(g1.features.data, g2.features.data, rtol=1e-12, atol=1e-12)


dyadic = st.integers(-64, 64).map(lambda k: k / 64)


@given(points, st.integers(2, 32).map(lambda k: k / 16), st.tuples(dyadic, dyadic, dyadic))
def test_points_lie_inside_their_cell(pts, size, origin):
    # dyadic sizes and origins keep the bound arithmetic exact
    pts = np.round(pts * 1024) / 1024
    origin = np.asarray(origin)
    vs = np.full(3, size)
    grid, mp = voxelize(PointCloud(pts), vs, origin)
    lo = origin + mp.point_to_voxel * vs
    assert np.all(lo <= pts) and np.all(pts < lo + vs)


@given(points, st.floats(0.1, 2.0))
def test_joint_of_one_cloud_equals_voxelize(pts, size):
    g1, _ = voxelize(PointCloud(pts), (size,) * 3)
    g2, _ = joint_voxelize([PointCloud(pts)], (size,) * 3)
    np.testing.assert_array_equal(g1.coords, g2.coords)
    np.testing.assert_array_equal(g1.features.data, g2.features.data)


@given(points, st.floats(-np.pi, np.pi), st.floats(-np.pi, np.pi),
       arrays(np.float64, 3, elements=st.floats(-20, 20)), arrays(np.float64, 3, elements=st.floats(-20, 20)))
def test_transform_round_trip(pts, ya, yb, ta, tb):
    a, b = EgoPose.from_yaw(ya, ta), EgoPose.from_yaw(yb, tb)
    back = transform_points(transform_points(PointCloud(pts), a, b), b, a)
    np.testing.assert_allclose(back.positions, pts, atol=1e-9)
