import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from _oracles import brute_cells, brute_correspondence, brute_overlap
from mcslam import se3
from mcslam.pointcloud import (PLANE_EPS, Scan, build_voxel_map, estimate_covariances, find_correspondence,
                               overlap_rate, read_ply, regularize_plane, write_ply)
from mcslam.se3 import Pose

cloud = arrays(float, st.tuples(st.integers(12, 60), st.just(3)), elements=st.floats(-4, 4))


def test_plane_covariances_have_z_normal(rng):
    pts = np.c_[rng.uniform(-3, 3, (200, 2)), np.zeros(200)]
    scan = estimate_covariances(pts, k=10)
    for C in scan.covs:
        vals, vecs = np.linalg.eigh(C)
        np.testing.assert_allclose(vals, [PLANE_EPS, 1, 1], atol=1e-12)
        assert abs(abs(vecs[2, 0]) - 1) < 1e-9


def test_collinear_points_still_regularize():
    pts = np.c_[np.arange(5.0), np.zeros(5), np.zeros(5)]
    nb = pts[1:]
    raw = np.cov(nb.T, ddof=1)
    assert np.linalg.matrix_rank(raw) == 1
    scan = estimate_covariances(pts, k=4)
    for C in scan.covs:
        np.testing.assert_allclose(np.linalg.eigvalsh(C), [PLANE_EPS, 1, 1], atol=1e-12)


def test_random_cube_covariances_psd(rng):
    scan = estimate_covariances(rng.uniform(0, 1, (1000, 3)), k=10)
    np.testing.assert_allclose(scan.covs, np.swapaxes(scan.covs, 1, 2), atol=1e-12)
    assert np.linalg.eigvalsh(scan.covs).min() >= 0


def test_too_few_points_rejected():
    with pytest.raises(ValueError):
        estimate_covariances(np.zeros((5, 3)), k=10)
    with pytest.raises(ValueError):
        estimate_covariances(np.zeros((20, 3)), k=3)


def test_covariances_rotation_equivariant(rng):
    pts = rng.uniform(-2, 2, (300, 3)) * [1, 1, 0.2]
    R = se3.random_rotation(rng)
    a = estimate_covariances(pts, k=10).covs
    b = estimate_covariances(pts @ R.T, k=10).covs
    np.testing.assert_allclose(b, R @ a @ R.T, atol=1e-6)


@given(arrays(float, (3, 3), elements=st.floats(-3, 3)))
def test_regularized_eigenvalues_exact(M):
    C = regularize_plane((M @ M.T)[None])[0]
    np.testing.assert_allclose(np.linalg.eigvalsh(C), [PLANE_EPS, 1, 1], atol=1e-12)


def test_single_point_voxel():
    vm = build_voxel_map(Scan([[0.1, 0.1, 0.1]]), 1.0)
    assert list(vm.cells) == [(0, 0, 0)]


def test_two_points_same_cell_midpoint():
    vm = build_voxel_map(Scan([[0.1, 0.2, 0.3], [0.3, 0.4, 0.5]]), 1.0)
    (g, n), = vm.cells.values()
    assert n == 2
    np.testing.assert_allclose(g.mean, [0.2, 0.3, 0.4], atol=1e-15)


def test_cell_count_matches_naive_binning(rng):
    pts = rng.uniform(-3, 3, (1000, 3))
    vm = build_voxel_map(Scan(pts), 0.5)
    oracle = brute_cells(pts, 0.5)
    assert len(vm) == len(oracle)
    for key, (g, n) in vm.cells.items():
        members = np.array(oracle[key])
        assert n == len(members)
        np.testing.assert_allclose(g.mean, members.mean(axis=0), atol=1e-9)


@given(cloud, st.sampled_from([0.25, 0.5, 1.0]))
def test_members_inside_their_cell(pts, res):
    vm = build_voxel_map(Scan(pts), res)
    for p in pts:
        c = vm.lookup(np.floor(p / res))
        assert c >= 0
        lo = vm.indices[c] * res
        assert np.all(p >= lo - 1e-12) and np.all(p < lo + res + 1e-12)


def test_query_in_only_voxel():
    vm = build_voxel_map(Scan([[0.5, 0.5, 0.5]]), 1.0)
    g = find_correspondence(vm, [0.9, 0.1, 0.2])
    np.testing.assert_array_equal(g.mean, [0.5, 0.5, 0.5])


def test_empty_neighbourhood_is_absent():
    vm = build_voxel_map(Scan([[0.5, 0.5, 0.5]]), 1.0)
    assert find_correspondence(vm, [5.0, 5.0, 5.0]) is None


def test_correspondence_matches_brute_force_200(rng):
    vm = build_voxel_map(Scan(rng.uniform(-3, 3, (150, 3))), 0.5)
    q = rng.uniform(-3.5, 3.5, (200, 3))
    got = vm.find_cells(q)
    want = [brute_correspondence(vm, x) for x in q]
    np.testing.assert_array_equal(got, want)


@given(cloud, arrays(float, (20, 3), elements=st.floats(-5, 5)))
def test_correspondence_property(pts, q):
    vm = build_voxel_map(Scan(pts), 1.0)
    np.testing.assert_array_equal(vm.find_cells(q), [brute_correspondence(vm, x) for x in q])


def test_overlap_self_is_one(rng):
    s = Scan(rng.uniform(-5, 5, (500, 3)))
    assert overlap_rate(s, Pose.identity(), build_voxel_map(s, 0.5)) == 1.0


def test_overlap_far_away_is_zero(rng):
    s = Scan(rng.uniform(-5, 5, (500, 3)))
    assert overlap_rate(s, Pose.from_translation([10 * np.sqrt(300), 0, 0]), build_voxel_map(s, 0.5)) == 0.0


def test_overlap_half_shift_matches_membership(rng):
    pts = rng.uniform(0, 10, (800, 3))
    vm = build_voxel_map(Scan(pts), 0.5)
    pose = Pose.from_translation([5.0, 0.0, 0.0])
    assert overlap_rate(Scan(pts), pose, vm) == pytest.approx(brute_overlap(pts, pose, vm), abs=0)


@given(cloud)
def test_overlap_self_property(pts):
    s = Scan(pts)
    assert overlap_rate(s, Pose.identity(), build_voxel_map(s, 0.5)) == 1.0


def test_overlap_empty_scan_rejected():
    vm = build_voxel_map(Scan([[0, 0, 0]]), 1.0)
    with pytest.raises(ValueError):
        overlap_rate(Scan(np.zeros((0, 3))), Pose.identity(), vm)


def test_scan_size_limit():
    with pytest.raises(ValueError):
        Scan(np.zeros((10_001, 3)))


def test_ply_round_trip_exact(tmp_path, rng):
    pts = rng.normal(size=(50, 3)) * 1e3
    write_ply(tmp_path / "a.ply", pts)
    np.testing.assert_array_equal(read_ply(tmp_path / "a.ply"), pts)


def test_ply_reads_float_properties(tmp_path):
    (tmp_path / "b.ply").write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
                                   "property float z\nend_header\n1 2 3\n4 5 6\n")
    np.testing.assert_array_equal(read_ply(tmp_path / "b.ply"), [[1, 2, 3], [4, 5, 6]])


def test_voxel_map_rejects_bad_resolution():
    with pytest.raises(ValueError):
        build_voxel_map(Scan([[0, 0, 0]]), 0.0)
