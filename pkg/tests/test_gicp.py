import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from _scenes import lattice_scene, random_twist
from mcslam import gicp, se3
from mcslam.filter import particle_log_likelihood
from mcslam.particles import KeyframeStore, Particle
from mcslam.pointcloud import Scan, build_voxel_map, estimate_covariances
from mcslam.se3 import Pose


def scene(rng, n=400):
    """Three noisy orthogonal planes plus clutter: well conditioned in all six DoF."""
    a = np.c_[rng.uniform(0, 4, (n, 2)), rng.normal(0, 0.01, n)]
    b = np.c_[rng.uniform(0, 4, n), rng.normal(0, 0.01, n), rng.uniform(0, 4, n)]
    c = np.c_[rng.normal(0, 0.01, n), rng.uniform(0, 4, (n, 2))]
    box = rng.uniform(1, 2, (n // 2, 3))
    return estimate_covariances(np.vstack([a, b, c, box]), k=10)


def explicit_objective(scan, vm, pose):
    """Reference H, b, ll built point by point from point_jacobian."""
    H = np.zeros((6, 6))
    b = np.zeros(6)
    ll = 0.0
    cells = vm.find_cells(scan.means @ pose.rotation.T + pose.translation)
    for j, c in enumerate(cells):
        if c < 0:
            continue
        e = gicp.point_residual(scan.means[j], vm.means[c], pose)
        W = np.linalg.inv(vm.covs[c] + pose.rotation @ scan.covs[j] @ pose.rotation.T)
        J = gicp.point_jacobian(scan.means[j], pose)
        ll -= e @ W @ e
        H += J.T @ W @ J
        b -= J.T @ W @ e
    return ll, H, b


def fd_jacobian(mu, target, pose, h=1e-6):
    J = np.zeros((3, 6))
    for i in range(6):
        d = np.zeros(6)
        d[i] = h
        J[:, i] = (gicp.point_residual(mu, target, se3.right_apply(pose, d))
                   - gicp.point_residual(mu, target, se3.right_apply(pose, -d))) / (2 * h)
    return J


def test_self_registration_zero_loglik():
    pts = np.array([[0.25, 0.25, 0.25], [1.75, 0.25, 0.25], [0.25, 1.75, 0.25]])
    scan = Scan(pts, np.stack([np.diag([1.0, 1.0, 1e-3])] * 3))
    obj = gicp.pairwise_log_likelihood(scan, build_voxel_map(scan, 1.0), Pose.identity())
    assert obj.log_likelihood == 0.0
    assert obj.matched_count == 3
    assert not np.any(obj.b)


def test_hand_evaluated_single_pair():
    scan = Scan([[0.0, 0.0, 0.0]], [np.eye(3) / 2])
    obj = gicp.pairwise_log_likelihood(scan, build_voxel_map(scan, 1.0), Pose.from_translation([1, 0, 0]))
    assert obj.log_likelihood == pytest.approx(-1.0, abs=1e-15)
    np.testing.assert_allclose(gicp.point_residual([0, 0, 0], [0, 0, 0], Pose.from_translation([1, 0, 0])), [-1, 0, 0])


def test_jacobian_matches_finite_differences(rng):
    for _ in range(100):
        pose = se3.random_pose(rng, max_angle=1.0)
        mu, target = rng.normal(size=3) * 3, rng.normal(size=3) * 3
        J = gicp.point_jacobian(mu, pose)
        Jfd = fd_jacobian(mu, target, pose)
        assert np.linalg.norm(J - Jfd) <= 1e-5 * np.linalg.norm(J)


def test_fused_accumulation_matches_explicit(rng):
    scan = scene(rng, 150)
    vm = build_voxel_map(scan, 0.5)
    pose = se3.exp(rng.normal(size=6) * 0.05)
    obj = gicp.pairwise_log_likelihood(scan, vm, pose)
    ll, H, b = explicit_objective(scan, vm, pose)
    assert obj.log_likelihood == pytest.approx(ll, rel=1e-10)
    np.testing.assert_allclose(obj.H, H, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(obj.b, b, rtol=1e-9, atol=1e-9)


def test_hessian_symmetric_psd(rng):
    scan = scene(rng, 150)
    obj = gicp.pairwise_log_likelihood(scan, build_voxel_map(scan, 0.5), se3.exp(rng.normal(size=6) * 0.05))
    np.testing.assert_allclose(obj.H, obj.H.T, atol=1e-9)
    assert np.linalg.eigvalsh(obj.H).min() > -1e-9
    assert obj.matched_count <= len(scan)
    assert obj.log_likelihood <= 0


def test_linearization_flag_skips_H():
    scan = Scan([[0.0, 0.0, 0.0]], [np.eye(3) / 2])
    obj = gicp.pairwise_log_likelihood(scan, build_voxel_map(scan, 1.0), Pose.from_translation([1, 0, 0]), False)
    assert not np.any(obj.H) and not np.any(obj.b)


def test_bad_covariance_names_the_point():
    scan = Scan([[0.0, 0.0, 0.0], [0.1, 0.1, 0.1]], [np.eye(3), -np.eye(3) * 3])
    vm = build_voxel_map(Scan([[0.0, 0.0, 0.0]], [np.eye(3)]), 1.0)
    with pytest.raises(gicp.GICPNumericalError, match="point 1"):
        gicp.pairwise_log_likelihood(scan, vm, Pose.identity())


def test_gn_step_zero_b():
    obj = gicp.LinearizedObjective(0.0, np.eye(6), np.zeros(6), 1)
    np.testing.assert_array_equal(gicp.gauss_newton_step(obj), np.zeros(6))


def test_gn_step_identity_system():
    e1 = np.eye(6)[0]
    np.testing.assert_allclose(gicp.gauss_newton_step(gicp.LinearizedObjective(0.0, np.eye(6), e1, 1), 0.0), e1)


@given(arrays(float, (6, 6), elements=st.floats(-3, 3)), arrays(float, 6, elements=st.floats(-3, 3)),
       st.floats(1e-3, 10))
def test_gn_step_residual(M, b, lam):
    H = M @ M.T
    psi = gicp.gauss_newton_step(gicp.LinearizedObjective(0.0, H, b, 1), lam)
    assert np.linalg.norm((H + lam * np.eye(6)) @ psi - b) < 1e-9 * max(1.0, np.linalg.norm(H, 2))


def test_gn_step_singular_raises():
    with pytest.raises(gicp.GICPNumericalError):
        gicp.gauss_newton_step(gicp.LinearizedObjective(0.0, np.zeros((6, 6)), np.ones(6), 1), 0.0)


def test_clamp_caps_norm():
    xi = np.array([3.0, 4.0, 0, 0, 0, 0])
    np.testing.assert_allclose(np.linalg.norm(gicp.clamp_step(xi, 1.0)), 1.0)
    np.testing.assert_array_equal(gicp.clamp_step(xi * 0.1, 1.0), xi * 0.1)


def test_step_increases_loglik(rng):
    scan = scene(rng)
    vm = build_voxel_map(scan, 0.5)
    improved = 0
    for _ in range(20):
        xi = rng.normal(size=6)
        xi *= rng.uniform(0.02, 0.2) / np.linalg.norm(xi)
        pose = se3.exp(xi)
        obj = gicp.pairwise_log_likelihood(scan, vm, pose)
        step = gicp.clamp_step(gicp.gauss_newton_step(obj))
        after = gicp.pairwise_log_likelihood(scan, vm, se3.right_apply(pose, step), False)
        improved += after.log_likelihood > obj.log_likelihood
    assert improved == 20


def test_register_recovers_displacement(rng):
    scan = lattice_scene()
    vm = build_voxel_map(scan, 0.5)
    for _ in range(10):
        got = gicp.register(scan, vm, se3.exp(random_twist(rng)), iterations=20)
        assert np.linalg.norm(got.translation) < 1e-3
        assert np.linalg.norm(se3.log(got)[3:]) < 1e-3


def test_register_on_random_scene_lands_near_truth(rng):
    # voxel means differ from the raw points, so the optimum is only close to identity
    scan = scene(rng)
    got = gicp.register(scan, build_voxel_map(scan, 0.5), se3.exp(random_twist(rng, 0.1)), iterations=20)
    assert np.linalg.norm(got.translation) < 0.02


def test_invariant_to_common_transform(rng):
    cloud = scene(rng, 150)
    store = KeyframeStore()
    store.append_odometry(0.0, Pose.identity())
    store.append_keyframe(cloud, build_voxel_map(cloud, 0.5), Pose.identity(), 0.0)
    kf = se3.exp(rng.normal(size=6) * 0.3)
    cur = kf @ se3.exp(rng.normal(size=6) * 0.05)
    G = se3.random_pose(rng, scale=20.0)
    a = particle_log_likelihood(cloud, Particle(cur, [kf]), store, [0])
    b = particle_log_likelihood(cloud, Particle(G @ cur, [G @ kf]), store, [0])
    assert b == pytest.approx(a, rel=1e-6)


def _store_with(clouds, res=0.5):
    store = KeyframeStore()
    for k, c in enumerate(clouds):
        store.append_odometry(float(k), Pose.identity() if k == 0 else Pose.from_translation([k, 0, 0]))
        store.append_keyframe(c, build_voxel_map(c, res), Pose.identity(), float(k))
    return store


def test_particle_loglik_one_and_two_neighbours(rng):
    cloud = scene(rng, 150)
    store = _store_with([cloud, cloud])
    cur = se3.exp(rng.normal(size=6) * 0.05)
    p = Particle(cur, [Pose.identity(), Pose.identity()])
    single = gicp.pairwise_log_likelihood(cloud, store[0].voxel_map, cur, False).log_likelihood
    assert particle_log_likelihood(cloud, p, store, [0]) == pytest.approx(single, rel=1e-12)
    assert particle_log_likelihood(cloud, p, store, [0, 1]) == pytest.approx(2 * single, rel=1e-12)


def test_particle_loglik_is_additive_over_three(rng):
    clouds = [scene(np.random.default_rng(s), 120) for s in range(3)]
    store = _store_with(clouds)
    kf = [se3.exp(rng.normal(size=6) * 0.1) for _ in range(3)]
    cur = se3.exp(rng.normal(size=6) * 0.1)
    scan = scene(rng, 120)
    want = sum(gicp.pairwise_log_likelihood(scan, store[k].voxel_map, gicp.relative_pose(kf[k], cur), False).log_likelihood
               for k in range(3))
    assert particle_log_likelihood(scan, Particle(cur, kf), store, [0, 1, 2]) == pytest.approx(want, rel=1e-10)
