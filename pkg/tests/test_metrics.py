import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from raymem.geometry import Pose, compose, transform_point
from raymem.metrics import (
    MetricsReport,
    NearestIndex,
    PointCloud,
    Trajectory,
    accuracy,
    ate,
    completeness,
    estimate_normals,
    lower_median,
    normal_consistency,
    rpe,
)

from conftest import random_pose


def wiggly_trajectory(n=100, seed=0):
    rng = np.random.default_rng(seed)
    poses = [Pose.identity()]
    for _ in range(n - 1):
        step = Pose.rot_z(rng.normal(0, 0.05), tuple(rng.normal(0, 0.1, 3)))
        poses.append(compose(poses[-1], step))
    return Trajectory.from_poses(poses)


def plane_grid(z=0.0, n=11, spacing=1.0):
    g = np.arange(n) * spacing
    X, Y = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, z)])


# trajectory metrics


def test_ate_zero_cases():
    gt = wiggly_trajectory()
    assert ate(gt, gt) == pytest.approx(0.0, abs=1e-12)
    shifted = Trajectory(gt.frames, [compose(Pose.trans(3, -1, 2), p) for p in gt.poses])
    assert ate(shifted, gt) == pytest.approx(0.0, abs=1e-9)


def ate_oracle(E, G):
    # minimize the RMSE over a rotation vector and translation directly
    def cost(x):
        R = Rotation.from_rotvec(x[:3]).as_matrix()
        r = E @ R.T + x[3:] - G
        return np.mean(np.sum(r * r, axis=1))

    return math.sqrt(minimize(cost, np.zeros(6), method="BFGS", options={"gtol": 1e-12}).fun)


def test_ate_single_perturbed_pose_matches_optimizer_oracle():
    gt = wiggly_trajectory()
    poses = list(gt.poses)
    poses[37] = compose(Pose.trans(0.3, 0, 0), poses[37])
    est = Trajectory(gt.frames, poses)
    got = ate(est, gt)
    assert got == pytest.approx(ate_oracle(est.positions(), gt.positions()), abs=1e-7)
    assert 0.0 < got < 0.03
    # close to 0.3 / sqrt(100), less by what the alignment absorbs
    assert got == pytest.approx(0.03, rel=0.02)


@given(st.integers(0, 2**32 - 1))
def test_ate_invariant_to_rigid_transform_of_estimate(seed):
    rng = np.random.default_rng(seed)
    gt = wiggly_trajectory(30, seed)
    noisy = Trajectory(gt.frames, [compose(Pose.trans(*rng.normal(0, 0.05, 3)), p) for p in gt.poses])
    T = random_pose(rng)
    moved = Trajectory(gt.frames, [compose(T, p) for p in noisy.poses])
    assert ate(moved, gt) == pytest.approx(ate(noisy, gt), abs=1e-9)


def test_ate_needs_two_common_frames():
    t = Trajectory.from_poses([Pose.identity(), Pose.trans(1, 0, 0)])
    other = Trajectory([1, 5], [Pose.identity(), Pose.identity()])
    with pytest.raises(ValueError):
        ate(t, other)


def test_rpe_zero_and_global_gauge():
    gt = wiggly_trajectory()
    r = rpe(gt, gt)
    assert (r.trans, r.rot) == (pytest.approx(0, abs=1e-12), pytest.approx(0, abs=1e-9))
    T = Pose.rot_z(1.1, (4.0, 5.0, 6.0))
    rot = Trajectory(gt.frames, [compose(T, p) for p in gt.poses])
    r = rpe(rot, gt, 3)
    assert r.trans == pytest.approx(0, abs=1e-9) and r.rot == pytest.approx(0, abs=1e-6)


@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_rpe_gauge_invariance_on_either_side(seed, delta):
    rng = np.random.default_rng(seed)
    gt = wiggly_trajectory(20, seed)
    est = wiggly_trajectory(20, seed + 1)
    base = rpe(est, gt, delta)
    A, B = random_pose(rng), random_pose(rng)
    est2 = Trajectory(est.frames, [compose(A, p) for p in est.poses])
    gt2 = Trajectory(gt.frames, [compose(B, p) for p in gt.poses])
    r = rpe(est2, gt2, delta)
    assert r.trans == pytest.approx(base.trans, abs=1e-9)
    assert r.rot == pytest.approx(base.rot, abs=1e-6)


def test_rpe_constant_yaw_drift_is_exact():
    n = 50
    gt = Trajectory.from_poses([Pose.trans(0.1 * i, 0, 0) for i in range(n)])
    est = [Pose.identity()]
    step = Pose.trans(0.1, 0, 0)
    for _ in range(n - 1):
        est.append(compose(est[-1], compose(step, Pose.rot_z(math.radians(1.0)))))
    r = rpe(Trajectory.from_poses(est), gt, 1)
    assert r.rot == pytest.approx(1.0, abs=1e-9)


def test_rpe_no_pairs():
    t = Trajectory.from_poses([Pose.identity(), Pose.identity()])
    with pytest.raises(ValueError):
        rpe(t, t, 5)


# map metrics


def test_accuracy_identical_and_two_plane_fixture():
    A = plane_grid(0.0)
    assert accuracy(A, A).mean == 0.0 and completeness(A, A).median == 0.0
    B = plane_grid(0.1)
    assert accuracy(B, A).mean == pytest.approx(0.1, abs=1e-9)
    assert completeness(B, A).mean == pytest.approx(0.1, abs=1e-9)


@given(st.integers(0, 2**32 - 1))
def test_accuracy_is_completeness_reversed(seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(50, 3)), rng.normal(size=(70, 3))
    assert accuracy(A, B) == completeness(B, A)


def test_nearest_neighbors_match_kdtree():
    rng = np.random.default_rng(9)
    A = rng.uniform(size=(1000, 3))
    B = rng.uniform(size=(1000, 3)) * [1, 1, 0.2]
    dA, _ = cKDTree(B).query(A)
    dB, _ = cKDTree(A).query(B)
    a, c = accuracy(A, B), completeness(A, B)
    assert a.mean == pytest.approx(dA.mean(), abs=1e-12)
    assert a.median == np.sort(dA)[(len(dA) - 1) // 2]
    assert c.mean == pytest.approx(dB.mean(), abs=1e-12)


@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_nearest_index_equals_brute_force(seed, k):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(k, 300))
    P = rng.uniform(size=(n, 3)) ** 3  # clustered
    X = rng.uniform(-0.2, 1.2, size=(40, 3))
    D, I = NearestIndex(P).query(X, k)
    full = np.linalg.norm(X[:, None, :] - P[None, :, :], axis=2)
    order = np.lexsort((np.broadcast_to(np.arange(n), full.shape), full), axis=1)[:, :k]
    np.testing.assert_array_equal(I, order)
    np.testing.assert_array_equal(D, np.take_along_axis(full, order, axis=1))


def test_nearest_index_on_lattice_ties():
    P = plane_grid(0.0, n=5)
    D, I = NearestIndex(P).query(np.array([[0.5, 0.5, 0.0]]), 4)
    assert I[0].tolist() == [0, 1, 5, 6]
    np.testing.assert_allclose(D[0], math.sqrt(0.5))


def test_empty_cloud_raises():
    with pytest.raises(ValueError):
        accuracy(np.zeros((0, 3)), plane_grid())


def test_normal_consistency_identical_and_orthogonal():
    P = plane_grid()
    n = np.tile([0.0, 0.0, 1.0], (len(P), 1))
    c = PointCloud(P, n)
    assert normal_consistency(c, c).mean == 1.0
    side = PointCloud(P, np.tile([1.0, 0.0, 0.0], (len(P), 1)))
    assert normal_consistency(side, c).mean == 0.0


def test_estimated_normals_on_plane_and_degenerate_line():
    rng = np.random.default_rng(0)
    P = np.column_stack([rng.uniform(size=(200, 2)), np.zeros(200)])
    N, ok = estimate_normals(P, 10)
    assert ok.all()
    np.testing.assert_allclose(np.abs(N[:, 2]), 1.0, atol=1e-9)
    L = np.column_stack([np.arange(20.0), np.zeros(20), np.zeros(20)])
    _, ok = estimate_normals(L, 5)
    assert not ok.any()
    r = normal_consistency(L, L, 5)
    assert r.mean is None and r.n_degenerate == 20


@given(st.integers(0, 2**32 - 1))
def test_normal_consistency_bounded(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(40, 3))
    B = rng.normal(size=(40, 3))
    r = normal_consistency(A, B, 5)
    assert 0.0 <= r.mean <= 1.0 and 0.0 <= r.median <= 1.0


def test_lower_median():
    assert lower_median([4, 1, 3, 2]) == 2
    assert lower_median([5]) == 5


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), np.ones((2, 3)) / math.sqrt(3))


def test_metrics_report_csv_round_trip():
    r = MetricsReport(ate_rmse=0.1, rpe_trans=None, acc_mean=1 / 3, memory_count=12)
    text = r.to_csv()
    assert text.splitlines()[0] == ",".join(MetricsReport.header())
    assert MetricsReport.from_csv(text) == r
    assert ",," in text  # absent cells are empty, not zero


def test_rigid_transform_examples_in_ate_frame():
    # ATE alignment also handles a collinear (straight-line) trajectory
    gt = Trajectory.from_poses([Pose.trans(0.1 * i, 0, 0) for i in range(10)])
    T = Pose.rot_z(0.4, (1.0, 2.0, 0.0))
    est = Trajectory(gt.frames, [compose(T, p) for p in gt.poses])
    assert ate(est, gt) == pytest.approx(0.0, abs=1e-9)
    np.testing.assert_allclose(transform_point(T, [0.0, 0.0, 0.0]), [1, 2, 0])
