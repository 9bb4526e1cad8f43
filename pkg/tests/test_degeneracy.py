import numpy as np
import pytest
from conftest import random_rotation
from hypothesis import given, settings
from hypothesis import strategies as hst

from degen_lio import lidar
from degen_lio import simulator as sim
from degen_lio.config import FilterConfig
from degen_lio.degeneracy import detect, pose_hessian
from degen_lio.lidar import CorrespondenceSet, LidarResidualRow
from degen_lio.local_map import PointMap
from degen_lio.manifold import Rotation
from degen_lio.pipeline import iekf_config
from degen_lio.iekf import correspondences
from degen_lio.state import NavState

seeds = hst.integers(0, 2**32 - 1)


def test_single_row_rank_one():
    row = np.zeros(30)
    row[5] = 1.0
    h = pose_hessian([LidarResidualRow(0.0, row)], 0.04)
    expected = np.zeros((6, 6))
    expected[5, 5] = 1 / 0.04
    np.testing.assert_allclose(h, expected)


def test_three_normals_full_rank():
    rows = np.zeros((3, 30))
    rows[:, 3:6] = np.eye(3)
    h = pose_hessian(rows, 1.0)
    assert np.linalg.matrix_rank(h[3:6, 3:6]) == 3


def test_empty_rows_give_zero():
    np.testing.assert_array_equal(pose_hessian(np.zeros((0, 30)), 1.0), np.zeros((6, 6)))


def test_matches_dense_product(rng):
    jac = rng.normal(size=(50, 30))
    var = rng.uniform(0.01, 0.1, 50)
    dense = jac.T @ np.diag(1 / var) @ jac
    np.testing.assert_allclose(pose_hessian(jac, var), dense[:6, :6], rtol=1e-12)


def test_detect_threshold_definition():
    h = np.diag([10.0, 20.0, 30.0, 1e-4, 50.0, 80.0])
    rep = detect(h, 1.0, 1.0)
    assert rep.degenerate
    np.testing.assert_allclose(np.abs(rep.weakest_translation), [1, 0, 0])
    np.testing.assert_allclose(rep.eig_trans, [1e-4, 50, 80])
    assert len(rep.constrained_directions()) == 5


def test_detect_well_conditioned():
    assert not detect(np.eye(6) * 1e6, 100.0, 100.0).degenerate


def test_eigenvalues_sorted_and_non_negative(rng):
    jac = rng.normal(size=(40, 30))
    rep = detect(pose_hessian(jac, 0.01), 1.0, 1.0)
    assert np.all(np.diff(rep.eig_rot) >= 0) and np.all(np.diff(rep.eig_trans) >= 0)
    assert rep.eig_rot[0] >= -1e-9 and rep.eig_trans[0] >= -1e-9


@settings(max_examples=50)
@given(seeds, hst.floats(1.0, 1e3))
def test_scale_monotone(seed, c):
    rng = np.random.default_rng(seed)
    jac = rng.normal(size=(int(rng.integers(1, 40)), 30))
    h = pose_hessian(jac, 1.0)
    thr_r, thr_t = rng.uniform(0.1, 50, 2)
    if not detect(h, thr_r, thr_t).degenerate:
        assert not detect(c * h, thr_r, thr_t).degenerate


@settings(max_examples=30)
@given(seeds)
def test_world_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    n = rng.normal(size=(30, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    c = CorrespondenceSet(rng.normal(size=(30, 3)) * 4, n, rng.normal(size=(30, 3)), np.zeros(30), np.full(30, 0.01))
    x = NavState(rot_GI=random_rotation(rng), pos_GI=rng.normal(size=3), rot_IL=random_rotation(rng, 0.3),
                 pos_IL=rng.normal(size=3) * 0.2)
    w = random_rotation(rng)
    c_w = CorrespondenceSet(c.points_L, n @ w.matrix.T, c.anchors @ w.matrix.T, c.rms, c.noise_var)
    x_w = x.replace(rot_GI=w * x.rot_GI, pos_GI=w.apply(x.pos_GI))
    r1 = detect(pose_hessian(lidar.rows(c, x)[1], 0.01), 1.0, 1.0)
    r2 = detect(pose_hessian(lidar.rows(c_w, x_w)[1], 0.01), 1.0, 1.0)
    np.testing.assert_allclose(r1.eig_rot, r2.eig_rot, rtol=1e-9, atol=1e-9)
    np.testing.assert_allclose(r1.eig_trans, r2.eig_trans, rtol=1e-9, atol=1e-9)


def _scenario_report(world, traj, t, sigma):
    """Degeneracy report of one simulated scan against a map built at the true poses."""
    rig = sim.SensorRig()
    f = FilterConfig()
    cfg = iekf_config(f)

    def truth(s):
        return NavState(rot_GI=Rotation.from_matrix(traj.rotation(s)), pos_GI=traj.position(s),
                        rot_IL=rig.rot_IL, pos_IL=rig.pos_IL)

    pmap = PointMap(f.map_resolution)
    for k, s in enumerate(np.arange(t - 1.0, t, 0.1)):
        scan = sim.raycast_scan(world, traj, s, rig, sigma, seed=k, distort=False)
        pmap.insert_scan(lidar.to_world(scan.points, truth(s)))
    scan = sim.raycast_scan(world, traj, t, rig, sigma, seed=99, distort=False)
    from degen_lio.local_map import voxel_downsample

    pts = voxel_downsample(scan.points, f.scan_voxel)
    c = correspondences(pts, pmap, truth(t), sigma**2, cfg)
    _, jac = lidar.rows(c, truth(t))
    return detect(pose_hessian(jac, c.noise_var), f.threshold_rot, f.threshold_trans)


@pytest.mark.parametrize("sigma", [0.03, 0.09])
def test_corridor_degenerate_along_axis(sigma):
    rep = _scenario_report(sim.build_corridor(), sim.TrajectorySpec(), 8.0, sigma)
    assert rep.degenerate
    assert rep.eig_trans[0] < rep.threshold_trans
    assert abs(rep.weakest_translation[0]) > 0.95
    # the remaining translation directions are well constrained
    assert rep.eig_trans[1] > rep.threshold_trans


@pytest.mark.parametrize("sigma", [0.03, 0.09])
def test_room_not_degenerate(sigma):
    traj = sim.TrajectorySpec(start=(-2.5, 0.0, 1.0), speed=0.25)
    rep = _scenario_report(sim.build_room(), traj, 8.0, sigma)
    assert not rep.degenerate


def test_corridor_with_end_caps_constrains_axis():
    world = sim.build_box(12.0, 4.0, 3.0, True)
    traj = sim.TrajectorySpec(start=(-3.0, 0.0, 1.0), speed=0.5)
    rep = _scenario_report(world, traj, 6.0, 0.03)
    assert not rep.degenerate
