import numpy as np
import pytest
from conftest import numeric_jacobian, random_rotation, random_state

from degen_lio import lidar
from degen_lio import simulator as sim
from degen_lio import state as st
from degen_lio.imu import NoiseParams
from degen_lio.lidar import (
    CorrespondenceSet,
    ImuCoverageError,
    LidarScan,
    PlaneCorrespondence,
    find_correspondences,
    residual_and_jacobian,
    undistort,
)
from degen_lio.local_map import PlaneFit, PointMap
from degen_lio.manifold import Rotation
from degen_lio.state import NavState, boxplus

G = 9.81


def still_imu(t0=0.0, t1=1.0, rate=200.0):
    t = np.arange(t0, t1 + 1e-9, 1 / rate)
    return t, np.zeros((len(t), 3)), np.tile([0, 0, G], (len(t), 1))


def random_correspondence(rng) -> PlaneCorrespondence:
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    return PlaneCorrespondence(rng.normal(size=3) * 5, PlaneFit(n, rng.normal(size=3), True, 0.0), 0.01)


def floor_map(res=0.2):
    g = np.arange(-6, 6, res)
    xx, yy = np.meshgrid(g, g)
    m = PointMap(res / 2)
    m.insert_scan(np.column_stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)]))
    return m


def test_undistort_stationary_is_identity(rng):
    t, gyro, acc = still_imu()
    pts = rng.normal(size=(100, 3)) * 5
    scan = LidarScan(0.5, -rng.uniform(0, 0.1, 100), pts)
    out = undistort(scan, t, gyro, acc, NavState(gravity=[0, 0, -G]))
    np.testing.assert_allclose(out.points, pts, atol=1e-9)
    np.testing.assert_array_equal(out.offsets, 0)


def test_undistort_constant_velocity():
    t, gyro, acc = still_imu()
    x_end = NavState(vel_GI=[1.0, 0, 0], gravity=[0, 0, -G])
    p = np.array([[2.0, 1.0, 0.5]])
    out = undistort(LidarScan(0.5, [-0.05], p), t, gyro, acc, x_end)
    np.testing.assert_allclose(out.points, p - [0.05, 0, 0], atol=1e-12)


def test_undistort_simulated_scan_matches_ground_truth():
    traj = sim.TrajectorySpec(t_still=0.0, ramp=0.5)
    rig = sim.SensorRig()
    world = sim.build_corridor()
    sigma = 0.03
    t_end = 3.0
    scan = sim.raycast_scan(world, traj, t_end, rig, sigma, seed=1, distort=True)
    t, gyro, acc, _, _ = sim.synth_imu_stream(traj, 200.0, NoiseParams(0, 0, 0, 0), 0, np.zeros(3), np.zeros(3))
    r_end = Rotation.from_matrix(traj.rotation(t_end))
    x_end = NavState(
        rot_GI=r_end, pos_GI=traj.position(t_end), vel_GI=traj.velocity(t_end), gravity=sim.GRAVITY,
        rot_IL=rig.rot_IL, pos_IL=rig.pos_IL,
    )
    out = undistort(scan, t, gyro, acc, x_end)

    # oracle: each point through the true pose at its own firing time
    r_gl, p_gl = sim._sensor_poses(traj, t_end + scan.offsets, rig.rot_IL, rig.pos_IL)
    pw = np.einsum("nij,nj->ni", r_gl, scan.points) + p_gl
    r_end_l, p_end_l = sim._sensor_poses(traj, t_end, rig.rot_IL, rig.pos_IL)
    oracle = (pw - p_end_l) @ r_end_l
    err = np.linalg.norm(out.points - oracle, axis=1)
    assert err.max() < 2 * sigma
    assert err.max() < 1e-3
    # and undistortion actually moved the points
    assert np.linalg.norm(scan.points - oracle, axis=1).max() > 0.05


def test_undistort_requires_imu_coverage():
    t, gyro, acc = still_imu(0.45, 1.0)
    scan = LidarScan(0.5, [-0.09, 0.0], np.ones((2, 3)))
    with pytest.raises(ImuCoverageError):
        undistort(scan, t, gyro, acc, NavState())


def test_scan_validation():
    with pytest.raises(ValueError):
        LidarScan(1.0, [0.1], [[1, 2, 3]])
    with pytest.raises(ValueError):
        LidarScan(1.0, [0.0], [[np.inf, 2, 3]])
    with pytest.raises(ValueError):
        LidarScan(1.0, [0.0, 0.0], [[1, 2, 3]])


def test_correspondences_empty_map():
    c = find_correspondences(np.ones((5, 3)), PointMap(), NavState(), 0.01)
    assert len(c) == 0


def test_correspondences_perfect_state():
    m = floor_map()
    x = NavState(pos_GI=[0.3, -0.2, 1.5])
    rng = np.random.default_rng(0)
    pts_w = np.column_stack([rng.uniform(-4, 4, (200, 2)), np.zeros(200)])
    pts_l = pts_w - x.pos_GI
    c = find_correspondences(pts_l, m, x, 1e-4)
    assert len(c) == 200
    assert np.max(np.abs(lidar.predict(c, x))) < 1e-9


def test_correspondences_perturbed_state_match_direct_formula():
    m = floor_map()
    x_true = NavState(pos_GI=[0.3, -0.2, 1.5])
    rng = np.random.default_rng(1)
    pts_w = np.column_stack([rng.uniform(-4, 4, (100, 2)), np.zeros(100)])
    pts_l = pts_w - x_true.pos_GI
    direction = np.array([0.2, -0.3, 1.0])
    direction /= np.linalg.norm(direction)
    x = x_true.replace(pos_GI=x_true.pos_GI + 0.1 * direction)
    c = find_correspondences(pts_l, m, x, 1e-4)
    assert len(c) == 100
    h = lidar.predict(c, x)
    # same sign for every point because all normals come from one plane fit orientation
    np.testing.assert_allclose(np.abs(h), abs(0.1 * direction[2]), atol=1e-9)
    for corr, hi in zip(c, h):
        u, q = corr.plane.normal, corr.plane.anchor
        direct = u @ (x.rot_GI.matrix @ (x.rot_IL.matrix @ corr.point_L + x.pos_IL) + x.pos_GI - q)
        assert hi == pytest.approx(direct, abs=1e-12)
        assert residual_and_jacobian(corr, x).residual == pytest.approx(-direct, abs=1e-12)


def test_corr_gate_rejects_far_points():
    m = floor_map()
    x = NavState()
    c = find_correspondences(np.array([[0.0, 0.0, 2.0], [0.0, 0.0, 0.2]]), m, x, 1e-4, corr_gate=1.0)
    assert len(c) == 1


def test_residual_on_plane_and_displaced():
    x = NavState(pos_GI=[1.0, 2.0, 3.0])
    plane = PlaneFit(np.array([0, 0, 1.0]), np.zeros(3), True, 0.0)
    on = PlaneCorrespondence(np.array([0.5, 0.5, -3.0]), plane, 0.01)
    assert residual_and_jacobian(on, x).residual == pytest.approx(0.0, abs=1e-15)
    d = 0.37
    off = PlaneCorrespondence(np.array([0.5, 0.5, -3.0 + d]), plane, 0.01)
    assert residual_and_jacobian(off, x).residual == pytest.approx(-d, abs=1e-15)


def test_jacobian_finite_difference_20_configs():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(20):
        x = random_state(rng)
        c = random_correspondence(rng)
        row = residual_and_jacobian(c, x)
        cs = CorrespondenceSet.from_list([c])
        num = numeric_jacobian(lambda y: lidar.predict(cs, y), x)[0]
        worst = max(worst, np.max(np.abs(row.jacobian - num)))
    assert worst < 1e-6


def test_jacobian_sparsity():
    rng = np.random.default_rng(12)
    x = random_state(rng)
    _, jac = lidar.rows(CorrespondenceSet.from_list([random_correspondence(rng) for _ in range(10)]), x)
    zero_cols = np.r_[st.VEL, st.BG, st.BA, st.GRAV, st.ODOM_EXTRINSIC]
    np.testing.assert_array_equal(jac[:, zero_cols], 0)
    for sl in (st.ROT, st.POS, st.ROT_IL, st.POS_IL):
        assert np.all(np.abs(jac[:, sl]).sum(axis=1) > 0)


def test_jacobian_both_rotation_blocks_jointly():
    """A combined step in both attitudes is predicted by the summed blocks."""
    rng = np.random.default_rng(13)
    for _ in range(10):
        x = random_state(rng)
        cs = CorrespondenceSet.from_list([random_correspondence(rng)])
        h0, jac = lidar.rows(cs, x)
        d = np.zeros(st.DIM)
        d[st.ROT] = rng.normal(size=3) * 1e-6
        d[st.ROT_IL] = rng.normal(size=3) * 1e-6
        h1 = lidar.predict(cs, boxplus(x, d))
        assert abs(h1[0] - h0[0] - jac[0] @ d) < 1e-10


def _true_state(traj, rig, t):
    return NavState(rot_GI=Rotation.from_matrix(traj.rotation(t)), pos_GI=traj.position(t), rot_IL=rig.rot_IL,
                    pos_IL=rig.pos_IL)


@pytest.mark.parametrize("sigma", [0.0, 0.03, 0.09])
@pytest.mark.parametrize("scenario", ["room", "corridor"])
def test_true_state_residuals_within_noise(scenario, sigma):
    """|r| <= 3 sigma + plane rms at the true state.

    Neighborhoods that straddle two walls at a corner give a valid but
    tilted fit, so the bound holds for nearly all correspondences rather
    than every one.
    """
    if scenario == "room":
        traj, world = sim.TrajectorySpec(start=(-2.5, 0, 1), speed=0.25, t_still=0.0, ramp=0.5), sim.build_room()
    else:
        traj, world = sim.TrajectorySpec(t_still=0.0, ramp=0.5), sim.build_corridor()
    rig = sim.SensorRig()
    pmap = PointMap(0.25)
    for k, t in enumerate((1.0, 1.5, 2.0, 2.5)):
        s = sim.raycast_scan(world, traj, t, rig, sigma, seed=k, distort=False)
        pmap.insert_scan(lidar.to_world(s.points, _true_state(traj, rig, t)))
    scan = sim.raycast_scan(world, traj, 3.0, rig, sigma, seed=9, distort=False)
    x = _true_state(traj, rig, 3.0)
    c = find_correspondences(scan.points, pmap, x, max(sigma, 0.01) ** 2, k=10, plane_tol=max(0.1, 3 * sigma))
    assert len(c) > 0.9 * len(scan)
    h = lidar.predict(c, x)
    inside = np.abs(h) <= 3 * sigma + c.rms + 1e-9
    assert inside.mean() >= 0.97
    if sigma == 0.0:
        # away from corners and unmapped patches the match is exact
        assert np.mean(np.abs(h) < 1e-9) > 0.8


def test_random_rotation_helper_is_unit(rng):
    assert abs(np.linalg.norm(random_rotation(rng).q) - 1) < 1e-15
