import logging

import numpy as np
import pytest
from conftest import random_state, truth_map, truth_state

from degen_lio import lidar, odometry
from degen_lio import simulator as sim
from degen_lio import state as st
from degen_lio.config import FilterConfig
from degen_lio.degeneracy import detect, pose_hessian
from degen_lio.iekf import IekfConfig, build_stack, iterated_update
from degen_lio.local_map import PointMap, voxel_downsample
from degen_lio.odometry import OdomPose, relative_measurement
from degen_lio.pipeline import iekf_config, initial_covariance, odom_noise
from degen_lio.state import NavState, boxplus

ROOM = sim.TrajectorySpec(start=(-2.5, 0.0, 1.0), speed=0.25)
CORRIDOR = sim.TrajectorySpec()
RIG = sim.SensorRig()
SIGMA = 0.03


def prior_cov(pos_var=0.01):
    p = initial_covariance(FilterConfig())
    p[st.POS, st.POS] = np.eye(3) * pos_var
    return p


def scan_points(world, traj, t, sigma=SIGMA):
    scan = sim.raycast_scan(world, traj, t, RIG, sigma, seed=7, distort=False)
    return voxel_downsample(scan.points, FilterConfig().scan_voxel)


def three_plane_scene():
    """Floor and two walls sampled on a grid, queried far from every edge."""
    g = np.arange(0.0, 10.0, 0.1)
    a, b = (m.ravel() for m in np.meshgrid(g, g))
    z = np.zeros_like(a)
    pmap = PointMap(0.05)
    pmap.insert_scan(np.vstack([np.column_stack([a, b, z]), np.column_stack([z, a, b]), np.column_stack([a, z, b])]))
    rng = np.random.default_rng(0)
    u = rng.uniform(2.0, 8.0, (60, 2))
    pts = np.vstack([np.column_stack([u, np.zeros(60)]), np.column_stack([np.zeros(60), u]),
                     np.column_stack([u[:, 0], np.zeros(60), u[:, 1]])])
    x = NavState(pos_GI=[4.0, 3.0, 1.5], gravity=sim.GRAVITY)
    return pmap, pts - x.pos_GI, x


def test_fixed_point_converges_in_one_iteration():
    pmap, pts, x = three_plane_scene()
    upd = iterated_update(x, prior_cov(), pts, pmap, 1e-4, None, IekfConfig(threshold_rot=1.0, threshold_trans=1.0))
    assert upd.iterations == 1 and upd.converged
    assert not upd.report.degenerate
    assert np.max(np.abs(st.boxminus(upd.state, x))) < 1e-9


def test_room_perturbation_corrected():
    """Noisy scan against an exact map: the error left is the scan's own."""
    world = sim.build_room()
    t = 8.0
    pmap = truth_map(world, ROOM, RIG, np.arange(t - 1.0, t, 0.1), 0.0)
    x_true = truth_state(ROOM, RIG, t)
    rng = np.random.default_rng(3)
    for _ in range(3):
        d = rng.normal(size=3)
        x_pred = x_true.replace(pos_GI=x_true.pos_GI + 0.05 * d / np.linalg.norm(d))
        upd = iterated_update(x_pred, prior_cov(), scan_points(world, ROOM, t), pmap, SIGMA**2, None,
                              iekf_config(FilterConfig()))
        assert not upd.report.degenerate and not upd.used_odometry
        assert np.linalg.norm(upd.state.pos_GI - x_true.pos_GI) < 0.005


@pytest.fixture(scope="module")
def corridor_case():
    world = sim.build_corridor()
    t, dt = 8.0, 0.1
    pmap = truth_map(world, CORRIDOR, RIG, np.arange(t - 1.0, t, 0.1), SIGMA)
    x_true = truth_state(CORRIDOR, RIG, t)
    x_prev = truth_state(CORRIDOR, RIG, t - dt)
    x_pred = x_true.replace(pos_GI=x_true.pos_GI + [0.1, 0.0, 0.0])
    noise = odom_noise(FilterConfig())
    stream = sim.synth_odometry(CORRIDOR, RIG, 100.0, noise.sigma_rot, noise.sigma_pos_per_m, 0.0, seed=5)
    meas = relative_measurement(odometry.interpolate_pose(stream, t - dt), odometry.interpolate_pose(stream, t),
                                noise)
    return world, t, pmap, x_true, x_prev, x_pred, meas


def test_corridor_lidar_only_cannot_fix_axis(corridor_case):
    world, t, pmap, x_true, _, x_pred, _ = corridor_case
    cfg = iekf_config(FilterConfig(fusion_mode="lidar_only"))
    upd = iterated_update(x_pred, prior_cov(), scan_points(world, CORRIDOR, t), pmap, SIGMA**2, None, cfg)
    assert upd.report.degenerate
    assert abs(upd.state.pos_GI[0] - x_true.pos_GI[0]) > 0.09
    # the cross-axis components stay pinned by the walls
    assert np.linalg.norm(upd.state.pos_GI[1:] - x_true.pos_GI[1:]) < 0.01


def test_corridor_with_odometry_bounds_axis(corridor_case):
    world, t, pmap, x_true, x_prev, x_pred, meas = corridor_case
    cfg = iekf_config(FilterConfig())
    upd = iterated_update(x_pred, prior_cov(), scan_points(world, CORRIDOR, t), pmap, SIGMA**2,
                          (meas, x_prev), cfg)
    assert upd.report.degenerate and upd.used_odometry
    assert abs(upd.state.pos_GI[0] - x_true.pos_GI[0]) < 5 * np.sqrt(meas.R_p[0, 0])


def test_degenerate_without_odometry_falls_back(corridor_case, caplog):
    world, t, pmap, _, _, x_pred, _ = corridor_case
    with caplog.at_level(logging.INFO, logger="degen_lio.iekf"):
        upd = iterated_update(x_pred, prior_cov(), scan_points(world, CORRIDOR, t), pmap, SIGMA**2, None,
                              iekf_config(FilterConfig()))
    assert upd.odom_fallback and not upd.used_odometry and not upd.skipped
    assert "without odometry" in caplog.text


def test_cost_monotone_and_posterior_shrinks(corridor_case):
    world, t, pmap, _, x_prev, x_pred, meas = corridor_case
    p = prior_cov()
    for mode in ("lidar_only", "always_fused"):
        upd = iterated_update(x_pred, p, scan_points(world, CORRIDOR, t), pmap, SIGMA**2, (meas, x_prev),
                              iekf_config(FilterConfig(fusion_mode=mode)))
        initial = upd.cost_trace[0][0]
        for before, after in upd.cost_trace:
            assert after <= before + 1e-12 * initial
        assert st.is_valid_cov(upd.cov)
        if mode == "lidar_only":
            for u in upd.report.constrained_directions():
                assert u @ upd.cov[:6, :6] @ u <= u @ p[:6, :6] @ u + 1e-12


def test_no_correspondences_skips_update():
    x = NavState(gravity=sim.GRAVITY)
    p = prior_cov()
    pmap = PointMap()
    pmap.insert_scan([[100.0, 100.0, 100.0]])
    upd = iterated_update(x, p, np.ones((10, 3)), pmap, 1e-4)
    assert upd.skipped and not upd.converged
    assert upd.state is x
    np.testing.assert_array_equal(upd.cov, p)


def _report(degenerate):
    h = np.eye(6) * (1e-3 if degenerate else 1e6)
    return detect(h, 1.0, 1.0)


def _odom(rng):
    meas = relative_measurement(OdomPose(0.0, random_state(rng).rot_GI, np.zeros(3)),
                                OdomPose(0.1, random_state(rng).rot_GI, np.ones(3)))
    return odometry.residual_and_jacobian(meas, random_state(rng), random_state(rng)), meas


def test_build_stack_gating(rng):
    h, jac = rng.normal(size=20), rng.normal(size=(20, st.DIM))
    odom = _odom(rng)
    well = build_stack(h, jac, 0.01, odom, _report(False))
    assert not well.used_odometry and len(well) == 20
    deg = build_stack(h, jac, 0.01, odom, _report(True))
    assert deg.used_odometry and len(deg) == 26 and deg.H.shape == (26, st.DIM)
    assert not build_stack(h, jac, 0.01, None, _report(True)).used_odometry
    assert not build_stack(h, jac, 0.01, odom, _report(True), "lidar_only").used_odometry
    assert build_stack(h, jac, 0.01, odom, _report(False), "always_fused").used_odometry


def test_stacked_information_is_sum_of_parts(rng):
    h, jac = rng.normal(size=20), rng.normal(size=(20, st.DIM))
    var = rng.uniform(0.001, 0.01, 20)
    res, meas = _odom(rng)
    stack = build_stack(h, jac, var, (res, meas), _report(True))
    h_o = np.vstack([res.H_Or, res.H_Op])
    r_o = np.zeros((6, 6))
    r_o[:3, :3], r_o[3:, 3:] = meas.R_r, meas.R_p
    expected = jac.T @ np.diag(1 / var) @ jac + h_o.T @ np.linalg.inv(r_o) @ h_o
    np.testing.assert_allclose(stack.information(), expected, rtol=1e-10)
    dense = stack.H.T @ np.linalg.inv(stack.R()) @ stack.H
    np.testing.assert_allclose(stack.information(), dense, rtol=1e-8)


def test_gating_never_fuses_when_well_conditioned():
    world = sim.build_room()
    t = 8.0
    pmap = truth_map(world, ROOM, RIG, np.arange(t - 1.0, t, 0.1), SIGMA)
    x_true = truth_state(ROOM, RIG, t)
    x_prev = truth_state(ROOM, RIG, t - 0.1)
    meas = relative_measurement(OdomPose(0.0, x_prev.rot_GI, x_prev.pos_GI), OdomPose(0.1, x_true.rot_GI,
                                x_true.pos_GI))
    upd = iterated_update(x_true, prior_cov(), scan_points(world, ROOM, t), pmap, SIGMA**2, (meas, x_prev),
                          iekf_config(FilterConfig()))
    assert not upd.report.degenerate and not upd.used_odometry


def test_lidar_hessian_uses_first_linearization(corridor_case):
    world, t, pmap, _, _, x_pred, _ = corridor_case
    pts = scan_points(world, CORRIDOR, t)
    cfg = iekf_config(FilterConfig())
    upd = iterated_update(x_pred, prior_cov(), pts, pmap, SIGMA**2, None, cfg)
    from degen_lio.iekf import correspondences

    c = correspondences(pts, pmap, x_pred, SIGMA**2, cfg)
    ref = detect(pose_hessian(lidar.rows(c, x_pred)[1], c.noise_var), cfg.threshold_rot, cfg.threshold_trans)
    np.testing.assert_allclose(upd.report.eig_trans, ref.eig_trans)


def test_unfrozen_extrinsics_update_all_blocks(rng):
    pmap, pts, x = three_plane_scene()
    p = np.eye(st.DIM) * 1e-4
    x_pred = boxplus(x, np.r_[np.zeros(3), [0.02, -0.01, 0.01], np.zeros(24)])
    upd = iterated_update(x_pred, p, pts, pmap, 1e-4, None, IekfConfig(freeze_extrinsics=False))
    assert st.is_valid_cov(upd.cov)
    assert not np.allclose(upd.cov[st.EXTRINSICS][:, st.EXTRINSICS], p[st.EXTRINSICS][:, st.EXTRINSICS])
