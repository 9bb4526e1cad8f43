import numpy as np
import pytest

from degen_lio.manifold import Rotation, exp_so3
from degen_lio.state import DIM, NavState, boxminus, boxplus


def random_rotation(rng, scale=np.pi) -> Rotation:
    v = rng.normal(size=3)
    return exp_so3(v / np.linalg.norm(v) * rng.uniform(0, scale))


def random_state(rng) -> NavState:
    return NavState(
        rot_GI=random_rotation(rng),
        pos_GI=rng.normal(size=3) * 5,
        vel_GI=rng.normal(size=3),
        bias_gyro=rng.normal(size=3) * 0.01,
        bias_acc=rng.normal(size=3) * 0.1,
        gravity=np.array([0.0, 0.0, -9.81]) + rng.normal(size=3) * 0.05,
        rot_IL=random_rotation(rng, 0.5),
        pos_IL=rng.normal(size=3) * 0.3,
        rot_IO=random_rotation(rng, 0.5),
        pos_IO=rng.normal(size=3) * 0.3,
    )


def numeric_jacobian(f, x: NavState, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``f(boxplus(x, d))`` at ``d = 0``."""
    cols = []
    for i in range(DIM):
        d = np.zeros(DIM)
        d[i] = eps
        cols.append((np.atleast_1d(f(boxplus(x, d))) - np.atleast_1d(f(boxplus(x, -d)))) / (2 * eps))
    return np.stack(cols, axis=-1)


def states_close(a: NavState, b: NavState, tol=1e-9) -> bool:
    return bool(np.max(np.abs(boxminus(a, b))) < tol)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def truth_state(traj, rig, t) -> NavState:
    from degen_lio.simulator import GRAVITY

    return NavState(
        rot_GI=Rotation.from_matrix(traj.rotation(t)), pos_GI=traj.position(t), vel_GI=traj.velocity(t),
        gravity=GRAVITY, rot_IL=rig.rot_IL, pos_IL=rig.pos_IL, rot_IO=rig.rot_IO, pos_IO=rig.pos_IO,
    )


def truth_map(world, traj, rig, times, sigma, resolution=0.25):
    """Map assembled from undistorted scans placed at their true poses."""
    from degen_lio import lidar
    from degen_lio.local_map import PointMap
    from degen_lio.simulator import raycast_scan

    pmap = PointMap(resolution)
    for k, t in enumerate(times):
        scan = raycast_scan(world, traj, t, rig, sigma, seed=1000 + k, distort=False)
        pmap.insert_scan(lidar.to_world(scan.points, truth_state(traj, rig, t)))
    return pmap


# one line per acceptance criterion, echoed at the end of the session
acceptance_log: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_log:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log:
            terminalreporter.write_line(line)
