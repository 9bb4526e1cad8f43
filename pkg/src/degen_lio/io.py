"""Synthetic dataset generation and the on-disk dataset layout.

Layout of a dataset directory::

    imu.csv            t,gx,gy,gz,ax,ay,az
    odom.csv           t,x,y,z,qw,qx,qy,qz
    scans/scan_<k>.csv # scan_end_time=<t>,sigma=<s>  then  offset_t,x,y,z
    ground_truth.tum   t x y z qx qy qz qw (IMU rate)
    init_state.csv     true state at t=0
    config.toml        the configuration that produced it
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import simulator as sim
from .config import RunConfig, dump_toml, load_run_config
from .evaluation import Trajectory, read_tum, write_tum
from .imu import NoiseParams
from .lidar import LidarScan
from .manifold import Rotation, matrix_to_quat
from .odometry import OdomStream
from .state import CSV_COLUMNS, NavState

IMU_HEADER = "t,gx,gy,gz,ax,ay,az"
ODOM_HEADER = "t,x,y,z,qw,qx,qy,qz"
SCAN_HEADER = "offset_t,x,y,z"
_FMT = "%.17g"
_SCAN_META = re.compile(r"#\s*scan_end_time=([^,\s]+)\s*,\s*sigma=([^,\s]+)\s*$")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    imu_t: np.ndarray
    gyro: np.ndarray
    acc: np.ndarray
    odom: OdomStream
    scans: list
    ground_truth: Trajectory
    init_state: NavState
    config: RunConfig

    def imu_noise(self) -> NoiseParams:
        c = self.config.imu_noise
        return NoiseParams(c.sigma_g, c.sigma_a, c.sigma_wg, c.sigma_wa)


# generation -------------------------------------------------------------------


def trajectory_spec(cfg: RunConfig) -> sim.TrajectorySpec:
    s = cfg.simulation
    return sim.TrajectorySpec(
        start=tuple(s.start), speed=s.speed, duration=s.duration, t_still=s.t_still, ramp=s.ramp,
        sway_pos=s.sway_pos, sway_att_deg=s.sway_att_deg,
    )


def world(cfg: RunConfig) -> sim.World:
    s = cfg.simulation
    if s.scenario == "room":
        return sim.build_room(s.length, s.width, s.height)
    return sim.build_box(s.length, s.width, s.height, s.end_caps)


def _rpy(deg) -> Rotation:
    r, p, y = np.deg2rad(np.asarray(deg, float))
    return Rotation.from_matrix(sim.euler_zyx_matrix(r, p, y))


def sensor_rig(cfg: RunConfig) -> sim.SensorRig:
    r = cfg.rig
    return sim.SensorRig(
        rot_IL=_rpy(r.lidar_rpy_deg), pos_IL=tuple(r.lidar_pos), rot_IO=_rpy(r.odom_rpy_deg),
        pos_IO=tuple(r.odom_pos), n_beams=r.n_beams, fov_deg=r.fov_deg, h_res_deg=r.h_res_deg,
        lidar_rate=r.lidar_rate, max_range=r.max_range, min_range=r.min_range, drop_prob=r.drop_prob,
        imu_rate=r.imu_rate, odom_rate=cfg.simulation.odom_rate,
    )


def generate_dataset(cfg: RunConfig) -> Dataset:
    """Everything a run needs, as a pure function of ``cfg``."""
    s = cfg.simulation
    traj = trajectory_spec(cfg)
    rig = sensor_rig(cfg)
    w = world(cfg)
    noise = NoiseParams(cfg.imu_noise.sigma_g, cfg.imu_noise.sigma_a, cfg.imu_noise.sigma_wg, cfg.imu_noise.sigma_wa)

    brng = np.random.default_rng([s.seed, sim.STREAM_BIAS, 1])
    bg0 = brng.normal(size=3) * s.bias_gyro_std
    ba0 = brng.normal(size=3) * s.bias_acc_std
    sim_noise = noise if s.imu_noise_on else NoiseParams(0.0, 0.0, 0.0, 0.0)
    t, gyro, acc, _, _ = sim.synth_imu_stream(traj, rig.imu_rate, sim_noise, s.seed, bg0, ba0)

    period = 1.0 / rig.lidar_rate
    n_scans = int(np.floor(s.duration / period + 1e-9))
    scans = [
        sim.raycast_scan(w, traj, k * period, rig, s.lidar_sigma, s.seed, s.distort, index=k)
        for k in range(1, n_scans + 1)
    ]
    odom = sim.synth_odometry(traj, rig, s.odom_rate, s.odom_noise_rot, s.odom_noise_pos, s.odom_drift, s.seed)

    gt = Trajectory(t, traj.position(t), np.array([matrix_to_quat(r) for r in traj.rotation(t)]))
    x0 = NavState(
        rot_GI=Rotation(gt.quat[0]), pos_GI=gt.pos[0], vel_GI=traj.velocity(0.0), bias_gyro=bg0,
        bias_acc=ba0, gravity=sim.GRAVITY, rot_IL=rig.rot_IL, pos_IL=rig.pos_IL, rot_IO=rig.rot_IO,
        pos_IO=rig.pos_IO,
    )
    return Dataset(t, gyro, acc, odom, scans, gt, x0, cfg)


# writing --------------------------------------------------------------------


def _savetxt(path, header: str, data, comment: str | None = None) -> None:
    with open(path, "w") as fh:
        if comment is not None:
            fh.write(comment + "\n")
        fh.write(header + "\n")
        np.savetxt(fh, np.asarray(data, float).reshape(-1, header.count(",") + 1), fmt=_FMT, delimiter=",")


def write_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    _savetxt(out / "imu.csv", IMU_HEADER, np.column_stack([ds.imu_t, ds.gyro, ds.acc]))
    _savetxt(out / "odom.csv", ODOM_HEADER, np.column_stack([ds.odom.t, ds.odom.pos, ds.odom.quat]))
    for k, scan in enumerate(ds.scans):
        _savetxt(
            out / "scans" / f"scan_{k:05d}.csv", SCAN_HEADER, np.column_stack([scan.offsets, scan.points]),
            comment=f"# scan_end_time={scan.t!r},sigma={scan.sigma!r}",
        )
    write_tum(ds.ground_truth, out / "ground_truth.tum")
    _savetxt(out / "init_state.csv", ",".join(CSV_COLUMNS), [ds.init_state.to_row()])
    dump_toml(ds.config, out / "config.toml")
    return out


# reading --------------------------------------------------------------------


def _parse_rows(path: Path, lines: list[str], first_line: int, ncols: int) -> np.ndarray:
    rows = []
    for i, line in enumerate(lines):
        lineno = first_line + i
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != ncols:
            raise DatasetError(f"{path}:{lineno}: expected {ncols} fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise DatasetError(f"{path}:{lineno}: non-numeric field in {line.strip()!r}") from None
        if not all(np.isfinite(vals)):
            raise DatasetError(f"{path}:{lineno}: non-finite value")
        rows.append(vals)
    return np.array(rows, dtype=float).reshape(-1, ncols)


def read_csv(path, header: str, comment_lines: int = 0) -> tuple[list[str], np.ndarray]:
    """Strictly read a numeric CSV with a fixed header; returns (comments, data)."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"{path}: missing file")
    lines = path.read_text().splitlines()
    comments = lines[:comment_lines]
    if len(lines) <= comment_lines or lines[comment_lines].strip() != header:
        raise DatasetError(f"{path}:{comment_lines + 1}: expected header {header!r}")
    ncols = header.count(",") + 1
    body = lines[comment_lines + 1:]
    try:
        data = np.loadtxt(body, delimiter=",", ndmin=2).reshape(-1, ncols)
        if data.shape[1] == ncols and np.all(np.isfinite(data)):
            return comments, data
    except ValueError:
        pass
    # slow path only to report where the file is broken
    return comments, _parse_rows(path, body, comment_lines + 2, ncols)


def _check_increasing(path, t) -> None:
    bad = np.nonzero(np.diff(t) <= 0)[0]
    if bad.size:
        i = int(bad[0]) + 1
        raise DatasetError(f"{path}:{i + 2}: timestamp regression (t={t[i]!r} after {t[i - 1]!r})")


def _read_scan(path: Path) -> LidarScan:
    comments, data = read_csv(path, SCAN_HEADER, comment_lines=1)
    m = _SCAN_META.match(comments[0].strip())
    if m is None:
        raise DatasetError(f"{path}:1: expected '# scan_end_time=<t>,sigma=<s>'")
    try:
        t_end, sigma = float(m.group(1)), float(m.group(2))
    except ValueError:
        raise DatasetError(f"{path}:1: malformed scan metadata") from None
    try:
        return LidarScan(t_end, data[:, 0], data[:, 1:], sigma)
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from None


def read_dataset(path) -> Dataset:
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a dataset directory")
    cfg_path = root / "config.toml"
    if not cfg_path.is_file():
        raise DatasetError(f"{cfg_path}: missing file")
    cfg = load_run_config(cfg_path)

    _, imu = read_csv(root / "imu.csv", IMU_HEADER)
    _check_increasing(root / "imu.csv", imu[:, 0])
    _, od = read_csv(root / "odom.csv", ODOM_HEADER)
    _check_increasing(root / "odom.csv", od[:, 0])

    scan_files = sorted((root / "scans").glob("scan_*.csv"))
    scans = [_read_scan(p) for p in scan_files]
    for prev, cur, p in zip(scans, scans[1:], scan_files[1:]):
        if cur.t <= prev.t:
            raise DatasetError(f"{p}:1: scan end time {cur.t!r} does not follow {prev.t!r}")

    gt_path = root / "ground_truth.tum"
    if not gt_path.is_file():
        raise DatasetError(f"{gt_path}: missing file")
    try:
        gt = read_tum(gt_path)
    except ValueError as exc:
        raise DatasetError(str(exc)) from None

    _, init = read_csv(root / "init_state.csv", ",".join(CSV_COLUMNS))
    if len(init) != 1:
        raise DatasetError(f"{root / 'init_state.csv'}: expected exactly one data row")
    odom = OdomStream(od[:, 0], od[:, 4:8], od[:, 1:4])
    return Dataset(imu[:, 0], imu[:, 1:4], imu[:, 4:7], odom, scans, gt, NavState.from_row(init[0]), cfg)
