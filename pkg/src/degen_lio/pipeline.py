"""Filter orchestration, Monte Carlo campaign and CRLB certification runs."""

from __future__ import annotations

import csv
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import crlb, lidar, odometry
from . import state as st
from .config import CampaignSpec, FilterConfig, RunConfig, campaign_to_dict, dump_toml
from .evaluation import AteStats, Trajectory, aggregate, evaluate, write_tum
from .iekf import IekfConfig, correspondences, iterated_update
from .imu import integrate
from .io import Dataset, generate_dataset
from .local_map import PointMap, voxel_downsample
from .manifold import Rotation, skew
from .state import NavState

log = logging.getLogger(__name__)

DIAG_COLUMNS = (
    "t,iterations,converged,n_raw,n_points,skipped,degenerate,used_odometry,odom_fallback,"
    "eig_rot_min,eig_trans_min,weak_tx,weak_ty,weak_tz,cost_initial,cost_final,cost_monotone,"
    "cov_asym,cov_eigmin_ratio,cov_valid"
).split(",")
RUN_COLUMNS = (
    "sigma,run,seed,mode,status,ate_max,ate_mean,ate_rmse,n_scans,n_degenerate,n_odometry,"
    "invariant_violations,median_scan_ms,error"
).split(",")
SUMMARY_COLUMNS = "sigma,mode,n,mean,median,q1,q3,whisker_lo,whisker_hi,min,max".split(",")


# initialization ---------------------------------------------------------------


def initial_covariance(f: FilterConfig) -> np.ndarray:
    d = np.zeros(st.DIM)
    d[st.ROT] = f.p0_rot
    d[st.POS] = f.p0_pos
    d[st.VEL] = f.p0_vel
    d[st.BG] = f.p0_bias_g
    d[st.BA] = f.p0_bias_a
    d[st.GRAV] = f.p0_grav
    # frozen extrinsics carry no uncertainty at all
    d[st.EXTRINSICS] = 0.0 if f.freeze_extrinsics else f.p0_ext
    return np.diag(d)


def _align_to_z(a: np.ndarray) -> np.ndarray:
    """Rotation taking direction ``a`` onto +z with no yaw about z."""
    u = a / np.linalg.norm(a)
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(u, z)
    s, c = np.linalg.norm(axis), float(u @ z)
    if s < 1e-12:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    k = skew(axis / s)
    return np.eye(3) + s * k + (1 - c) * k @ k


def stationary_init(ds: Dataset, window: float) -> NavState:
    """Gyro bias and tilt from the mean of the first ``window`` seconds.

    Yaw and position are zero; gravity takes the measured specific-force
    magnitude. Extrinsics come from the configured rig calibration.
    """
    sel = ds.imu_t < ds.imu_t[0] + window
    if sel.sum() < 2:
        raise ValueError(f"fewer than 2 IMU samples in the first {window} s")
    a = ds.acc[sel].mean(axis=0)
    r = _align_to_z(a)
    x = ds.init_state
    return NavState(
        rot_GI=Rotation.from_matrix(r), bias_gyro=ds.gyro[sel].mean(axis=0),
        gravity=np.array([0.0, 0.0, -np.linalg.norm(a)]),
        rot_IL=x.rot_IL, pos_IL=x.pos_IL, rot_IO=x.rot_IO, pos_IO=x.pos_IO,
    )


def iekf_config(f: FilterConfig) -> IekfConfig:
    return IekfConfig(
        max_iter=f.max_iter, step_tol=f.step_tol, joseph=f.joseph, fusion_mode=f.fusion_mode,
        freeze_extrinsics=f.freeze_extrinsics, threshold_rot=f.threshold_rot,
        threshold_trans=f.threshold_trans, knn=f.knn, plane_tol=f.plane_tol,
        plane_tol_sigmas=f.plane_tol_sigmas, corr_gate=f.corr_gate,
        max_neighbor_dist=f.max_neighbor_dist,
    )


def odom_noise(f: FilterConfig) -> odometry.OdomNoise:
    return odometry.OdomNoise(np.deg2rad(f.odom_sigma_rot_deg), f.odom_sigma_pos_per_m, f.odom_sigma_pos_floor)


# single run -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScanContext:
    """What an update saw; handed to the ``on_update`` hook before map insertion."""

    index: int
    x_post: NavState
    x_prev: NavState | None
    points_L: np.ndarray
    pmap: PointMap
    lidar_var: float
    odom_meas: odometry.RelPoseMeasurement | None


@dataclass(eq=False)
class RunResult:
    trajectory: Trajectory
    diagnostics: list = field(default_factory=list)  # dicts keyed by DIAG_COLUMNS
    scan_ms: list = field(default_factory=list)
    final_cov: np.ndarray | None = None

    def invariant_violations(self) -> int:
        bad = 0
        for d in self.diagnostics:
            bad += int(d["used_odometry"] and not d["degenerate"])
            bad += int(not d["cov_valid"])
            bad += int(not d["cost_monotone"])
        return bad


def _odom_measurement(ds: Dataset, t0: float, t1: float, f: FilterConfig):
    try:
        a = odometry.interpolate_pose(ds.odom, t0, f.odom_extrap_tol)
        b = odometry.interpolate_pose(ds.odom, t1, f.odom_extrap_tol)
    except odometry.OdomRangeError as exc:
        log.debug("no odometry for [%.3f, %.3f]: %s", t0, t1, exc)
        return None
    return odometry.relative_measurement(a, b, odom_noise(f))


def run_filter(ds: Dataset, cfg: RunConfig | None = None, on_update=None) -> RunResult:
    """Process every scan of ``ds`` in time order and return the pose track.

    Poses are reported at t0 and at every scan end. The first scan only
    seeds the map.
    """
    cfg = cfg or ds.config
    f = cfg.filter
    icfg = iekf_config(f)
    q = ds.imu_noise()

    x = ds.init_state if f.init_mode == "truth" else stationary_init(ds, f.init_window)
    p = initial_covariance(f)
    t = float(ds.imu_t[0])
    pmap = PointMap(f.map_resolution, f.rebuild_threshold)

    times, quats, poss = [t], [x.rot_GI.q], [x.pos_GI.copy()]
    result = RunResult(Trajectory(np.array([t]), np.array(poss), np.array(quats)))
    x_prev = None
    t_prev = None

    for k, scan in enumerate(ds.scans):
        if scan.t <= t:
            raise ValueError(f"scan {k} ends at {scan.t} which is not after {t}")
        tic = time.perf_counter()
        x, p, _ = integrate(x, p, t, scan.t, ds.imu_t, ds.gyro, ds.acc, q)
        t = scan.t
        und = lidar.undistort(scan, ds.imu_t, ds.gyro, ds.acc, x)
        var = (f.lidar_noise_std or scan.sigma) ** 2
        if var <= 0:
            raise ValueError("LiDAR noise is zero; set filter.lidar_noise_std for noiseless scans")
        pts = voxel_downsample(und.points, f.scan_voxel) if f.scan_voxel > 0 else und.points

        if len(pmap) == 0:
            pmap.insert_scan(lidar.to_world(und.points, x))
            result.scan_ms.append(1e3 * (time.perf_counter() - tic))
        else:
            meas = _odom_measurement(ds, t_prev, t, f) if x_prev is not None else None
            odom_input = (meas, x_prev) if meas is not None else None
            upd = iterated_update(x, p, pts, pmap, var, odom_input, icfg)
            x, p = upd.state, upd.cov
            if on_update is not None:
                on_update(ScanContext(k, x, x_prev, pts, pmap, var, meas))
            pmap.insert_scan(lidar.to_world(und.points, x))
            result.scan_ms.append(1e3 * (time.perf_counter() - tic))
            result.diagnostics.append(_diagnostic_row(t, len(pts), upd, p))

        x_prev, t_prev = x, t
        times.append(t)
        quats.append(x.rot_GI.q)
        poss.append(x.pos_GI.copy())

    result.trajectory = Trajectory(np.array(times), np.array(poss), np.array(quats))
    result.final_cov = p
    return result


def _diagnostic_row(t, n_raw, upd, p) -> dict:
    rep = upd.report
    asym, ratio = st.cov_health(p)
    monotone = all(after <= before * (1 + 1e-12) for before, after in upd.cost_trace)
    weak = rep.weakest_translation if rep is not None else np.full(3, np.nan)
    return {
        "t": t,
        "iterations": upd.iterations,
        "converged": int(upd.converged),
        "n_raw": n_raw,
        "n_points": upd.n_points,
        "skipped": int(upd.skipped),
        "degenerate": int(bool(rep is not None and rep.degenerate)),
        "used_odometry": int(upd.used_odometry),
        "odom_fallback": int(upd.odom_fallback),
        "eig_rot_min": rep.eig_rot[0] if rep is not None else np.nan,
        "eig_trans_min": rep.eig_trans[0] if rep is not None else np.nan,
        "weak_tx": abs(weak[0]),
        "weak_ty": abs(weak[1]),
        "weak_tz": abs(weak[2]),
        "cost_initial": upd.cost_trace[0][0] if upd.cost_trace else upd.final_cost,
        "cost_final": upd.final_cost,
        "cost_monotone": int(monotone),
        "cov_asym": asym,
        "cov_eigmin_ratio": ratio,
        "cov_valid": int(st.is_valid_cov(p)),
    }


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def write_rows(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def write_run(result: RunResult, cfg: RunConfig, out_dir) -> Path:
    """Trajectory, per-scan diagnostics, wall-clock timings and the config echo."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_tum(result.trajectory, out / "trajectory.tum")
    write_rows(out / "diagnostics.csv", DIAG_COLUMNS, result.diagnostics)
    # wall-clock numbers vary run to run, so they live apart from the deterministic outputs
    write_rows(out / "timing.csv", ["scan", "ms"], [{"scan": i, "ms": m} for i, m in enumerate(result.scan_ms)])
    dump_toml(cfg, out / "config.toml")
    return out


# campaign -------------------------------------------------------------------


def run_seed(spec: CampaignSpec, run: int) -> int:
    return spec.seed * 1000 + run


def _campaign_job(args):
    """One (sigma, seed) dataset, filtered once per mode; never raises."""
    spec, base, sigma, run, out_dir = args
    seed = run_seed(spec, run)
    rows = []
    try:
        cfg = base.with_changes(simulation={"lidar_sigma": sigma, "seed": seed})
        ds = generate_dataset(cfg)
    except Exception as exc:  # recorded, the campaign carries on
        err = f"{type(exc).__name__}: {exc}"
        return [_crash_row(sigma, run, seed, m, err) for m in spec.modes]
    run_dir = Path(out_dir) / f"sigma_{sigma:.3f}" / f"run_{run:03d}"
    if spec.save_datasets:
        from .io import write_dataset

        write_dataset(ds, run_dir / "dataset")
    for mode in spec.modes:
        try:
            mcfg = cfg.with_changes(filter={"fusion_mode": mode})
            res = run_filter(ds, mcfg)
            write_run(res, mcfg, run_dir / mode)
            stats = evaluate(res.trajectory, ds.ground_truth)
            rows.append({
                "sigma": sigma, "run": run, "seed": seed, "mode": mode, "status": "ok",
                "ate_max": stats.max, "ate_mean": stats.mean, "ate_rmse": stats.rmse,
                "n_scans": len(res.diagnostics),
                "n_degenerate": sum(d["degenerate"] for d in res.diagnostics),
                "n_odometry": sum(d["used_odometry"] for d in res.diagnostics),
                "invariant_violations": res.invariant_violations(),
                "median_scan_ms": float(np.median(res.scan_ms)) if res.scan_ms else float("nan"),
                "error": "",
            })
        except Exception as exc:
            log.error("run sigma=%s seed=%s mode=%s crashed:\n%s", sigma, seed, mode, traceback.format_exc())
            rows.append(_crash_row(sigma, run, seed, mode, f"{type(exc).__name__}: {exc}"))
    return rows


def _crash_row(sigma, run, seed, mode, err) -> dict:
    return {"sigma": sigma, "run": run, "seed": seed, "mode": mode, "status": "crash", "error": err}


@dataclass(eq=False)
class CampaignResult:
    runs: list
    summary: dict  # (sigma, mode) -> BoxStats
    out_dir: Path

    @property
    def crashed(self) -> int:
        return sum(r["status"] != "ok" for r in self.runs)

    @property
    def violations(self) -> int:
        return sum(int(r.get("invariant_violations", 0) or 0) for r in self.runs)

    def ok(self) -> bool:
        return self.crashed == 0 and self.violations == 0

    def mean_ate(self, sigma, mode) -> float:
        return self.summary[(sigma, mode)].mean


def run_campaign(spec: CampaignSpec, base: RunConfig, out_dir) -> CampaignResult:
    """Every sigma x seed x mode; per-run CSV, box-plot summary and a comparison table.

    Each (sigma, seed) dataset is generated once and shared by all modes.
    Wall-clock medians go to ``timing.csv`` so that ``runs.csv`` and
    ``summary.csv`` stay byte-reproducible.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_toml(campaign_to_dict(spec, base), out / "campaign.toml")
    jobs = [(spec, base, float(s), r, str(out)) for s in spec.sigmas for r in range(spec.runs)]
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as ex:
            batches = list(ex.map(_campaign_job, jobs))
    else:
        batches = [_campaign_job(j) for j in jobs]
    runs = [r for b in batches for r in b]

    det_cols = [c for c in RUN_COLUMNS if c != "median_scan_ms"]
    write_rows(out / "runs.csv", det_cols, runs)
    write_rows(out / "timing.csv", ["sigma", "run", "mode", "median_scan_ms"], runs)

    summary = {}
    for s in spec.sigmas:
        for m in spec.modes:
            vals = [r["ate_mean"] for r in runs if r["sigma"] == float(s) and r["mode"] == m and r["status"] == "ok"]
            if vals:
                summary[(float(s), m)] = aggregate(vals)
    write_rows(
        out / "summary.csv", SUMMARY_COLUMNS,
        [{"sigma": s, "mode": m, **vars(b)} for (s, m), b in summary.items()],
    )
    result = CampaignResult(runs, summary, out)
    (out / "comparison.txt").write_text(comparison_table(result, spec))
    return result


def comparison_table(res: CampaignResult, spec: CampaignSpec) -> str:
    lines = ["mean ATE [m] per noise level (median in parentheses)", ""]
    head = f"{'sigma [m]':>10}" + "".join(f"{m:>28}" for m in spec.modes)
    lines += [head, "-" * len(head)]
    for s in spec.sigmas:
        cells = []
        for m in spec.modes:
            b = res.summary.get((float(s), m))
            cells.append(f"{'crashed':>28}" if b is None else f"{b.mean:>17.4f} ({b.median:.4f})")
        lines.append(f"{s:>10.3f}" + "".join(cells))
    lines += ["", f"runs: {len(res.runs)}  crashed: {res.crashed}  invariant violations: {res.violations}", ""]
    return "\n".join(lines)


def ate_table(stats: AteStats) -> str:
    return f"max {stats.max:.6f} m\nmean {stats.mean:.6f} m\nrmse {stats.rmse:.6f} m\nposes {len(stats.errors)}\n"


# CRLB certification -----------------------------------------------------------


SYNTH_LIDAR_ROWS = 40
CERT_COLUMNS = (
    "instance,source,seed,scan,eigmin_gap,trace_li,cond_C,cond_E,schur_err_li,schur_err_pf,certified,error"
).split(",")


def _dense_errors(b: crlb.FisherBlocks):
    j_li = np.block([[b.U, b.B], [b.B.T, b.C]])
    j_pf = crlb.assemble_pose_fusion(b)
    li = np.linalg.inv(j_li)[:6, :6]
    pf = np.linalg.inv(j_pf)[:6, :6]

    def rel(a, ref):
        return float(np.max(np.abs(a - ref)) / np.max(np.abs(ref)))

    return rel(crlb.crlb_pure_lidar(b), li), rel(crlb.crlb_pose_fusion(b), pf)


def _certify(b: crlb.FisherBlocks, base: dict) -> dict:
    row = dict(base)
    try:
        r = crlb.compare(b)
        err_li, err_pf = _dense_errors(b)
        row.update(
            eigmin_gap=r.psd_gap_eigmin, trace_li=float(np.trace(r.crlb_li)), cond_C=float(np.linalg.cond(b.C)),
            cond_E=float(np.linalg.cond(b.E)), schur_err_li=err_li, schur_err_pf=err_pf,
            certified=int(crlb.certify_ordering(r) and err_li <= 1e-8 and err_pf <= 1e-8), error="",
        )
    except np.linalg.LinAlgError as exc:
        row.update(certified=0, error=f"{type(exc).__name__}: {exc}")
    return row


def _synthetic_rows(n: int, seed: int) -> list:
    rows = []
    for i in range(n):
        h, r = crlb.random_instance(np.random.default_rng([seed, i]), n_lidar=SYNTH_LIDAR_ROWS)
        b = crlb.blocks_from_jacobians(h, r, SYNTH_LIDAR_ROWS)
        rows.append(_certify(b, {"instance": i, "source": "synthetic", "seed": seed, "scan": i}))
    return rows


def harvest_blocks(n: int, seed: int, base: RunConfig | None = None) -> list:
    """Fisher blocks from real filter updates on the corridor.

    Each update contributes its LiDAR rows and one relative-odometry block
    (both linearized at the posterior), plus the extrinsic prior
    information. Several datasets are simulated if one is not enough.
    """
    base = base or RunConfig()
    out = []
    ds_seed = seed
    while len(out) < n:
        cfg = base.with_changes(simulation={"seed": ds_seed}, filter={"init_mode": "truth"})
        ds = generate_dataset(cfg)
        f = cfg.filter
        icfg = iekf_config(f)
        prior = (np.eye(6) / f.p0_ext, np.eye(6) / f.p0_ext)
        found = []

        def hook(c: ScanContext, ds_seed=ds_seed, found=found):
            if c.odom_meas is None or len(found) + len(out) >= n:
                return
            corr = correspondences(c.points_L, c.pmap, c.x_post, c.lidar_var, icfg)
            if len(corr) == 0:
                return
            _, jac_l = lidar.rows(corr, c.x_post)
            res = odometry.residual_and_jacobian(c.odom_meas, c.x_post, c.x_prev)
            jac_o = np.vstack([res.H_Or, res.H_Op])
            h = crlb.pose_fusion_jacobian(jac_l, jac_o)
            r = np.concatenate([corr.noise_var, np.diag(c.odom_meas.R_r), np.diag(c.odom_meas.R_p)])
            found.append((ds_seed, c.index, crlb.blocks_from_jacobians(h, r, len(corr), prior)))

        run_filter(ds, cfg, on_update=hook)
        if not found:
            raise RuntimeError(f"dataset seed {ds_seed} produced no harvestable updates")
        out.extend(found)
        ds_seed += 1
    return out[:n]


def run_crlb_cert(n: int, seed: int, source: str = "synthetic", base: RunConfig | None = None) -> list:
    """Certification rows, one per instance."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return []
    if source == "synthetic":
        return _synthetic_rows(n, seed)
    if source == "harvested":
        return [
            _certify(b, {"instance": i, "source": "harvested", "seed": s, "scan": k})
            for i, (s, k, b) in enumerate(harvest_blocks(n, seed, base))
        ]
    raise ValueError(f"unknown source {source!r}")


def write_cert(rows, path) -> None:
    write_rows(path, CERT_COLUMNS, rows)
