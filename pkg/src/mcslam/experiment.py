"""Experiment configs, dataset synthesis/loading and the end-to-end run."""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2

from . import evaluation as ev
from . import filter as flt
from . import rng as rngmod
from . import sim
from .particles import map_of, write_snapshot
from .pointcloud import estimate_covariances, read_ply, write_ply
from .se3 import Pose, compose, inverse

log = logging.getLogger(__name__)

ENV_PREFIX = "MCSLAM_"
PRESETS = ("loop_corridor", "forest_grid", "multi_floor_elevator")


class ConfigError(ValueError):
    pass


def _check_fields(cls, d: dict, path: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{path.rstrip('.') or 'config'}: expected an object")
    known = {f.name for f in fields(cls)}
    for k in d:
        if k not in known:
            raise ConfigError(f"{path}{k}: unknown field")


@dataclass
class WorldSpec:
    kind: str = "loop_corridor"
    params: dict = field(default_factory=dict)


@dataclass
class RouteSpec:
    start: list = field(default_factory=lambda: [2.0, 2.0, 1.2])
    yaw0: float = 0.0
    legs: list = field(default_factory=list)
    dt: float = 1.0
    step: float = 1.0
    vertical_step: float = 0.5
    odom_sigma_xyz: float = 0.02
    odom_sigma_rpy: float = 0.002
    odom_bias: list = field(default_factory=lambda: [0.0] * 6)
    elevator_covariance_scale: float = 4.0


@dataclass
class ElevatorSpec:
    enabled: bool = False
    threshold: float = 2.0
    vertical_sigma: float = 0.5
    # a cabin scan says nothing about the building: predict only while inside
    skip_scan: bool = True


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    world: WorldSpec = field(default_factory=WorldSpec)
    route: RouteSpec = field(default_factory=RouteSpec)
    sensor: sim.SensorModel = field(default_factory=sim.SensorModel)
    filter: flt.FilterConfig = field(default_factory=flt.FilterConfig)
    elevator: ElevatorSpec = field(default_factory=ElevatorSpec)
    # ints, or "elevator_exit" / "elevator_exit+K" relative to the first frame after an elevator ride
    snapshot_frames: list = field(default_factory=list)
    output_dir: str = "out"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        _check_fields(cls, d, "")
        sub = {"world": WorldSpec, "route": RouteSpec, "sensor": sim.SensorModel, "elevator": ElevatorSpec}
        kw = {}
        for k, v in d.items():
            if k in sub:
                _check_fields(sub[k], v, f"{k}.")
                try:
                    kw[k] = sub[k](**v)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"{k}: {exc}") from None
            elif k == "filter":
                _check_fields(flt.FilterConfig, v, "filter.")
                try:
                    kw[k] = flt.FilterConfig(**v)
                except TypeError as exc:
                    raise ConfigError(f"filter: {exc}") from None
            else:
                kw[k] = v
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        try:
            self.filter.validate("filter.")
            self.sensor.validate("sensor.")
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.world.kind not in ("forest_grid", "multi_floor", "loop_corridor"):
            raise ConfigError(f"world.kind: unknown world kind {self.world.kind!r}")
        r = self.route
        if len(r.start) != 3:
            raise ConfigError("route.start: expected [x, y, z]")
        if not r.legs:
            raise ConfigError("route.legs: at least one leg required")
        for i, leg in enumerate(r.legs):
            if "to" not in leg or len(leg["to"]) != 3:
                raise ConfigError(f"route.legs[{i}].to: expected [x, y, z]")
            if leg.get("mode", "walk") not in ("walk", "elevator"):
                raise ConfigError(f"route.legs[{i}].mode: must be 'walk' or 'elevator'")
        for name in ("dt", "step", "vertical_step"):
            if not getattr(r, name) > 0:
                raise ConfigError(f"route.{name}: must be > 0")
        if r.odom_sigma_xyz < 0 or r.odom_sigma_rpy < 0:
            raise ConfigError("route.odom_sigma_xyz: noise sigmas must be >= 0")
        if len(r.odom_bias) != 6:
            raise ConfigError("route.odom_bias: expected 6 values")
        if not self.elevator.threshold > 0:
            raise ConfigError("elevator.threshold: must be > 0")
        if self.elevator.vertical_sigma < 0:
            raise ConfigError("elevator.vertical_sigma: must be >= 0")
        if not isinstance(self.seed, int) or self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed: must be an unsigned 64-bit integer")
        for s in self.snapshot_frames:
            if not (isinstance(s, int) or (isinstance(s, str) and s.startswith("elevator_exit"))):
                raise ConfigError(f"snapshot_frames: bad entry {s!r}")


# --------------------------------------------------------------------------- loading and overrides


def preset_path(name: str) -> Path:
    return Path(str(resources.files("mcslam") / "presets" / f"{name}.json"))


def load_config_dict(path_or_preset: str | os.PathLike) -> dict:
    p = Path(path_or_preset)
    if not p.exists():
        if str(path_or_preset) in PRESETS:
            p = preset_path(str(path_or_preset))
        else:
            raise ConfigError(f"config: no such file or preset {str(path_or_preset)!r}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {p}: {exc}") from None


def set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
    cur[keys[-1]] = value


def apply_env_overrides(d: dict, environ=None) -> dict:
    """``MCSLAM_FILTER__PARTICLE_COUNT=500`` sets ``filter.particle_count``; values parse as JSON when possible."""
    environ = os.environ if environ is None else environ
    d = copy.deepcopy(d)
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        dotted = ".".join(part.lower() for part in key[len(ENV_PREFIX):].split("__"))
        raw = environ[key]
        try:
            val = json.loads(raw)
        except json.JSONDecodeError:
            val = raw
        set_path(d, dotted, val)
    return d


def load_config(path_or_preset, overrides: dict | None = None, environ=None) -> ExperimentConfig:
    d = apply_env_overrides(load_config_dict(path_or_preset), environ)
    for k, v in (overrides or {}).items():
        if v is not None:
            set_path(d, k, v)
    return ExperimentConfig.from_dict(d)


# --------------------------------------------------------------------------- dataset


@dataclass
class Dataset:
    world: sim.World
    script: sim.TrajectoryScript
    scans: list[np.ndarray]  # raw sensor-frame points, possibly empty
    odometry: list[flt.MotionDelta]  # one per frame; frame 0 is identity

    @property
    def timestamps(self) -> np.ndarray:
        return self.script.timestamps

    @property
    def groundtruth(self) -> ev.Trajectory:
        return ev.Trajectory(self.script.timestamps, [p for _, p in self.script.waypoints])


def build_script(cfg: ExperimentConfig) -> sim.TrajectoryScript:
    r = cfg.route
    poses, segs = sim.build_route(r.legs, tuple(r.start), r.dt, r.step, r.vertical_step, r.yaw0)
    return sim.TrajectoryScript(poses, sim.diagonal_noise(r.odom_sigma_xyz, r.odom_sigma_rpy), segs,
                                np.asarray(r.odom_bias, dtype=float), r.elevator_covariance_scale)


def generate_dataset(cfg: ExperimentConfig) -> Dataset:
    params = dict(cfg.world.params)
    if cfg.world.kind in ("forest_grid", "loop_corridor", "multi_floor"):
        params.setdefault("seed", cfg.seed)
    world = sim.generate_world(cfg.world.kind, params)
    script = build_script(cfg)
    scans = []
    for k, (ts, pose) in enumerate(script.waypoints):
        try:
            s = sim.simulate_scan(sim.scan_world(world, pose), pose, cfg.sensor, rngmod.stream(cfg.seed, "scan", k), ts)
            scans.append(s.means.copy())
        except sim.EmptyScanError:
            scans.append(np.zeros((0, 3)))
    deltas = sim.simulate_odometry(script, cfg.seed)
    first = flt.MotionDelta(Pose.identity(), np.zeros((6, 6)))
    return Dataset(world, script, scans, [first] + deltas)


def write_dataset(ds: Dataset, out_dir, cfg: ExperimentConfig | None = None) -> Path:
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    ds.world.save(out / "world.json")
    (out / "script.json").write_text(json.dumps(ds.script.to_json()))
    for k, pts in enumerate(ds.scans):
        write_ply(out / "scans" / f"{k:06d}.ply", pts)
    ev.write_tum(out / "groundtruth.tum", ds.groundtruth)
    with open(out / "odometry.jsonl", "w") as fh:
        for ts, m in zip(ds.timestamps, ds.odometry):
            fh.write(json.dumps({"t": float(ts), "delta": m.delta.matrix().tolist(),
                                 "covariance": m.covariance.tolist()}) + "\n")
    meta = {"frames": len(ds.scans)}
    if cfg is not None:
        meta["config"] = cfg.to_dict()
    (out / "meta.json").write_text(json.dumps(meta, indent=2))
    return out


def load_dataset(path) -> Dataset:
    p = Path(path)
    for name in ("world.json", "script.json", "odometry.jsonl", "scans"):
        if not (p / name).exists():
            raise FileNotFoundError(f"dataset {p}: missing {name}")
    world = sim.World.load(p / "world.json")
    script = sim.TrajectoryScript.from_json(json.loads((p / "script.json").read_text()))
    odo = []
    for line in (p / "odometry.jsonl").read_text().splitlines():
        if line.strip():
            d = json.loads(line)
            odo.append(flt.MotionDelta(Pose.from_matrix(np.array(d["delta"])), np.array(d["covariance"])))
    scans = [read_ply(p / "scans" / f"{k:06d}.ply") for k in range(len(script.waypoints))]
    if len(odo) != len(scans):
        raise ValueError(f"dataset {p}: {len(odo)} odometry entries for {len(scans)} scans")
    return Dataset(world, script, scans, odo)


# --------------------------------------------------------------------------- run


@dataclass
class ExperimentReport:
    name: str
    seed: int
    frames: int
    keyframes: int
    ate_representative: float
    ate_final: float
    ate_deadreckoning: float
    mean_frame_s: float
    max_frame_s: float
    elevator_frames: list
    snapshots: dict
    output_dir: str

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    report: ExperimentReport
    frame_reports: list
    state: flt.SlamState
    trajectory: ev.Trajectory
    final_trajectory: ev.Trajectory
    deadreckoning: ev.Trajectory
    groundtruth: ev.Trajectory
    # snapshot name -> (translations, weights) captured at that frame
    snapshots: dict


def resolve_snapshot_frames(entries, script: sim.TrajectoryScript) -> dict:
    """Map each configured snapshot entry to a frame index (entries past the end are dropped)."""
    ts = script.timestamps
    out = {}
    exits = [int(np.searchsorted(ts, e, side="right")) for _, e, _ in script.elevator_segments]
    for ent in entries:
        if isinstance(ent, int):
            frame = ent
        else:
            if not exits:
                continue
            off = int(ent.split("+", 1)[1]) if "+" in ent else 0
            frame = exits[0] + off
        if 0 <= frame < len(ts):
            out[str(ent)] = frame
    return out


def final_trajectory(state: flt.SlamState, rep: int) -> ev.Trajectory:
    """Per-frame poses of the representative: its keyframe estimate chained with odometry since that keyframe."""
    store = state.store
    P = state.particles
    kf_ts = np.array([kf.timestamp for kf in store.keyframes])
    poses = []
    times = []
    for ts, odom in store.odom_trajectory:
        k = int(np.searchsorted(kf_ts, ts, side="right")) - 1
        times.append(ts)
        if k < 0:
            poses.append(odom)
            continue
        kf = store.keyframes[k]
        T_k = Pose(P.kf_rot[rep, k], P.kf_trans[rep, k])
        poses.append(compose(T_k, compose(inverse(kf.odom_pose), odom)))
    return ev.Trajectory(np.array(times), poses)


def run_dataset(cfg: ExperimentConfig, ds: Dataset, out_dir=None, workers: int = 1, write: bool = True) -> RunResult:
    flt.set_workers(workers)
    fc = cfg.filter
    initial = ds.script.waypoints[0][1]
    state = flt.SlamState.initialize(fc, initial)
    snap_at = resolve_snapshot_frames(cfg.snapshot_frames, ds.script)
    out = Path(out_dir or cfg.output_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "snapshots").mkdir(exist_ok=True)
    reports = []
    online = []
    elevator_frames = []
    snapshots = {}
    snap_data = {}
    log_fh = open(out / "frames.jsonl", "w") if write else None
    try:
        for k, (pts, motion) in enumerate(zip(ds.scans, ds.odometry)):
            ts = float(ds.timestamps[k])
            scan = None
            if len(pts) > fc.covariance_neighbors:
                scan = estimate_covariances(pts, fc.covariance_neighbors, ts)
            vd = None
            if cfg.elevator.enabled and scan is not None and sim.detect_elevator(scan, cfg.elevator.threshold):
                vd = cfg.elevator.vertical_sigma
                elevator_frames.append(k)
                if cfg.elevator.skip_scan:
                    scan = None
            try:
                rep = flt.step(scan, motion, state, fc, vertical_dispersion=vd, timestamp=ts)
            except flt.FilterDegeneracyError as exc:
                raise flt.FilterDegeneracyError(f"frame {k}: {exc}") from None
            reports.append(rep)
            online.append(_tum_pose(rep.representative_pose))
            if log_fh:
                log_fh.write(json.dumps(rep.to_dict()) + "\n")
            for name, f in snap_at.items():
                if f == k:
                    snapshots[name] = k
                    snap_data[name] = (state.particles.trans.copy(), state.particles.weights())
                    if write:
                        write_snapshot(state.particles, out / "snapshots" / f"frame_{k:06d}.json", k, ts)
    finally:
        if log_fh:
            log_fh.close()

    P = state.particles
    rep_idx = flt.representative(P)
    gt = ds.groundtruth
    fin = final_trajectory(state, rep_idx)
    onl = ev.Trajectory(np.asarray(ds.timestamps, dtype=float), online)
    dr = ev.Trajectory(np.array([t for t, _ in state.store.odom_trajectory]), [p for _, p in state.store.odom_trajectory])
    times = [r.elapsed_s for r in reports]
    report = ExperimentReport(
        name=cfg.name, seed=cfg.seed, frames=len(reports), keyframes=len(state.store),
        ate_representative=ev.ate_rmse(onl, gt), ate_final=ev.ate_rmse(fin, gt), ate_deadreckoning=ev.ate_rmse(dr, gt),
        mean_frame_s=float(np.mean(times)) if times else 0.0, max_frame_s=float(np.max(times)) if times else 0.0,
        elevator_frames=elevator_frames, snapshots=snapshots, output_dir=str(out),
    )
    if write:
        ev.write_tum(out / "trajectory.tum", onl)
        ev.write_tum(out / "trajectory_final.tum", fin)
        ev.write_tum(out / "deadreckoning.tum", dr)
        ev.write_tum(out / "groundtruth.tum", gt)
        write_ply(out / "map.ply", map_of(P[rep_idx], state.store).means)
        ate = {"representative": ev.report(onl, gt), "final": ev.report(fin, gt), "deadreckoning": ev.report(dr, gt)}
        ev.write_report(out / "ate.json", ate)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    return RunResult(report, reports, state, onl, fin, dr, gt, snap_data)


def _tum_pose(v) -> Pose:
    from scipy.spatial.transform import Rotation

    return Pose(Rotation.from_quat(v[3:7]).as_matrix(), v[:3])


def run(cfg: ExperimentConfig, out_dir=None, workers: int = 1, write: bool = True) -> RunResult:
    ds = generate_dataset(cfg)
    out = Path(out_dir or cfg.output_dir)
    if write:
        write_dataset(ds, out / "dataset", cfg)
    return run_dataset(cfg, ds, out, workers, write)


# --------------------------------------------------------------------------- multi-modality analysis


def cluster_report(translations: np.ndarray, weights: np.ndarray, radius: float = 1.0, k_max: int = 5,
                   seed: int = 0) -> dict:
    """k-means over particle translations with the smallest k whose clusters all have RMS radius <= ``radius``."""
    X = np.asarray(translations, dtype=float).reshape(-1, 3)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if len(X) == 0 or len(X) != len(w):
        raise ValueError("need one weight per particle and at least one particle")
    if not radius > 0 or k_max < 1:
        raise ValueError("radius must be > 0 and k_max >= 1")
    total = w.sum()
    if not total > 0:
        raise ValueError("weights sum to zero")
    best = None
    for k in range(1, min(k_max, len(np.unique(X, axis=0))) + 1):
        g = np.random.default_rng(rngmod.stream(seed, "kmeans", k).integers(2 ** 63))
        centers, labels = kmeans2(X, k, minit="++", seed=g)
        used = np.unique(labels)
        clusters = []
        worst = 0.0
        for c in used:
            m = labels == c
            ctr = X[m].mean(axis=0)
            rms = float(np.sqrt(np.mean(np.sum((X[m] - ctr) ** 2, axis=1))))
            worst = max(worst, rms)
            clusters.append({"center": ctr.tolist(), "count": int(m.sum()), "weight": float(w[m].sum() / total),
                             "rms_radius": rms})
        best = clusters
        if worst <= radius:
            break
    best.sort(key=lambda c: -c["weight"])
    return {"k": len(best), "clusters": best}


def z_separated_modes(rep: dict, min_sep: float = 3.0, min_weight: float = 0.10) -> bool:
    """Whether at least two clusters with >= ``min_weight`` mass are >= ``min_sep`` apart in z."""
    heavy = [c for c in rep["clusters"] if c["weight"] >= min_weight]
    zs = sorted(c["center"][2] for c in heavy)
    return any(b - a >= min_sep for i, a in enumerate(zs) for b in zs[i + 1:])
