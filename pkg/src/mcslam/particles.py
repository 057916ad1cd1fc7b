"""Particle and keyframe storage.

Keyframe clouds live once in a shared :class:`KeyframeStore`; each particle
only carries its current pose and its own estimate of every keyframe pose.
The particle set is stored as dense arrays so the filter kernels can run
over all particles without Python-level loops.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .pointcloud import Scan, VoxelMap
from .se3 import Pose


@dataclass
class Keyframe:
    id: int
    cloud: Scan
    voxel_map: VoxelMap
    odom_pose: Pose
    timestamp: float


class PackedMaps:
    """All keyframe voxel maps concatenated into flat arrays for the kernels."""

    def __init__(self, maps: list[VoxelMap]):
        self.count = len(maps)
        cell_off = np.cumsum([0] + [len(m) for m in maps])
        self.table_offsets = np.cumsum([0] + [len(m.table_keys) for m in maps])[:-1].astype(np.int64)
        self.table_bits = np.array([m.bits for m in maps], dtype=np.int64)
        self.inv_res = np.array([m.inv_resolution for m in maps], dtype=float)
        if maps:
            self.table_keys = np.concatenate([m.table_keys for m in maps])
            self.table_vals = np.concatenate([m.table_vals + off for m, off in zip(maps, cell_off[:-1])])
            self.cell_means = np.ascontiguousarray(np.concatenate([m.means for m in maps]))
            self.cell_covs = np.ascontiguousarray(np.concatenate([m.covs for m in maps]))
        else:
            self.table_keys = np.zeros(0, dtype=np.int64)
            self.table_vals = np.zeros(0, dtype=np.int64)
            self.cell_means = np.zeros((0, 3))
            self.cell_covs = np.zeros((0, 3, 3))


class KeyframeStore:
    """Append-only keyframe list plus the odometry trajectory used for path lengths."""

    def __init__(self):
        self.keyframes: list[Keyframe] = []
        self.odom_trajectory: list[tuple[float, Pose]] = []
        self._times: list[float] = []
        self._cum_path: list[float] = []
        self._packed: PackedMaps | None = None

    def __len__(self) -> int:
        return len(self.keyframes)

    def __getitem__(self, k: int) -> Keyframe:
        return self.keyframes[k]

    def append_odometry(self, timestamp: float, pose: Pose) -> None:
        if self._times and timestamp <= self._times[-1]:
            raise ValueError("odometry timestamps must be strictly increasing")
        step = 0.0
        if self.odom_trajectory:
            step = float(np.linalg.norm(pose.translation - self.odom_trajectory[-1][1].translation))
        self.odom_trajectory.append((float(timestamp), pose))
        self._times.append(float(timestamp))
        self._cum_path.append((self._cum_path[-1] if self._cum_path else 0.0) + step)

    def append_keyframe(self, cloud: Scan, voxel_map: VoxelMap, odom_pose: Pose, timestamp: float) -> Keyframe:
        if self.keyframes and timestamp <= self.keyframes[-1].timestamp:
            raise ValueError("keyframe timestamps must be strictly increasing")
        kf = Keyframe(len(self.keyframes), cloud, voxel_map, odom_pose, float(timestamp))
        self.keyframes.append(kf)
        self._packed = None
        return kf

    def cumulative_path(self, timestamp: float) -> float:
        """Odometry travel distance from the first sample to ``timestamp`` (linear between samples)."""
        if not self._times:
            raise ValueError("odometry trajectory is empty")
        times = self._times
        if timestamp < times[0] - 1e-12 or timestamp > times[-1] + 1e-12:
            raise ValueError(f"time {timestamp} outside odometry range [{times[0]}, {times[-1]}]")
        return float(np.interp(timestamp, times, self._cum_path))

    def keyframe_paths(self) -> np.ndarray:
        return np.array([self.cumulative_path(kf.timestamp) for kf in self.keyframes], dtype=float)

    @property
    def packed(self) -> PackedMaps:
        if self._packed is None:
            self._packed = PackedMaps([kf.voxel_map for kf in self.keyframes])
        return self._packed

    def cloud_nbytes(self) -> int:
        return sum(kf.cloud.nbytes() + kf.voxel_map.nbytes() for kf in self.keyframes)


@dataclass
class Particle:
    current_pose: Pose
    keyframe_poses: list[Pose] = field(default_factory=list)
    log_weight: float = 0.0
    cum_log_likelihood: float = 0.0
    frame_log_likelihood: float = 0.0

    @property
    def dead(self) -> bool:
        return self.log_weight == -np.inf


class ParticleSet:
    """Fixed-capacity set of particles held as arrays.

    ``rot``/``trans`` hold the current poses, ``kf_rot``/``kf_trans`` the
    per-particle keyframe poses with shape (N, K, ...). Dead particles carry
    ``log_weight == -inf``.
    """

    def __init__(self, n: int, initial: Pose | None = None, rng_seed: int = 0):
        if n < 1:
            raise ValueError("particle count must be >= 1")
        initial = initial or Pose.identity()
        self.rng_seed = int(rng_seed)
        self.rot = np.ascontiguousarray(np.broadcast_to(initial.rotation, (n, 3, 3)), dtype=float).copy()
        self.trans = np.ascontiguousarray(np.broadcast_to(initial.translation, (n, 3)), dtype=float).copy()
        self.kf_rot = np.zeros((n, 0, 3, 3))
        self.kf_trans = np.zeros((n, 0, 3))
        self.log_weight = np.full(n, -np.log(n))
        self.cum_log_likelihood = np.zeros(n)
        self.frame_log_likelihood = np.zeros(n)

    def __len__(self) -> int:
        return len(self.trans)

    @property
    def n_keyframes(self) -> int:
        return self.kf_trans.shape[1]

    def __getitem__(self, i: int) -> Particle:
        return Particle(
            Pose(self.rot[i], self.trans[i]),
            [Pose(self.kf_rot[i, k], self.kf_trans[i, k]) for k in range(self.n_keyframes)],
            float(self.log_weight[i]),
            float(self.cum_log_likelihood[i]),
            float(self.frame_log_likelihood[i]),
        )

    def __setitem__(self, i: int, p: Particle) -> None:
        if len(p.keyframe_poses) != self.n_keyframes:
            raise ValueError("particle keyframe count does not match the set")
        self.rot[i] = p.current_pose.rotation
        self.trans[i] = p.current_pose.translation
        for k, kp in enumerate(p.keyframe_poses):
            self.kf_rot[i, k] = kp.rotation
            self.kf_trans[i, k] = kp.translation
        self.log_weight[i] = p.log_weight
        self.cum_log_likelihood[i] = p.cum_log_likelihood
        self.frame_log_likelihood[i] = p.frame_log_likelihood

    @property
    def particles(self) -> list[Particle]:
        return [self[i] for i in range(len(self))]

    @property
    def live(self) -> np.ndarray:
        return np.isfinite(self.log_weight)

    def weights(self) -> np.ndarray:
        """Normalized linear weights (zero for dead particles)."""
        lw = self.log_weight
        live = np.isfinite(lw)
        w = np.zeros(len(lw))
        if live.any():
            w[live] = np.exp(lw[live] - np.max(lw[live]))
            w /= w.sum()
        return w

    def copy_particle(self, dst: int, src: int) -> None:
        self.rot[dst] = self.rot[src]
        self.trans[dst] = self.trans[src]
        self.kf_rot[dst] = self.kf_rot[src]
        self.kf_trans[dst] = self.kf_trans[src]
        self.log_weight[dst] = self.log_weight[src]
        self.cum_log_likelihood[dst] = self.cum_log_likelihood[src]
        self.frame_log_likelihood[dst] = self.frame_log_likelihood[src]

    def nbytes(self) -> int:
        return sum(a.nbytes for a in (self.rot, self.trans, self.kf_rot, self.kf_trans,
                                      self.log_weight, self.cum_log_likelihood, self.frame_log_likelihood))


def extend_all(particles: ParticleSet, store: KeyframeStore | None = None) -> None:
    """Append each particle's current pose as its estimate of the newest keyframe."""
    if store is not None and particles.n_keyframes + 1 != len(store):
        raise ValueError("extend_all must follow exactly one keyframe insertion")
    particles.kf_rot = np.ascontiguousarray(np.concatenate([particles.kf_rot, particles.rot[:, None]], axis=1))
    particles.kf_trans = np.ascontiguousarray(np.concatenate([particles.kf_trans, particles.trans[:, None]], axis=1))


def map_of(particle: Particle, store: KeyframeStore) -> Scan:
    """Union of keyframe clouds placed at this particle's keyframe poses."""
    if len(particle.keyframe_poses) != len(store):
        raise ValueError("particle and store keyframe counts differ")
    if len(store) == 0:
        return Scan(np.zeros((0, 3)), np.zeros((0, 3, 3)))
    parts = [kf.cloud.transformed(p) for kf, p in zip(store.keyframes, particle.keyframe_poses)]
    means = np.concatenate([s.means for s in parts])
    covs = np.concatenate([s.covs for s in parts])
    return Scan(means, covs, max_points=max(len(means), 1))


def pose_to_tum(p: Pose) -> list[float]:
    q = Rotation.from_matrix(p.rotation).as_quat()
    return [*map(float, p.translation), *map(float, q)]


def snapshot(particles: ParticleSet, frame: int | None = None, timestamp: float | None = None) -> dict:
    w = particles.weights()
    quats = Rotation.from_matrix(particles.rot).as_quat()
    return {
        "frame": frame,
        "timestamp": timestamp,
        "particles": [
            {
                "translation": particles.trans[i].tolist(),
                "quaternion_xyzw": quats[i].tolist(),
                "log_weight": float(particles.log_weight[i]) if np.isfinite(particles.log_weight[i]) else None,
                "weight": float(w[i]),
            }
            for i in range(len(particles))
        ],
    }


def write_snapshot(particles: ParticleSet, path, frame: int | None = None, timestamp: float | None = None) -> None:
    Path(path).write_text(json.dumps(snapshot(particles, frame, timestamp)))


def read_snapshot(path) -> tuple[np.ndarray, np.ndarray]:
    """Return (translations (N, 3), weights (N,)) from a snapshot file."""
    doc = json.loads(Path(path).read_text())
    trans = np.array([p["translation"] for p in doc["particles"]], dtype=float).reshape(-1, 3)
    w = np.array([p["weight"] for p in doc["particles"]], dtype=float)
    return trans, w
