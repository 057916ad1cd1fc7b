"""Absolute trajectory error with rigid (no scale) alignment."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .se3 import Pose

MAX_TIME_GAP = 0.05


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: list[Pose]

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    @classmethod
    def from_samples(cls, samples) -> "Trajectory":
        samples = list(samples)
        return cls(np.array([s[0] for s in samples], dtype=float), [s[1] for s in samples])

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses], dtype=float).reshape(-1, 3)

    def transformed(self, T: Pose) -> "Trajectory":
        return Trajectory(self.timestamps.copy(), [T @ p for p in self.poses])


def associate(est: Trajectory, gt: Trajectory, max_gap: float = MAX_TIME_GAP) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-timestamp pairs (est_idx, gt_idx) within ``max_gap``; each gt sample is used at most once."""
    if len(gt) == 0 or len(est) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    pos = np.searchsorted(gt.timestamps, est.timestamps)
    lo = np.clip(pos - 1, 0, len(gt) - 1)
    hi = np.clip(pos, 0, len(gt) - 1)
    pick = np.where(np.abs(gt.timestamps[lo] - est.timestamps) <= np.abs(gt.timestamps[hi] - est.timestamps), lo, hi)
    ok = np.abs(gt.timestamps[pick] - est.timestamps) <= max_gap
    ei = np.flatnonzero(ok)
    gi = pick[ok]
    _, first = np.unique(gi, return_index=True)
    keep = np.sort(first)
    return ei[keep], gi[keep]


def _pairs(est: Trajectory, gt: Trajectory):
    ei, gi = associate(est, gt)
    if len(ei) < 3:
        raise ValueError(f"need >= 3 associated pose pairs, got {len(ei)}")
    return est.positions[ei], gt.positions[gi]


def kabsch(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Rigid T minimizing sum |dst - T src|^2 (rotation + translation, no scale)."""
    if np.array_equal(src, dst):
        return Pose.identity()
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(C)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    return Pose(R, mu_d - R @ mu_s)


def align(est: Trajectory, gt: Trajectory) -> Pose:
    """Transform that maps the estimate onto ground truth."""
    src, dst = _pairs(est, gt)
    return kabsch(src, dst)


def residuals(est: Trajectory, gt: Trajectory) -> np.ndarray:
    src, dst = _pairs(est, gt)
    T = kabsch(src, dst)
    return dst - (src @ T.rotation.T + T.translation)


def ate_rmse(est: Trajectory, gt: Trajectory) -> float:
    r = residuals(est, gt)
    return float(np.sqrt(np.mean(np.sum(r * r, axis=1))))


def report(est: Trajectory, gt: Trajectory) -> dict:
    src, dst = _pairs(est, gt)
    T = kabsch(src, dst)
    r = dst - (src @ T.rotation.T + T.translation)
    return {
        "ate_rmse": float(np.sqrt(np.mean(np.sum(r * r, axis=1)))),
        "pair_count": int(len(src)),
        "alignment": {"rotation": T.rotation.tolist(), "translation": T.translation.tolist()},
    }


def write_report(path, rep: dict) -> None:
    Path(path).write_text(json.dumps(rep, indent=2) + "\n")


# TUM: "timestamp tx ty tz qx qy qz qw" per line


def write_tum(path, traj: Trajectory) -> None:
    lines = []
    for ts, p in zip(traj.timestamps, traj.poses):
        q = Rotation.from_matrix(p.rotation).as_quat()
        vals = [ts, *p.translation, *q]
        lines.append(" ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_tum(path) -> Trajectory:
    rows = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
        rows.append([float(v) for v in parts])
    if not rows:
        return Trajectory(np.zeros(0), [])
    a = np.array(rows)
    R = Rotation.from_quat(a[:, 4:8]).as_matrix()
    return Trajectory(a[:, 0], [Pose(R[i], a[i, 1:4]) for i in range(len(a))])
