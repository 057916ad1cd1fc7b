"""Point clouds with per-point surface covariances, voxel hashing, PLY I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numba as nb
import numpy as np
from scipy.spatial import cKDTree

from .se3 import Pose

PLANE_EPS = 1e-3
DEFAULT_NEIGHBORS = 10
MAX_SCAN_POINTS = 10_000

_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
_KEY_MASK = (1 << _KEY_BITS) - 1
_EMPTY = -1


@dataclass
class GaussianPoint:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(3)
        self.covariance = np.asarray(self.covariance, dtype=float).reshape(3, 3)


class Scan:
    """An ordered set of Gaussian points captured at one frame time.

    Stored column-wise: ``means`` is (n, 3), ``covs`` is (n, 3, 3).
    """

    def __init__(self, means, covs=None, timestamp: float = 0.0, max_points: int = MAX_SCAN_POINTS):
        means = np.ascontiguousarray(np.asarray(means, dtype=float).reshape(-1, 3))
        if covs is None:
            covs = np.broadcast_to(np.eye(3), (len(means), 3, 3))
        covs = np.ascontiguousarray(np.asarray(covs, dtype=float).reshape(-1, 3, 3))
        if len(covs) != len(means):
            raise ValueError("means and covs differ in length")
        if len(means) > max_points:
            raise ValueError(f"scan has {len(means)} points, more than the maximum {max_points}")
        self.means = means
        self.covs = covs
        self.timestamp = float(timestamp)

    def __len__(self) -> int:
        return len(self.means)

    @property
    def points(self) -> list[GaussianPoint]:
        return [GaussianPoint(m, c) for m, c in zip(self.means, self.covs)]

    @classmethod
    def from_points(cls, points: list[GaussianPoint], timestamp: float = 0.0) -> "Scan":
        if not points:
            return cls(np.zeros((0, 3)), np.zeros((0, 3, 3)), timestamp)
        return cls(np.array([p.mean for p in points]), np.array([p.covariance for p in points]), timestamp)

    def transformed(self, pose: Pose) -> "Scan":
        R = pose.rotation
        return Scan(
            self.means @ R.T + pose.translation,
            R @ self.covs @ R.T,
            self.timestamp,
            max_points=max(len(self), MAX_SCAN_POINTS),
        )

    def nbytes(self) -> int:
        return self.means.nbytes + self.covs.nbytes


def regularize_plane(covs: np.ndarray, eps: float = PLANE_EPS) -> np.ndarray:
    """Replace eigenvalues with (1, 1, eps), keeping eigenvectors.

    Only the smallest-eigenvalue direction survives, so the result is
    ``I - (1 - eps) n n^T`` with ``n`` the surface normal estimate.
    """
    covs = np.asarray(covs, dtype=float)
    _, vecs = np.linalg.eigh(covs)
    n = vecs[..., :, 0]
    out = np.eye(3) - (1.0 - eps) * n[..., :, None] * n[..., None, :]
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def estimate_covariances(points, k: int = DEFAULT_NEIGHBORS, timestamp: float = 0.0, eps: float = PLANE_EPS) -> Scan:
    """Sample covariance of each point's k nearest neighbours (itself excluded), plane-regularized."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if k < 4:
        raise ValueError(f"neighbour count k={k} must be >= 4")
    if len(points) < k + 1:
        raise ValueError(f"need at least k+1={k + 1} points, got {len(points)}")
    tree = cKDTree(points)
    _, idx = tree.query(points, k=k + 1)
    # column 0 is normally the point itself; duplicates may reorder, so drop by identity
    nbrs = np.where(idx[:, :1] == np.arange(len(points))[:, None], idx[:, 1:], idx[:, :-1])
    nb_pts = points[nbrs]
    centered = nb_pts - nb_pts.mean(axis=1, keepdims=True)
    raw = np.einsum("nki,nkj->nij", centered, centered) / (k - 1)
    return Scan(points, regularize_plane(raw, eps), timestamp)


@nb.njit(cache=True)
def _pack(ix, iy, iz):
    if abs(ix) >= _KEY_OFFSET or abs(iy) >= _KEY_OFFSET or abs(iz) >= _KEY_OFFSET:
        return -1
    return ((ix + _KEY_OFFSET) << (2 * _KEY_BITS)) | ((iy + _KEY_OFFSET) << _KEY_BITS) | (iz + _KEY_OFFSET)


@nb.njit(cache=True)
def _slot(key, bits):
    # splitmix64 finalizer; packed keys are too regular for plain multiplicative hashing
    h = np.uint64(key)
    h = (h ^ (h >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    h = (h ^ (h >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    h = h ^ (h >> np.uint64(31))
    return np.int64(h >> np.uint64(64 - bits))


@nb.njit(cache=True)
def _build_table(keys, bits):
    cap = 1 << bits
    tkeys = np.full(cap, -1, dtype=np.int64)
    tvals = np.full(cap, -1, dtype=np.int64)
    mask = cap - 1
    for i in range(len(keys)):
        s = _slot(keys[i], bits)
        while tkeys[s] != -1:
            s = (s + 1) & mask
        tkeys[s] = keys[i]
        tvals[s] = i
    return tkeys, tvals


@nb.njit(cache=True, inline="always")
def _lookup(tkeys, tvals, off, bits, key):
    """Cell index for ``key`` in the table starting at ``off``; -1 if absent."""
    if key < 0:
        return -1
    mask = (1 << bits) - 1
    s = _slot(key, bits)
    while True:
        k = tkeys[off + s]
        if k == key:
            return tvals[off + s]
        if k == -1:
            return -1
        s = (s + 1) & mask


@nb.njit(cache=True, error_model="numpy")
def _find_cell(q0, q1, q2, tkeys, tvals, off, bits, inv_res, cell_means):
    """Containing voxel if occupied, else the nearest occupied of the 26 neighbours."""
    ix = np.int64(np.floor(q0 * inv_res))
    iy = np.int64(np.floor(q1 * inv_res))
    iz = np.int64(np.floor(q2 * inv_res))
    c = _lookup(tkeys, tvals, off, bits, _pack(ix, iy, iz))
    if c >= 0:
        return c
    best = -1
    best_d = np.inf
    for dx in range(-1, 2):
        for dy in range(-1, 2):
            for dz in range(-1, 2):
                if dx == 0 and dy == 0 and dz == 0:
                    continue
                c = _lookup(tkeys, tvals, off, bits, _pack(ix + dx, iy + dy, iz + dz))
                if c >= 0:
                    e0 = cell_means[c, 0] - q0
                    e1 = cell_means[c, 1] - q1
                    e2 = cell_means[c, 2] - q2
                    d = e0 * e0 + e1 * e1 + e2 * e2
                    if d < best_d:
                        best_d = d
                        best = c
    return best


@nb.njit(cache=True)
def _find_many(queries, tkeys, tvals, off, bits, inv_res, cell_means):
    out = np.empty(len(queries), dtype=np.int64)
    for i in range(len(queries)):
        out[i] = _find_cell(queries[i, 0], queries[i, 1], queries[i, 2], tkeys, tvals, off, bits, inv_res, cell_means)
    return out


@nb.njit(cache=True)
def _occupied_count(queries, tkeys, tvals, off, bits, inv_res):
    n = 0
    for i in range(len(queries)):
        ix = np.int64(np.floor(queries[i, 0] * inv_res))
        iy = np.int64(np.floor(queries[i, 1] * inv_res))
        iz = np.int64(np.floor(queries[i, 2] * inv_res))
        if _lookup(tkeys, tvals, off, bits, _pack(ix, iy, iz)) >= 0:
            n += 1
    return n


def voxel_indices(points: np.ndarray, resolution: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=float) / resolution).astype(np.int64)


def pack_keys(idx: np.ndarray) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    return ((idx[:, 0] + _KEY_OFFSET) << (2 * _KEY_BITS)) | ((idx[:, 1] + _KEY_OFFSET) << _KEY_BITS) | (idx[:, 2] + _KEY_OFFSET)


class VoxelMap:
    """Immutable voxel hash of aggregated Gaussian points.

    Each occupied cell stores the mean of its members' means, the mean of
    their covariances and the member count. Cell lookup goes through an
    open-addressing table so numba kernels can query it directly.
    """

    def __init__(self, resolution: float, indices: np.ndarray, means: np.ndarray, covs: np.ndarray, counts: np.ndarray):
        if not resolution > 0:
            raise ValueError("voxel resolution must be positive")
        self.resolution = float(resolution)
        self.inv_resolution = 1.0 / self.resolution
        self.indices = np.ascontiguousarray(indices, dtype=np.int64).reshape(-1, 3)
        self.means = np.ascontiguousarray(means, dtype=float).reshape(-1, 3)
        self.covs = np.ascontiguousarray(covs, dtype=float).reshape(-1, 3, 3)
        self.counts = np.ascontiguousarray(counts, dtype=np.int64)
        if np.any(np.abs(self.indices) >= _KEY_OFFSET):
            raise ValueError("voxel index out of the packable range; use a coarser resolution")
        self.bits = max(4, int(np.ceil(np.log2(max(len(self.means), 1) * 4 + 1))))
        self.table_keys, self.table_vals = _build_table(pack_keys(self.indices), self.bits)
        for a in (self.indices, self.means, self.covs, self.counts, self.table_keys, self.table_vals):
            a.flags.writeable = False

    def __len__(self) -> int:
        return len(self.means)

    @property
    def cells(self) -> dict[tuple[int, int, int], tuple[GaussianPoint, int]]:
        return {
            tuple(int(v) for v in ix): (GaussianPoint(m, c), int(n))
            for ix, m, c, n in zip(self.indices, self.means, self.covs, self.counts)
        }

    def lookup(self, index) -> int:
        ix, iy, iz = (int(v) for v in index)
        return int(_lookup(self.table_keys, self.table_vals, 0, self.bits, _pack(ix, iy, iz)))

    def find_cells(self, queries: np.ndarray) -> np.ndarray:
        q = np.ascontiguousarray(np.asarray(queries, dtype=float).reshape(-1, 3))
        return _find_many(q, self.table_keys, self.table_vals, 0, self.bits, self.inv_resolution, self.means)

    def nbytes(self) -> int:
        return sum(a.nbytes for a in (self.indices, self.means, self.covs, self.counts, self.table_keys, self.table_vals))


def build_voxel_map(scan: Scan, resolution: float) -> VoxelMap:
    if not resolution > 0:
        raise ValueError("voxel resolution must be positive")
    if len(scan) == 0:
        return VoxelMap(resolution, np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros(0))
    idx = voxel_indices(scan.means, resolution)
    uniq, inverse, counts = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    means = np.zeros((len(uniq), 3))
    covs = np.zeros((len(uniq), 3, 3))
    np.add.at(means, inverse, scan.means)
    np.add.at(covs, inverse, scan.covs)
    means /= counts[:, None]
    covs /= counts[:, None, None]
    return VoxelMap(resolution, uniq, means, covs, counts)


def find_correspondence(vmap: VoxelMap, query) -> GaussianPoint | None:
    c = int(vmap.find_cells(np.asarray(query, dtype=float).reshape(1, 3))[0])
    if c < 0:
        return None
    return GaussianPoint(vmap.means[c], vmap.covs[c])


def overlap_rate(scan: Scan, rel_pose: Pose, vmap: VoxelMap) -> float:
    """Fraction of scan points that land in an occupied voxel after ``rel_pose``."""
    if len(scan) == 0:
        raise ValueError("overlap of an empty scan is undefined")
    q = np.ascontiguousarray(scan.means @ rel_pose.rotation.T + rel_pose.translation)
    n = _occupied_count(q, vmap.table_keys, vmap.table_vals, 0, vmap.bits, vmap.inv_resolution)
    return n / len(scan)


def write_ply(path, points) -> None:
    """ASCII PLY with x, y, z float vertex properties, written at full precision."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(pts)}\n"
        "property double x\nproperty double y\nproperty double z\nend_header\n"
    )
    body = "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist())
    Path(path).write_text(header + body)


def read_ply(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = None
    props: list[str] = []
    in_vertex = False
    end = None
    for i, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise ValueError(f"{path}: only ASCII PLY is supported")
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            props.append(parts[-1])
        elif parts[0] == "end_header":
            end = i
            break
    if n is None or end is None:
        raise ValueError(f"{path}: malformed PLY header")
    try:
        cols = [props.index(a) for a in "xyz"]
    except ValueError as exc:
        raise ValueError(f"{path}: vertex element lacks x/y/z") from exc
    if n == 0:
        return np.zeros((0, 3))
    data = np.array([[float(v) for v in ln.split()] for ln in lines[end + 1 : end + 1 + n]])
    return data[:, cols].reshape(-1, 3)
