"""Distribution-to-distribution (GICP) registration likelihood and its Gauss-Newton solve.

For a scan point ``N(mu, C)`` and its voxel correspondence ``N(mu', C')``
under relative pose ``T = (R, t)``:

    e     = mu' - (R mu + t)
    Omega = (C' + R C R^T)^-1
    log p = -sum_j e_j^T Omega_j e_j

The Jacobian is taken with respect to a right perturbation ``T exp(xi)``:
``J = [-R, R [mu]x]``. We accumulate ``H = sum J^T Omega J`` and
``b = -sum J^T Omega e`` so that ``xi = H^-1 b`` is an ascent step on the
log-likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .pointcloud import Scan, VoxelMap, _find_cell
from .se3 import Pose, inverse, compose

DEFAULT_STEP_CLAMP = 1.0
_DET_TOL = 1e-300


class GICPNumericalError(ArithmeticError):
    pass


@dataclass
class LinearizedObjective:
    log_likelihood: float
    H: np.ndarray
    b: np.ndarray
    matched_count: int


@nb.njit(cache=True, error_model="numpy", fastmath={"contract", "arcp", "nsz"})
def _accumulate(means, covs, R, t, tkeys, tvals, off, bits, inv_res, cell_means, cell_covs, want_lin, H, b):
    """Add one keyframe's contribution. Returns (log_lik, matched, bad_index)."""
    ll = 0.0
    matched = 0
    n = means.shape[0]
    q = np.empty(3)
    e = np.empty(3)
    C = np.empty((3, 3))
    RC = np.empty((3, 3))
    W = np.empty((3, 3))
    A = np.empty((3, 3))
    AM = np.empty((3, 3))
    M = np.zeros((3, 3))
    for j in range(n):
        m0 = means[j, 0]
        m1 = means[j, 1]
        m2 = means[j, 2]
        for r in range(3):
            q[r] = R[r, 0] * m0 + R[r, 1] * m1 + R[r, 2] * m2 + t[r]
        c = _find_cell(q[0], q[1], q[2], tkeys, tvals, off, bits, inv_res, cell_means)
        if c < 0:
            continue
        for r in range(3):
            e[r] = cell_means[c, r] - q[r]
        # C = C' + R Sigma R^T
        for r in range(3):
            for s in range(3):
                RC[r, s] = R[r, 0] * covs[j, 0, s] + R[r, 1] * covs[j, 1, s] + R[r, 2] * covs[j, 2, s]
        for r in range(3):
            for s in range(3):
                C[r, s] = cell_covs[c, r, s] + RC[r, 0] * R[s, 0] + RC[r, 1] * R[s, 1] + RC[r, 2] * R[s, 2]
        # symmetric inverse via cofactors
        a00 = C[1, 1] * C[2, 2] - C[1, 2] * C[2, 1]
        a01 = C[0, 2] * C[2, 1] - C[0, 1] * C[2, 2]
        a02 = C[0, 1] * C[1, 2] - C[0, 2] * C[1, 1]
        det = C[0, 0] * a00 + C[1, 0] * a01 + C[2, 0] * a02
        if not (det > _DET_TOL) or not np.isfinite(det):
            return ll, matched, j
        a11 = C[0, 0] * C[2, 2] - C[0, 2] * C[2, 0]
        a12 = C[0, 2] * C[1, 0] - C[0, 0] * C[1, 2]
        a22 = C[0, 0] * C[1, 1] - C[0, 1] * C[1, 0]
        a10 = C[1, 2] * C[2, 0] - C[1, 0] * C[2, 2]
        a20 = C[1, 0] * C[2, 1] - C[1, 1] * C[2, 0]
        a21 = C[0, 1] * C[2, 0] - C[0, 0] * C[2, 1]
        inv_det = 1.0 / det
        W[0, 0] = a00 * inv_det
        W[1, 1] = a11 * inv_det
        W[2, 2] = a22 * inv_det
        W[0, 1] = W[1, 0] = 0.5 * (a01 + a10) * inv_det
        W[0, 2] = W[2, 0] = 0.5 * (a02 + a20) * inv_det
        W[1, 2] = W[2, 1] = 0.5 * (a12 + a21) * inv_det
        We0 = W[0, 0] * e[0] + W[0, 1] * e[1] + W[0, 2] * e[2]
        We1 = W[1, 0] * e[0] + W[1, 1] * e[1] + W[1, 2] * e[2]
        We2 = W[2, 0] * e[0] + W[2, 1] * e[1] + W[2, 2] * e[2]
        ll -= e[0] * We0 + e[1] * We1 + e[2] * We2
        matched += 1
        if want_lin:
            # A = R^T W R, g = R^T W e; J^T W J = [[A, -A M], [M A, -M A M]], b = [g; mu x g]
            for r in range(3):
                for s in range(3):
                    RC[r, s] = W[r, 0] * R[0, s] + W[r, 1] * R[1, s] + W[r, 2] * R[2, s]
            for r in range(3):
                for s in range(3):
                    A[r, s] = R[0, r] * RC[0, s] + R[1, r] * RC[1, s] + R[2, r] * RC[2, s]
            g0 = R[0, 0] * We0 + R[1, 0] * We1 + R[2, 0] * We2
            g1 = R[0, 1] * We0 + R[1, 1] * We1 + R[2, 1] * We2
            g2 = R[0, 2] * We0 + R[1, 2] * We1 + R[2, 2] * We2
            M[0, 1] = -m2
            M[0, 2] = m1
            M[1, 0] = m2
            M[1, 2] = -m0
            M[2, 0] = -m1
            M[2, 1] = m0
            for r in range(3):
                for s in range(3):
                    AM[r, s] = A[r, 0] * M[0, s] + A[r, 1] * M[1, s] + A[r, 2] * M[2, s]
            for r in range(3):
                for s in range(3):
                    mam = M[r, 0] * AM[0, s] + M[r, 1] * AM[1, s] + M[r, 2] * AM[2, s]
                    H[r, s] += A[r, s]
                    H[r, 3 + s] -= AM[r, s]
                    H[3 + s, r] -= AM[r, s]
                    H[3 + r, 3 + s] -= mam
            b[0] += g0
            b[1] += g1
            b[2] += g2
            b[3] += m1 * g2 - m2 * g1
            b[4] += m2 * g0 - m0 * g2
            b[5] += m0 * g1 - m1 * g0
    return ll, matched, -1


@nb.njit(cache=True)
def _solve_damped(H, b, damping):
    """Solve (H + damping I) x = b by Cholesky. Returns (x, ok)."""
    n = 6
    L = np.zeros((n, n))
    x = np.zeros(n)
    scale = 0.0
    for i in range(n):
        scale = max(scale, abs(H[i, i]) + damping)
    tol = 1e-14 * max(scale, 1e-300)
    for i in range(n):
        for j in range(i + 1):
            s = H[i, j] + (damping if i == j else 0.0)
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if not (s > tol):
                    return x, False
                L[i, i] = np.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    y = np.zeros(n)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    for i in range(n - 1, -1, -1):
        s = y[i]
        for k in range(i + 1, n):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return x, True


@nb.njit(cache=True)
def _clamp(xi, limit):
    nrm = np.sqrt(np.sum(xi * xi))
    if limit > 0 and nrm > limit:
        return xi * (limit / nrm), True
    return xi, False


def default_damping(H: np.ndarray) -> float:
    return 1e-6 * float(np.trace(H)) / 6.0


def pairwise_log_likelihood(scan: Scan, keyframe_map: VoxelMap, rel_pose: Pose, with_linearization: bool = True) -> LinearizedObjective:
    """GICP log-likelihood of ``scan`` against one keyframe voxel map.

    ``rel_pose`` maps scan coordinates into the keyframe frame. Points
    without a correspondence are skipped.
    """
    if len(scan) == 0:
        raise ValueError("empty scan")
    H = np.zeros((6, 6))
    b = np.zeros(6)
    ll, matched, bad = _accumulate(
        scan.means, scan.covs, rel_pose.rotation, rel_pose.translation,
        keyframe_map.table_keys, keyframe_map.table_vals, 0, keyframe_map.bits,
        keyframe_map.inv_resolution, keyframe_map.means, keyframe_map.covs,
        bool(with_linearization), H, b,
    )
    if bad >= 0:
        raise GICPNumericalError(f"combined covariance of scan point {bad} is not positive definite")
    return LinearizedObjective(float(ll), H, b, int(matched))


def point_residual(mean, target_mean, rel_pose: Pose) -> np.ndarray:
    """e = mu' - T mu for a single correspondence."""
    return np.asarray(target_mean, dtype=float) - (rel_pose.rotation @ np.asarray(mean, dtype=float) + rel_pose.translation)


def point_jacobian(mean, rel_pose: Pose) -> np.ndarray:
    """de/dxi (3x6) at xi = 0 for the perturbation ``rel_pose @ exp(xi)``, columns ordered (rho, phi)."""
    m = np.asarray(mean, dtype=float)
    R = rel_pose.rotation
    skew = np.array([[0.0, -m[2], m[1]], [m[2], 0.0, -m[0]], [-m[1], m[0], 0.0]])
    return np.hstack([-R, R @ skew])


def relative_pose(keyframe_pose: Pose, current_pose: Pose) -> Pose:
    return compose(inverse(keyframe_pose), current_pose)


def gauss_newton_step(obj: LinearizedObjective, damping: float | None = None) -> np.ndarray:
    """Damped solve ``(H + damping I)^-1 b``; ``damping=None`` picks 1e-6 trace(H)/6."""
    if damping is None:
        damping = default_damping(obj.H)
    if damping < 0:
        raise ValueError("damping must be non-negative")
    if not np.any(obj.b):
        return np.zeros(6)
    x, ok = _solve_damped(np.ascontiguousarray(obj.H, dtype=float), np.asarray(obj.b, dtype=float), float(damping))
    if not ok:
        raise GICPNumericalError("Gauss-Newton system is singular after damping")
    return x


def clamp_step(xi: np.ndarray, limit: float = DEFAULT_STEP_CLAMP) -> np.ndarray:
    return _clamp(np.asarray(xi, dtype=float), float(limit))[0]


def register(scan: Scan, keyframe_map: VoxelMap, initial: Pose, iterations: int = 20,
             damping: float | None = None, step_clamp: float = DEFAULT_STEP_CLAMP, tol: float = 1e-10) -> Pose:
    """Iterate Gauss-Newton from ``initial``; returns the refined relative pose."""
    from .se3 import right_apply

    pose = initial
    for _ in range(iterations):
        obj = pairwise_log_likelihood(scan, keyframe_map, pose)
        if obj.matched_count == 0:
            break
        xi = clamp_step(gauss_newton_step(obj, damping), step_clamp)
        pose = right_apply(pose, xi)
        if np.linalg.norm(xi) < tol:
            break
    return pose
