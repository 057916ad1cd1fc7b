"""Gradient-guided Monte Carlo SLAM filter.

One frame runs: predict -> (per particle) neighbour selection, loop check,
Gauss-Newton correction with backward propagation into keyframes,
likelihood -> weighting -> dead-particle pruning -> keyframe insertion ->
representative extraction.

The per-particle work is a numba ``prange`` kernel. Each particle touches
only its own rows and reads the shared keyframe maps, so results do not
depend on the number of worker threads.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numba as nb
import numpy as np
from scipy.special import logsumexp

from . import rng as rngmod
from .gicp import _accumulate, _clamp, _solve_damped
from .particles import KeyframeStore, Particle, ParticleSet, extend_all, pose_to_tum
from .pointcloud import Scan, build_voxel_map, overlap_rate
from .se3 import Pose, _exp, _log, compose, inverse, orthonormalize

log = logging.getLogger(__name__)

STATUS_NONE = -1
STATUS_CORRECTED = 0
STATUS_SINGULAR = 1
STATUS_NUMERICAL = 2


class FilterDegeneracyError(RuntimeError):
    """No live particle remains."""


class FilterNumericalError(ArithmeticError):
    pass


@dataclass
class MotionDelta:
    delta: Pose
    covariance: np.ndarray

    def __post_init__(self):
        self.covariance = np.asarray(self.covariance, dtype=float).reshape(6, 6)


@dataclass
class FilterConfig:
    particle_count: int = 1000
    neighbor_count: int = 3
    loop_recency_gap: int = 10
    overlap_threshold: float = 0.70
    likelihood_floor: float = 1e-16
    posterior_floor: float = 1e-8
    gn_damping: float | None = None
    gn_iterations: int = 1
    step_clamp: float = 1.0
    voxel_resolution: float = 0.5
    rng_seed: int = 0
    # weighting only; 1.0 / 0.0 reproduce the plain GICP log-likelihood
    likelihood_scale: float = 1.0
    unmatched_log_likelihood: float = 0.0
    covariance_neighbors: int = 10
    reorthonormalize_every: int = 1000
    # which neighbours drive the Gauss-Newton correction: "old" (loop keyframes only) or "all"
    correction_keyframes: str = "old"

    def validate(self, prefix: str = "") -> None:
        def bad(name, why):
            raise ValueError(f"{prefix}{name}: {why}")

        if self.particle_count < 1:
            bad("particle_count", "must be >= 1")
        if self.neighbor_count < 1:
            bad("neighbor_count", "must be >= 1")
        if self.loop_recency_gap < 1:
            bad("loop_recency_gap", "must be >= 1")
        if not 0.0 <= self.overlap_threshold <= 1.0:
            bad("overlap_threshold", f"{self.overlap_threshold} not in [0, 1]")
        if not 0.0 <= self.likelihood_floor < 1.0:
            bad("likelihood_floor", "must be in [0, 1)")
        if not 0.0 <= self.posterior_floor < 1.0:
            bad("posterior_floor", "must be in [0, 1)")
        if self.gn_damping is not None and self.gn_damping < 0:
            bad("gn_damping", "must be >= 0")
        if self.gn_iterations < 1:
            bad("gn_iterations", "must be >= 1")
        if not self.step_clamp > 0:
            bad("step_clamp", "must be > 0")
        if not self.voxel_resolution > 0:
            bad("voxel_resolution", "must be > 0")
        if not self.likelihood_scale > 0:
            bad("likelihood_scale", "must be > 0")
        if self.unmatched_log_likelihood > 0:
            bad("unmatched_log_likelihood", "must be <= 0")
        if self.covariance_neighbors < 4:
            bad("covariance_neighbors", "must be >= 4")
        if self.correction_keyframes not in ("old", "all"):
            bad("correction_keyframes", "must be 'old' or 'all'")

    @classmethod
    def from_dict(cls, d: dict, prefix: str = "") -> "FilterConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"{prefix}{sorted(extra)[0]}: unknown field")
        cfg = cls(**d)
        cfg.validate(prefix)
        return cfg


@dataclass
class FrameReport:
    frame: int
    timestamp: float
    representative: int
    representative_pose: list[float]
    live_count: int
    loop_count: int
    corrected_count: int
    respawned: int
    keyframe_inserted: bool
    keyframe_count: int
    vertical_dispersion: float | None
    elapsed_s: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SlamState:
    store: KeyframeStore
    particles: ParticleSet
    odom_pose: Pose
    frame: int = 0

    @classmethod
    def initialize(cls, config: FilterConfig, initial: Pose | None = None) -> "SlamState":
        initial = initial or Pose.identity()
        return cls(KeyframeStore(), ParticleSet(config.particle_count, initial, config.rng_seed), initial)


def set_workers(n: int) -> int:
    """Set the numba thread count (clamped to what is available); returns the count in use."""
    n = max(1, min(int(n), nb.config.NUMBA_NUM_THREADS))
    nb.set_num_threads(n)
    return n


# --------------------------------------------------------------------------- prediction


def noise_factor(cov: np.ndarray) -> np.ndarray:
    """Matrix L with L L^T = cov. Cholesky when possible, eigen square root for singular PSD input."""
    cov = np.asarray(cov, dtype=float)
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise FilterNumericalError("motion covariance is not symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(cov)
        tol = 1e-12 * max(1.0, float(np.abs(w).max()))
        if w.min() < -tol:
            raise FilterNumericalError("motion covariance is not positive semidefinite") from None
        return V * np.sqrt(np.clip(w, 0.0, None))


@nb.njit(parallel=True, cache=True)
def _predict_kernel(rot, trans, dR, dt, noise):
    for i in nb.prange(rot.shape[0]):
        R = rot[i] @ dR
        t = rot[i] @ dt + trans[i]
        nR, nt = _exp(noise[i])
        rot[i] = R @ nR
        trans[i] = R @ nt + t


def predict(particles: ParticleSet, motion: MotionDelta, vertical_dispersion: float | None = None, frame: int = 0) -> None:
    """T_i <- T_i dT exp(delta_i), delta_i ~ N(0, cov); optional vertical random walk."""
    L = noise_factor(motion.covariance)
    n = len(particles)
    z = rngmod.stream(particles.rng_seed, "predict", frame).standard_normal((n, 6))
    noise = np.ascontiguousarray(z @ L.T)
    _predict_kernel(particles.rot, particles.trans, motion.delta.rotation.copy(), motion.delta.translation.copy(), noise)
    if vertical_dispersion:
        dz = rngmod.stream(particles.rng_seed, "vertical", frame).standard_normal(n)
        particles.trans[:, 2] += float(vertical_dispersion) * dz


# --------------------------------------------------------------------------- neighbours, loops, paths


@nb.njit(cache=True)
def _select_neighbors(cur_t, kf_t, count):
    K = kf_t.shape[0]
    d = np.empty(K)
    for k in range(K):
        a = kf_t[k, 0] - cur_t[0]
        b = kf_t[k, 1] - cur_t[1]
        c = kf_t[k, 2] - cur_t[2]
        d[k] = a * a + b * b + c * c
    order = np.argsort(d, kind="mergesort")
    return order[: min(count, K)]


@nb.njit(cache=True)
def _is_loop(nbrs, latest, gap):
    for k in nbrs:
        if k <= latest - gap:
            return True
    return False


@nb.njit(cache=True)
def _old_only(nbrs, latest, gap):
    n = 0
    for k in nbrs:
        if k <= latest - gap:
            n += 1
    out = np.empty(n, dtype=nbrs.dtype)
    n = 0
    for k in nbrs:
        if k <= latest - gap:
            out[n] = k
            n += 1
    return out


def select_neighbor_keyframes(particle: Particle, store: KeyframeStore, count: int) -> list[int]:
    if len(store) == 0:
        raise ValueError("keyframe store is empty")
    kf_t = np.array([p.translation for p in particle.keyframe_poses], dtype=float).reshape(-1, 3)
    return [int(k) for k in _select_neighbors(particle.current_pose.translation, kf_t, int(count))]


def detect_loop(neighbors, latest_keyframe_id: int, recency_gap: int) -> bool:
    return any(int(k) <= latest_keyframe_id - recency_gap for k in neighbors)


def path_length(store: KeyframeStore, from_time: float, to_time: float) -> float:
    """Odometry travel distance between two times."""
    if from_time > to_time:
        raise ValueError("from_time must not exceed to_time")
    return store.cumulative_path(to_time) - store.cumulative_path(from_time)


@nb.njit(cache=True)
def _discount(kf_paths, oldest, cur_path):
    """Propagation weights d(t_k, t_o) / d(t, t_o) for keyframes k >= oldest; -1 marks untouched."""
    K = kf_paths.shape[0]
    w = np.full(K, -1.0)
    total = cur_path - kf_paths[oldest]
    for k in range(oldest, K):
        if total > 0:
            v = (kf_paths[k] - kf_paths[oldest]) / total
            w[k] = min(max(v, 0.0), 1.0)
        else:
            w[k] = 0.0
    return w


def discount_weights(store: KeyframeStore, oldest: int, current_time: float) -> np.ndarray:
    """Per-keyframe propagation weight; NaN for keyframes older than ``oldest``."""
    w = _discount(store.keyframe_paths(), int(oldest), store.cumulative_path(current_time))
    return np.where(w < 0, np.nan, w)


# --------------------------------------------------------------------------- correction and likelihood


@nb.njit(cache=True)
def _linearize(means, covs, R, t, kf_rot, kf_trans, nbrs, tkeys, tvals, toff, tbits, inv_res, cmeans, ccovs, want_lin):
    H = np.zeros((6, 6))
    b = np.zeros(6)
    ll = 0.0
    matched = 0
    for k in nbrs:
        Rk = kf_rot[k]
        Rrel = Rk.T @ R
        trel = Rk.T @ (t - kf_trans[k])
        l, m, bad = _accumulate(means, covs, Rrel, trel, tkeys, tvals, toff[k], tbits[k], inv_res[k], cmeans, ccovs, want_lin, H, b)
        if bad >= 0:
            return H, b, ll, matched, bad
        ll += l
        matched += m
    return H, b, ll, matched, -1


@nb.njit(cache=True)
def _correct_particle(means, covs, rot_i, trans_i, kf_rot_i, kf_trans_i, nbrs, gn_nbrs, kf_paths, cur_path,
                      tkeys, tvals, toff, tbits, inv_res, cmeans, ccovs, gn_iters, damping, clamp):
    """Gauss-Newton update of the current pose against ``gn_nbrs``, then propagate
    into keyframes from the oldest of ``nbrs`` to the latest.

    Returns (status, psi). Poses are modified in place only on success.
    """
    R0 = rot_i.copy()
    t0 = trans_i.copy()
    R = R0.copy()
    t = t0.copy()
    psi = np.zeros(6)
    for _ in range(gn_iters):
        H, b, ll, matched, bad = _linearize(means, covs, R, t, kf_rot_i, kf_trans_i, gn_nbrs, tkeys, tvals, toff, tbits,
                                            inv_res, cmeans, ccovs, True)
        if bad >= 0:
            return STATUS_NUMERICAL, psi
        if matched == 0:
            return STATUS_SINGULAR, psi
        lam = damping
        if lam < 0:
            lam = 1e-6 * np.trace(H) / 6.0
        x, ok = _solve_damped(H, b, lam)
        if not ok:
            return STATUS_SINGULAR, psi
        x, _hit = _clamp(x, clamp)
        R, t = _exp_right(R, t, x)
    # total update as a single right increment
    dR = R0.T @ R
    dt = R0.T @ (t - t0)
    psi, ok = _log(dR, dt)
    if not ok:
        return STATUS_SINGULAR, np.zeros(6)
    rot_i[:, :] = R
    trans_i[:] = t
    oldest = nbrs[0]
    for k in nbrs:
        if k < oldest:
            oldest = k
    w = _discount(kf_paths, oldest, cur_path)
    for k in range(oldest, kf_paths.shape[0]):
        if w[k] > 0:
            Rk, tk = _exp_right(kf_rot_i[k], kf_trans_i[k], w[k] * psi)
            kf_rot_i[k] = Rk
            kf_trans_i[k] = tk
    return STATUS_CORRECTED, psi


@nb.njit(cache=True)
def _exp_right(R, t, xi):
    dR, dt = _exp(xi)
    return R @ dR, R @ dt + t


@nb.njit(parallel=True, cache=True)
def _frame_kernel(means, covs, rot, trans, kf_rot, kf_trans, kf_paths, cur_path,
                  tkeys, tvals, toff, tbits, inv_res, cmeans, ccovs,
                  neighbor_count, gap, old_only, gn_iters, damping, clamp,
                  out_ll, out_unmatched, out_loop, out_status):
    N = rot.shape[0]
    K = kf_trans.shape[1]
    n_pts = means.shape[0]
    for i in nb.prange(N):
        nbrs = _select_neighbors(trans[i], kf_trans[i], neighbor_count)
        loop = _is_loop(nbrs, K - 1, gap)
        out_loop[i] = loop
        status = STATUS_NONE
        if loop:
            gn_nbrs = _old_only(nbrs, K - 1, gap) if old_only else nbrs
            status, _psi = _correct_particle(means, covs, rot[i], trans[i], kf_rot[i], kf_trans[i], nbrs, gn_nbrs, kf_paths,
                                             cur_path, tkeys, tvals, toff, tbits, inv_res, cmeans, ccovs,
                                             gn_iters, damping, clamp)
        _H, _b, ll, matched, bad = _linearize(means, covs, rot[i], trans[i], kf_rot[i], kf_trans[i], nbrs, tkeys, tvals,
                                              toff, tbits, inv_res, cmeans, ccovs, False)
        if bad >= 0 or status == STATUS_NUMERICAL:
            out_ll[i] = -np.inf
            status = STATUS_NUMERICAL
        else:
            out_ll[i] = ll
        out_unmatched[i] = nbrs.shape[0] * n_pts - matched
        out_status[i] = status


def _particle_arrays(particle: Particle):
    kf_rot = np.ascontiguousarray([p.rotation for p in particle.keyframe_poses], dtype=float).reshape(-1, 3, 3)
    kf_trans = np.ascontiguousarray([p.translation for p in particle.keyframe_poses], dtype=float).reshape(-1, 3)
    return particle.current_pose.rotation.copy(), particle.current_pose.translation.copy(), kf_rot, kf_trans


def particle_log_likelihood(scan: Scan, particle: Particle, store: KeyframeStore, neighbors) -> float:
    """Sum of pairwise GICP log-likelihoods against the given neighbour keyframes."""
    nbrs = np.asarray(list(neighbors), dtype=np.int64)
    if len(nbrs) == 0:
        raise ValueError("no neighbour keyframes")
    if nbrs.min() < 0 or nbrs.max() >= len(store):
        raise ValueError("neighbour index out of range")
    pk = store.packed
    R, t, kf_rot, kf_trans = _particle_arrays(particle)
    _H, _b, ll, _m, bad = _linearize(scan.means, scan.covs, R, t, kf_rot, kf_trans, nbrs, pk.table_keys, pk.table_vals,
                                     pk.table_offsets, pk.table_bits, pk.inv_res, pk.cell_means, pk.cell_covs, False)
    if bad >= 0:
        from .gicp import GICPNumericalError

        raise GICPNumericalError(f"combined covariance of scan point {bad} is not positive definite")
    return float(ll)


def correct(particle: Particle, scan: Scan, store: KeyframeStore, config: FilterConfig,
            current_time: float | None = None) -> np.ndarray | None:
    """Loop-triggered two-step update of one particle, in place.

    Returns the applied current-pose increment, or None when no loop was
    detected or the Gauss-Newton system could not be solved.
    """
    nbrs = np.asarray(select_neighbor_keyframes(particle, store, config.neighbor_count), dtype=np.int64)
    if not detect_loop(nbrs, len(store) - 1, config.loop_recency_gap):
        return None
    current_time = scan.timestamp if current_time is None else current_time
    pk = store.packed
    R, t, kf_rot, kf_trans = _particle_arrays(particle)
    damping = -1.0 if config.gn_damping is None else float(config.gn_damping)
    gn_nbrs = _old_only(nbrs, len(store) - 1, config.loop_recency_gap) if config.correction_keyframes == "old" else nbrs
    status, psi = _correct_particle(scan.means, scan.covs, R, t, kf_rot, kf_trans, nbrs, gn_nbrs, store.keyframe_paths(),
                                    store.cumulative_path(current_time), pk.table_keys, pk.table_vals, pk.table_offsets,
                                    pk.table_bits, pk.inv_res, pk.cell_means, pk.cell_covs, int(config.gn_iterations),
                                    damping, float(config.step_clamp))
    if status == STATUS_NUMERICAL:
        from .gicp import GICPNumericalError

        raise GICPNumericalError("non-positive-definite covariance during correction")
    if status != STATUS_CORRECTED:
        log.debug("particle left uncorrected (singular Gauss-Newton system)")
        return None
    particle.current_pose = Pose(R, t)
    particle.keyframe_poses = [Pose(r, tt) for r, tt in zip(kf_rot, kf_trans)]
    return psi


def propagate_to_keyframes(particle: Particle, store: KeyframeStore, psi, oldest: int, current_time: float) -> None:
    """Right-apply ``w_k * psi`` to keyframes from ``oldest`` on; older keyframes are untouched."""
    w = discount_weights(store, oldest, current_time)
    psi = np.asarray(psi, dtype=float)
    poses = list(particle.keyframe_poses)
    for k in range(oldest, len(poses)):
        if w[k] > 0:
            R, t = _exp_right(poses[k].rotation, poses[k].translation, w[k] * psi)
            poses[k] = Pose(R, t)
    particle.keyframe_poses = poses


# --------------------------------------------------------------------------- weighting, pruning


def update_weights(particles: ParticleSet, per_particle_log_likelihood) -> None:
    ll = np.asarray(per_particle_log_likelihood, dtype=float)
    if ll.shape != (len(particles),):
        raise ValueError("one log-likelihood per particle required")
    live = particles.live & np.isfinite(ll) & ~np.isnan(ll)
    particles.frame_log_likelihood[:] = np.where(np.isnan(ll), -np.inf, ll)
    particles.cum_log_likelihood[live] += ll[live]
    if not live.any():
        particles.log_weight[:] = -np.inf
        raise FilterDegeneracyError("all particles are dead")
    _normalize(particles, live)


def _normalize(particles: ParticleSet, live: np.ndarray) -> None:
    cum = particles.cum_log_likelihood
    particles.log_weight[:] = -np.inf
    particles.log_weight[live] = cum[live] - logsumexp(cum[live])


def prune_and_respawn(particles: ParticleSet, config: FilterConfig, frame: int = 0) -> np.ndarray:
    """Replace unusable particles by clones of survivors drawn by weight.

    A particle is unusable when it is dead, its frame likelihood is below
    ``likelihood_floor`` relative to the best particle of the frame, or its
    normalized posterior is below ``posterior_floor``. Returns the indices
    that were respawned.
    """
    live = particles.live
    if not live.any():
        raise FilterDegeneracyError("all particles are dead")
    fll = particles.frame_log_likelihood
    rel = np.full(len(particles), -np.inf)
    rel[live] = fll[live] - np.max(fll[live])
    w = particles.weights()
    unusable = ~live
    if config.likelihood_floor > 0:
        unusable |= rel < np.log(config.likelihood_floor)
    if config.posterior_floor > 0:
        unusable |= w < config.posterior_floor
    dead = np.flatnonzero(unusable)
    if len(dead) == 0:
        return dead
    survivors = np.flatnonzero(~unusable)
    if len(survivors) == 0:
        survivors = np.array([int(np.argmax(particles.log_weight))])
        dead = dead[dead != survivors[0]]
    p = w[survivors] / w[survivors].sum()
    donors = rngmod.stream(particles.rng_seed, "prune", frame).choice(survivors, size=len(dead), p=p)
    for dst, src in zip(dead, donors):
        particles.copy_particle(dst, src)
    _normalize(particles, particles.live)
    return dead


def representative(particles: ParticleSet) -> int:
    if not particles.live.any():
        raise FilterDegeneracyError("all particles are dead")
    return int(np.argmax(particles.log_weight))


# --------------------------------------------------------------------------- keyframes and the frame loop


def maybe_insert_keyframe(scan: Scan, odom_pose: Pose, store: KeyframeStore, particles: ParticleSet,
                          config: FilterConfig) -> bool:
    if len(store) > 0:
        last = store.keyframes[-1]
        rel = compose(inverse(last.odom_pose), odom_pose)
        if overlap_rate(scan, rel, last.voxel_map) >= config.overlap_threshold:
            return False
    store.append_keyframe(scan, build_voxel_map(scan, config.voxel_resolution), odom_pose, scan.timestamp)
    extend_all(particles, store)
    return True


def evaluate_particles(scan: Scan, state: SlamState, config: FilterConfig):
    """Run correction + likelihood over all particles. Returns (frame_ll, loop_mask, status)."""
    P = state.particles
    store = state.store
    n = len(P)
    out_ll = np.zeros(n)
    out_unmatched = np.zeros(n, dtype=np.int64)
    out_loop = np.zeros(n, dtype=np.bool_)
    out_status = np.full(n, STATUS_NONE, dtype=np.int64)
    pk = store.packed
    damping = -1.0 if config.gn_damping is None else float(config.gn_damping)
    _frame_kernel(scan.means, scan.covs, P.rot, P.trans, P.kf_rot, P.kf_trans, store.keyframe_paths(),
                  store.cumulative_path(scan.timestamp), pk.table_keys, pk.table_vals, pk.table_offsets,
                  pk.table_bits, pk.inv_res, pk.cell_means, pk.cell_covs, int(config.neighbor_count),
                  int(config.loop_recency_gap), config.correction_keyframes == "old", int(config.gn_iterations), damping,
                  float(config.step_clamp),
                  out_ll, out_unmatched, out_loop, out_status)
    frame_ll = config.likelihood_scale * (out_ll + config.unmatched_log_likelihood * out_unmatched)
    return frame_ll, out_loop, out_status


def step(scan: Scan | None, motion: MotionDelta, state: SlamState, config: FilterConfig,
         vertical_dispersion: float | None = None, timestamp: float | None = None) -> FrameReport:
    """Process one frame. ``scan=None`` (no returns) runs prediction only."""
    t_start = time.perf_counter()
    frame = state.frame
    P = state.particles
    store = state.store
    ts = scan.timestamp if scan is not None else float(timestamp)

    predict(P, motion, vertical_dispersion, frame)
    state.odom_pose = compose(state.odom_pose, motion.delta)
    store.append_odometry(ts, state.odom_pose)

    loops = corrected = 0
    respawned = np.zeros(0, dtype=np.int64)
    inserted = False
    if scan is not None and len(scan) > 0:
        if len(store) > 0:
            frame_ll, loop_mask, status = evaluate_particles(scan, state, config)
            loops = int(loop_mask.sum())
            corrected = int((status == STATUS_CORRECTED).sum())
            update_weights(P, frame_ll)
            respawned = prune_and_respawn(P, config, frame)
        inserted = maybe_insert_keyframe(scan, state.odom_pose, store, P, config)

    if config.reorthonormalize_every and (frame + 1) % config.reorthonormalize_every == 0:
        P.rot[:] = orthonormalize(P.rot)
        if P.n_keyframes:
            P.kf_rot[:] = orthonormalize(P.kf_rot)

    rep = representative(P)
    state.frame += 1
    return FrameReport(
        frame=frame,
        timestamp=ts,
        representative=rep,
        representative_pose=pose_to_tum(Pose(P.rot[rep], P.trans[rep])),
        live_count=int(P.live.sum()),
        loop_count=loops,
        corrected_count=corrected,
        respawned=int(len(respawned)),
        keyframe_inserted=inserted,
        keyframe_count=len(store),
        vertical_dispersion=vertical_dispersion,
        elapsed_s=time.perf_counter() - t_start,
    )
