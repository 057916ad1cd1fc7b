"""Per-frame filter throughput: N particles, an M-point scan, 3 neighbour keyframes.

Prints one JSON line. Run under ``NUMBA_NUM_THREADS=<workers>`` so numba can
actually use that many threads.
"""

import argparse
import json
import time

import numpy as np

from mcslam import filter as flt
from mcslam.filter import FilterConfig, MotionDelta
from mcslam.particles import extend_all
from mcslam.pointcloud import Scan, build_voxel_map, estimate_covariances
from mcslam.se3 import Pose


def room(rng, n):
    """Floor, two walls and a box: a scan that constrains all six DoF."""
    k = n // 4
    floor = np.c_[rng.uniform(0, 8, (k, 2)), rng.normal(0, 0.01, k)]
    wall_a = np.c_[rng.uniform(0, 8, k), rng.normal(0, 0.01, k), rng.uniform(0, 3, k)]
    wall_b = np.c_[rng.normal(0, 0.01, k), rng.uniform(0, 8, k), rng.uniform(0, 3, k)]
    box = rng.uniform(3, 4.5, (n - 3 * k, 3))
    return np.vstack([floor, wall_a, wall_b, box])


def build(particles, points, keyframes, seed):
    rng = np.random.default_rng(seed)
    cfg = FilterConfig(particle_count=particles, neighbor_count=keyframes, rng_seed=seed)
    state = flt.SlamState.initialize(cfg)
    pts = room(rng, points)
    for k in range(keyframes):
        state.store.append_odometry(float(k), Pose.from_translation([0.01 * k, 0, 0]))
        cloud = estimate_covariances(pts, cfg.covariance_neighbors, float(k))
        state.store.append_keyframe(cloud, build_voxel_map(cloud, cfg.voxel_resolution), Pose.identity(), float(k))
        extend_all(state.particles)
    state.odom_pose = Pose.from_translation([0.01 * (keyframes - 1), 0, 0])
    state.frame = keyframes
    return state, cfg, pts


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--particles", type=int, default=1000)
    ap.add_argument("--points", type=int, default=2000)
    ap.add_argument("--keyframes", type=int, default=3)
    ap.add_argument("--frames", type=int, default=10)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    used = flt.set_workers(args.workers)
    state, cfg, pts = build(args.particles, args.points, args.keyframes, args.seed)
    motion = MotionDelta(Pose.from_translation([0.01, 0, 0]), np.diag([1e-4] * 3 + [1e-6] * 3))
    t0 = float(args.keyframes)
    # warm-up frame compiles or loads the numba kernels
    flt.step(estimate_covariances(pts, cfg.covariance_neighbors, t0), motion, state, cfg)
    times = []
    for f in range(1, args.frames + 1):
        scan = estimate_covariances(pts, cfg.covariance_neighbors, t0 + f)
        t = time.perf_counter()
        flt.step(scan, motion, state, cfg)
        times.append(time.perf_counter() - t)
    per = float(np.median(times))
    print(json.dumps({"workers": used, "particles": args.particles, "points": args.points,
                      "keyframes": len(state.store), "frame_s": per, "fps": 1.0 / per}))


if __name__ == "__main__":
    main()
