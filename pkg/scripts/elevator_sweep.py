"""Multi-modality after the elevator ride and final floor recovery, per seed."""

import argparse
import json

from mcslam import experiment as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--config", default="multi_floor_elevator")
    args = ap.parse_args()
    passed = 0
    for seed in range(args.seeds):
        cfg = ex.load_config(args.config, {"seed": seed})
        top = cfg.world.params.get("floors", 3) * cfg.world.params.get("floor_height", 3.5)
        r = ex.run(cfg, write=False)
        clusters, a = [], False
        if "elevator_exit+1" in r.snapshots:
            rep = ex.cluster_report(*r.snapshots["elevator_exit+1"])
            clusters = [(round(c["center"][2], 2), round(c["weight"], 3)) for c in rep["clusters"]]
            heavy = [c for c in rep["clusters"] if c["weight"] >= 0.10]
            a = ex.z_separated_modes(rep) and all(0 <= c["center"][2] <= top for c in heavy)
        z_est = float(r.trajectory.poses[-1].translation[2])
        z_gt = float(r.groundtruth.poses[-1].translation[2])
        b = abs(z_est - z_gt) < 0.5
        passed += a and b
        print(json.dumps({"seed": seed, "clusters_z_weight": clusters, "multimodal": a, "final_z": z_est,
                          "true_z": z_gt, "recovered": b}), flush=True)
    print(json.dumps({"passed": passed, "seeds": args.seeds}))


if __name__ == "__main__":
    main()
