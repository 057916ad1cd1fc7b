"""Representative vs dead-reckoning ATE on the forest preset over a range of seeds."""

import argparse
import json
import time

import numpy as np

from mcslam import experiment as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--particles", type=int)
    ap.add_argument("--config", default="forest_grid")
    args = ap.parse_args()
    ratios = []
    t0 = time.perf_counter()
    for seed in range(args.seeds):
        cfg = ex.load_config(args.config, {"seed": seed, "filter.particle_count": args.particles})
        r = ex.run(cfg, write=False).report
        ratios.append(r.ate_representative / r.ate_deadreckoning)
        print(json.dumps({"seed": seed, "ate_representative": r.ate_representative, "ate_final": r.ate_final,
                          "ate_deadreckoning": r.ate_deadreckoning, "ratio": ratios[-1]}), flush=True)
    print(json.dumps({"median_ratio": float(np.median(ratios)), "seconds": time.perf_counter() - t0}))


if __name__ == "__main__":
    main()
