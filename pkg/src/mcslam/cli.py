"""Command-line entry point: ``mcslam {generate,slam,eval,cluster-report,run}``.

Config values come from a JSON file or a preset name, then ``MCSLAM_*``
environment overrides (``MCSLAM_FILTER__PARTICLE_COUNT=500``), then flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from . import experiment as ex
from .particles import read_snapshot

log = logging.getLogger("mcslam")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _add_common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required,
                   help=f"config JSON file or preset name ({', '.join(ex.PRESETS)})")
    p.add_argument("--seed", type=_u64, help="experiment seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")


def _load(args, config=None) -> ex.ExperimentConfig:
    overrides = {"seed": args.seed, "output_dir": args.out}
    if getattr(args, "particles", None) is not None:
        overrides["filter.particle_count"] = args.particles
    return ex.load_config(config or args.config, overrides)


def cmd_generate(args) -> int:
    cfg = _load(args)
    out = Path(cfg.output_dir)
    ds = ex.generate_dataset(cfg)
    ex.write_dataset(ds, out, cfg)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    print(json.dumps({"dataset": str(out), "frames": len(ds.scans)}))
    return 0


def cmd_slam(args) -> int:
    data = Path(args.dataset)
    config = args.config
    if config is None:
        if not (data / "config.json").exists():
            raise ex.ConfigError(f"config: {data} has no config.json; pass --config")
        config = str(data / "config.json")
    cfg = _load(args, config)
    if args.out is None:
        cfg.output_dir = str(data.parent / f"{data.name}_slam")
    ds = ex.load_dataset(data)
    res = ex.run_dataset(cfg, ds, cfg.output_dir, workers=args.workers)
    print(json.dumps(res.report.to_dict(), indent=2))
    return 0


def cmd_run(args) -> int:
    cfg = _load(args)
    res = ex.run(cfg, cfg.output_dir, workers=args.workers)
    print(json.dumps(res.report.to_dict(), indent=2))
    return 0


def cmd_eval(args) -> int:
    est = ev.read_tum(args.estimate)
    gt = ev.read_tum(args.groundtruth)
    rep = ev.report(est, gt)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        ev.write_report(out / "ate.json", rep)
    print(json.dumps(rep, indent=2))
    return 0


def cmd_cluster(args) -> int:
    trans, w = read_snapshot(args.snapshot)
    rep = ex.cluster_report(trans, w, radius=args.radius, k_max=args.k_max, seed=args.seed or 0)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "clusters.json").write_text(json.dumps(rep, indent=2) + "\n")
    print(json.dumps(rep, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mcslam", description="Particle-filter SLAM experiments on simulated LiDAR.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a dataset (world, scans, odometry, ground truth)")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("slam", help="run the filter on a dataset directory")
    p.add_argument("dataset")
    _add_common(p, config_required=False)
    p.add_argument("--particles", type=_positive)
    p.add_argument("--workers", type=_positive, default=1)
    p.set_defaults(func=cmd_slam)

    p = sub.add_parser("run", help="generate and run in one go")
    _add_common(p)
    p.add_argument("--particles", type=_positive)
    p.add_argument("--workers", type=_positive, default=1)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="ATE between an estimate and ground truth (TUM files)")
    p.add_argument("estimate")
    p.add_argument("groundtruth")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cluster-report", help="k-means over particle translations in a snapshot")
    p.add_argument("snapshot")
    p.add_argument("--radius", type=float, default=1.0, help="max RMS cluster radius in metres")
    p.add_argument("--k-max", type=_positive, default=5)
    p.add_argument("--seed", type=_u64)
    p.add_argument("--out")
    p.set_defaults(func=cmd_cluster)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ex.ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"mcslam {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ex.flt.FilterDegeneracyError as exc:
        print(f"mcslam {args.command}: filter degeneracy: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
