"""Run the acceptance suite and print its PASS/FAIL lines.

    python scripts/run_acceptance.py          # everything (about 20 min)
    python scripts/run_acceptance.py --fast   # skip the preset sweeps and the benchmark
"""

import argparse
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--fast", action="store_true", help="skip tests marked slow")
    args = ap.parse_args()
    cmd = [sys.executable, "-m", "pytest", "-q", "-s", str(ROOT / "tests" / "test_acceptance.py")]
    if args.fast:
        cmd += ["-m", "not slow"]
    return subprocess.call(cmd, cwd=ROOT)


if __name__ == "__main__":
    sys.exit(main())
