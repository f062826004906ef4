"""Train, evaluate and verify from one config, timing each stage.

    python3 scripts/reproduce.py --config configs/default.json --out runs/default
"""

import argparse
import sys
import time

from cpss.cli import main


def stage(name, argv):
    start = time.perf_counter()
    code = main(argv)
    print(f"[{name}] exit={code} {time.perf_counter() - start:.1f}s", flush=True)
    if code != 0:
        sys.exit(code)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/default.json")
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--jobs", default="1")
    args = ap.parse_args()
    common = ["--config", args.config, "--out", args.out]
    stage("train", ["train", *common])
    stage("evaluate", ["evaluate", *common, "--jobs", args.jobs])
    stage("verify", ["verify", *common])
