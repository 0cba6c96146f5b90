#!/usr/bin/env python3
"""Run the sequential protocol in both modes and print the two EER matrices side by side."""

import argparse
import time
from pathlib import Path

from loraudio.cli import main


def parse_args():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "demo.cfg"))
    p.add_argument("--out", default="runs/demo")
    p.add_argument("--modes", default="lora,finetune")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    return p.parse_args()


def run():
    args = parse_args()
    for mode in args.modes.split(","):
        argv = ["sequence", "--config", args.config, "--out", str(Path(args.out) / mode), "--mode", mode]
        for kv in args.set:
            argv += ["--set", kv]
        print(f"== {mode}")
        start = time.perf_counter()
        code = main(argv)
        print(f"   {time.perf_counter() - start:.1f}s, exit {code}")
        if code:
            return code
    return 0


if __name__ == "__main__":
    raise SystemExit(run())
