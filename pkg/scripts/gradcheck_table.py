#!/usr/bin/env python3
"""Worst relative error of analytic vs central-difference gradients, per operator."""

import argparse

from loraudio.gradcheck import OPERATOR_CASES, adapted_loss_case, check


def run():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--instances", type=int, default=20)
    args = p.parse_args()
    cases = dict(OPERATOR_CASES, adapted_loss=adapted_loss_case)
    width = max(map(len, cases))
    print(f"{'case'.ljust(width)}  max rel err")
    for name, builder in cases.items():
        worst = max(check(builder, seed) for seed in range(args.instances))
        print(f"{name.ljust(width)}  {worst:.2e}")


if __name__ == "__main__":
    run()
