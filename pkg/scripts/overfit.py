"""Memorise 8 synthetic sequences and report L_H reduction and training-set PCK."""

import argparse

from sdtc import config
from sdtc.experiments import overfit


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--steps", type=int, default=300)
    args = p.parse_args()
    cfg = config.load(args.config, args.set)
    res = overfit(cfg, args.samples, args.steps)
    for entry in res.logs[:: max(1, len(res.logs) // 10)]:
        print(entry.format())
    print(f"L_H initial={res.initial_l_h:.5f} final={res.final_l_h:.5f} ratio={res.ratio:.4f}")
    print(f"pck={100 * res.pck:.2f} steps={res.steps} seconds={res.seconds:.0f}")


if __name__ == "__main__":
    main()
