"""Full model vs plain-encoder + addition baseline on an occluded validation set."""

import argparse

from sdtc.config import parse_lines
from sdtc.experiments import ablation, ablation_base


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--train-samples", type=int, default=32)
    p.add_argument("--val-samples", type=int, default=48)
    p.add_argument("--set", action="append", default=[], help="override on top of the ablation preset")
    args = p.parse_args()
    base = parse_lines("\n".join(args.set), ablation_base()).validate()
    res = ablation(args.seeds, args.train_samples, args.val_samples, base, log=lambda line: print(line, flush=True))
    print(res.format(), end="")
    verdict = "full >= baseline" if res.full_median >= res.baseline_median else "full < baseline"
    print(verdict)


if __name__ == "__main__":
    main()
