"""Compare the fused model against audio-only and visual-only training on the synthetic task."""

import argparse

from kda.model import MODES
from kda.trainer import TrainConfig

from _common import synth, train_once


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    ds = synth(args.seed)
    print("mode         S      U      HM     ZSL")
    for mode in MODES:
        _, _, r, _ = train_once(ds, TrainConfig(seed=args.seed), unimodal_mode=mode)
        print(f"{mode:<12} {100 * r.S:6.2f} {100 * r.U:6.2f} {100 * r.HM:6.2f} {100 * r.ZSL:6.2f}")


if __name__ == "__main__":
    main()
