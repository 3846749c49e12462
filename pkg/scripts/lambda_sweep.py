"""Sweep the alignment weight on the synthetic task, including the no-alignment baseline."""

import argparse

from kda.trainer import TrainConfig

from _common import synth, train_once

LAMBDAS = (0.0, 0.1, 1.0, 5.0, 10.0, 20.0, 100.0)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lambdas", type=float, nargs="+", default=LAMBDAS)
    args = ap.parse_args()
    ds = synth(args.seed)
    print("lambda   S      U      HM     ZSL    test_align")
    for lam in args.lambdas:
        _, _, r, align = train_once(ds, TrainConfig(lam=lam, seed=args.seed))
        print(f"{lam:<8g} {100 * r.S:6.2f} {100 * r.U:6.2f} {100 * r.HM:6.2f} {100 * r.ZSL:6.2f} {align:.4f}")


if __name__ == "__main__":
    main()
