#!/usr/bin/env python3
"""Paired-seed generalization-gap comparison across training modes.

Runs every requested mode on the same synthetic tasks with the same seed
list and prints one summary row per (margin, mode).  A margin sweep makes
the task progressively easier, which is where the gap contrast between
plain fine-tuning and the noise-stability penalty shows up most clearly.
"""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from lnsrlab.cli import write_csv
from lnsrlab.data import synth_classification
from lnsrlab.encoder import EncoderConfig
from lnsrlab.noise import NoiseSpec
from lnsrlab.objective import MODES, RegularizerConfig
from lnsrlab.trainer import TrainConfig, config_for_mode, multi_seed


def parse_args():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--modes", default="ft,lnsr_standard",
                   help="comma-separated subset of: " + ", ".join(MODES))
    p.add_argument("--margins", default="0.40,0.45,0.50")
    p.add_argument("--seeds", default="0,1,2,3,4,5,6,7,8,9")
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--lambda-weight", type=float, default=0.05)
    p.add_argument("--out", default=None, help="optional CSV path for the summary")
    return p.parse_args()


def main():
    args = parse_args()
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    margins = [float(m) for m in args.margins.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]

    mcfg = EncoderConfig(vocab_size=30, embed_dim=16, num_layers=2,
                         num_heads=2, ffn_dim=32, max_seq_len=8)
    base = TrainConfig(
        lr=5e-3, batch_size=16, epochs=args.epochs,
        noise=NoiseSpec(mode="standard", sigma=0.05, rel_magnitude=0.05),
        reg=RegularizerConfig(mode="lnsr_standard",
                              lambda_weights=args.lambda_weight))

    header = ["margin", "mode", "dev_mean", "dev_std", "gap_mean", "gap_std"]
    rows = []
    print("  ".join(f"{h:>14}" for h in header))
    for margin in margins:
        train, dev = synth_classification(24, 2, 8, 30, margin, seed=0)
        for mode in modes:
            res = multi_seed(mcfg, train, dev, config_for_mode(base, mode), seeds)
            row = [margin, mode, res.dev_mean, res.dev_std,
                   res.gap_mean, res.gap_std]
            rows.append(row)
            print(f"{margin:>14.2f}  {mode:>14}  "
                  f"{res.dev_mean:>14.3f}  {res.dev_std:>14.3f}  "
                  f"{res.gap_mean:>14.3f}  {res.gap_std:>14.3f}")
    if args.out:
        write_csv(args.out, header, rows)
        print(f"\nwrote {args.out}")


if __name__ == "__main__":
    main()
