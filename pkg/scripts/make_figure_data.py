#!/usr/bin/env python3
"""Produce figure-ready CSVs: error-ratio curves and noise spectra.

Curves are computed for every injection layer of a freshly initialized
encoder (pass --checkpoint to use trained weights instead); spectra
contrast standard-Gaussian noise with in-manifold noise drawn from local
neighborhood bases of a synthetic curved manifold.
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from lnsrlab.cli import write_csv
from lnsrlab.data import synth_classification, synth_manifold
from lnsrlab.diagnostics import error_ratio_curve, pca_noise_spectrum
from lnsrlab.encoder import EncoderConfig, build_encoder, load_checkpoint
from lnsrlab.manifold import build_index, neighborhood_basis, sample_inmanifold_noise
from lnsrlab.noise import sample_standard_noise
from lnsrlab.rng import stream_rng


def parse_args():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out-dir", default="figure_data")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--probes", type=int, default=64)
    p.add_argument("--rel-magnitude", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    return p.parse_args()


def curve_rows(args):
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        cfg = EncoderConfig(vocab_size=30, embed_dim=16, num_layers=args.layers,
                            num_heads=2, ffn_dim=32, max_seq_len=8)
        model = build_encoder(cfg, init_seed=args.seed)
    _, dev = synth_classification(32, 2, 8, model.config.vocab_size, 0.5,
                                  seed=args.seed)
    probes = dev.examples[:args.probes]
    rows = []
    for b in range(1, model.config.num_layers + 1):
        curve = error_ratio_curve(model, probes, b=b,
                                  rho=args.rel_magnitude, rng=args.seed)
        for layer, ratio in zip(curve.layers, curve.ratios):
            rows.append([b, layer, ratio, curve.n_probes])
    return ["injection_layer", "layer", "ratio", "n_probes"], rows


def spectrum_rows(args):
    d, n = 64, 4000
    rng = stream_rng(args.seed, "noise")
    std = sample_standard_noise((2000, d), 1.0, rng).data
    reports = [pca_noise_spectrum(std, source="standard")]

    mset = synth_manifold(n, d, 8, 0.05, seed=args.seed)
    index = build_index(mset.points)
    picks = stream_rng(args.seed, "probe").choice(n, size=500, replace=False)
    draws = []
    for idx in picks:
        basis = neighborhood_basis(index, mset.points[idx], k=10)
        if basis is None:
            continue
        draws.append(sample_inmanifold_noise(mset.points[idx], basis, 1.0, rng).data)
    reports.append(pca_noise_spectrum(np.stack(draws), source="in_manifold"))

    rows = []
    for rep in reports:
        for rank, ev in enumerate(rep.sorted_eigenvalues):
            rows.append([rep.source, rank, ev])
    return ["source", "rank", "normalized_eigenvalue"], rows


def main():
    args = parse_args()
    os.makedirs(args.out_dir, exist_ok=True)

    header, rows = curve_rows(args)
    path = os.path.join(args.out_dir, "error_ratio_curves.csv")
    write_csv(path, header, rows)
    print(f"wrote {path} ({len(rows)} rows)")

    header, rows = spectrum_rows(args)
    path = os.path.join(args.out_dir, "noise_spectra.csv")
    write_csv(path, header, rows)
    print(f"wrote {path} ({len(rows)} rows)")


if __name__ == "__main__":
    main()
