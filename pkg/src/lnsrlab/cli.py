"""Command-line interface: experiments in, CSV files out.

Every subcommand reads an optional INI-style config file (sections
[encoder], [noise], [regularizer], [train], [data] mirroring the config
dataclasses), runs one experiment, and writes `<command>-<timestamp>.csv`
into the output directory.  Floats are serialized with repr() so parsing
the file recovers them bit for bit.

Exit codes: 0 success, 1 configuration or argument problem, 2 runtime
failure.
"""

import argparse
import configparser
import csv
import os
import sys
from dataclasses import replace
from datetime import datetime

import numpy as np

from .data import load_tsv, synth_classification, synth_manifold
from .diagnostics import (
    bench_complexity,
    error_ratio_curve,
    pca_noise_spectrum,
    sensitivity_sweep,
)
from .encoder import EncoderConfig, build_encoder, load_checkpoint, save_checkpoint
from .errors import ContractError, ValidationError
from .manifold import build_index, neighborhood_basis, sample_inmanifold_noise
from .noise import NoiseSpec, sample_standard_noise
from .objective import RegularizerConfig
from .rng import stream_rng, substream_rng
from .theory import (
    cross_term_mc,
    make_taylor_report,
    random_smooth_map,
    write_taylor_csv,
)
from .trainer import TrainConfig, config_for_mode, multi_seed, run_training

COMMANDS = ("train", "sweep", "verify-claim1", "cross-term", "noise-curve",
            "pca-spectrum", "bench", "gap-report")

_CONFIG_SECTIONS = ("encoder", "noise", "regularizer", "train", "data")

_DATA_DEFAULTS = {"kind": "classification", "n_per_class": 16, "num_classes": 2,
                  "seq_len": 8, "margin": 0.6, "seed": 0,
                  "train_path": None, "dev_path": None}


class _Parser(argparse.ArgumentParser):
    """Argument errors surface as ValidationError so main() can map them
    to exit code 1 instead of argparse's default hard exit."""

    def error(self, message):
        raise ValidationError(message)


# ------------------------------------------------------------- serialization

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows):
    """One header row plus data rows; floats at full round-trip precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _timestamp() -> str:
    # Microsecond resolution keeps names collision-free even when two
    # commands run within the same second.
    return datetime.now().strftime("%Y%m%d-%H%M%S-%f")


def _out_path(args, command: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, f"{command}-{_timestamp()}.csv")


# ------------------------------------------------------------ config loading

def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValidationError(f"expected a boolean, got {text!r}")


def _float_or_none(text: str):
    low = text.strip().lower()
    if low in ("none", ""):
        return None
    return float(text)


def _lambda_weights(text: str):
    parts = [p for p in text.split(",") if p.strip()]
    if len(parts) == 1:
        return float(parts[0])
    return tuple(float(p) for p in parts)


_SECTION_CASTERS = {
    "encoder": {"vocab_size": int, "embed_dim": int, "num_layers": int,
                "num_heads": int, "ffn_dim": int, "max_seq_len": int,
                "num_classes": int, "regression": _bool, "dropout_rate": float},
    "noise": {"mode": str, "sigma": float, "rel_magnitude": _float_or_none,
              "injection_layer": int, "seed": int},
    "regularizer": {"lambda_weights": _lambda_weights, "mode": str,
                    "norm_reduction": str, "injection_layer": int},
    "train": {"lr": float, "batch_size": int, "beta1": float, "beta2": float,
              "adam_eps": float, "weight_decay": float, "warmup_ratio": float,
              "epochs": int, "seed": int, "knn_k": int},
    "data": {"kind": str, "n_per_class": int, "num_classes": int,
             "seq_len": int, "margin": float, "seed": int,
             "train_path": str, "dev_path": str},
}


def load_config_file(path):
    """Parse the INI file into {section: {key: typed value}}."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ValidationError(f"config file not found: {path}")
    out = {}
    for section in parser.sections():
        if section not in _CONFIG_SECTIONS:
            raise ValidationError(
                f"unknown config section [{section}]; expected one of {_CONFIG_SECTIONS}")
        casters = _SECTION_CASTERS[section]
        values = {}
        for key, raw in parser.items(section):
            if key not in casters:
                raise ValidationError(f"unknown key {key!r} in section [{section}]")
            try:
                values[key] = casters[key](raw)
            except ValueError as exc:
                raise ValidationError(
                    f"bad value for {key!r} in [{section}]: {raw!r} ({exc})")
        out[section] = values
    return out


class Settings:
    """Configs assembled from defaults, the INI file, and CLI overrides."""

    def __init__(self, args):
        sections = load_config_file(args.config) if args.config else {}
        enc_kwargs = dict(vocab_size=30, embed_dim=8, num_layers=2,
                          num_heads=2, ffn_dim=16, max_seq_len=8)
        enc_kwargs.update(sections.get("encoder", {}))
        self.encoder = EncoderConfig(**enc_kwargs)

        noise_kwargs = dict(mode="standard", sigma=0.05, rel_magnitude=0.05)
        noise_kwargs.update(sections.get("noise", {}))
        reg_kwargs = dict(mode="lnsr_standard", lambda_weights=1.0)
        reg_kwargs.update(sections.get("regularizer", {}))
        train_kwargs = dict(lr=2e-3, batch_size=8, epochs=2)
        train_kwargs.update(sections.get("train", {}))
        if getattr(args, "seed", None) is not None:
            train_kwargs["seed"] = args.seed
        self.train = TrainConfig(noise=NoiseSpec(**noise_kwargs),
                                 reg=RegularizerConfig(**reg_kwargs),
                                 **train_kwargs)

        self.data = dict(_DATA_DEFAULTS)
        self.data.update(sections.get("data", {}))
        self.seed = self.train.seed

    def datasets(self):
        """Train/dev datasets: TSV files when paths are given, else synthetic."""
        d = self.data
        if d["train_path"]:
            if not d["dev_path"]:
                raise ValidationError("data.train_path given without data.dev_path")
            train = load_tsv(d["train_path"], split="train")
            dev = load_tsv(d["dev_path"], vocab=train.vocab, split="dev")
            return train, dev
        if d["kind"] != "classification":
            raise ValidationError(f"unknown data.kind {d['kind']!r}")
        return synth_classification(d["n_per_class"], d["num_classes"],
                                    d["seq_len"], self.encoder.vocab_size,
                                    d["margin"], d["seed"])


def _model_with_params(encoder_cfg: EncoderConfig, init_seed: int, param_values):
    """Fresh model with its weights replaced by saved arrays."""
    model = build_encoder(encoder_cfg, init_seed)
    params = model.parameters()
    if len(params) != len(param_values):
        raise ContractError("parameter count mismatch when restoring weights")
    for p, v in zip(params, param_values):
        if p.data.shape != v.shape:
            raise ContractError("parameter shape mismatch when restoring weights")
        p.data = v.copy()
    return model


# ----------------------------------------------------------------- commands

def _cmd_train(args) -> int:
    settings = Settings(args)
    train_ds, dev_ds = settings.datasets()
    result = run_training(settings.encoder, train_ds, dev_ds, settings.train)
    path = _out_path(args, "train")
    rows = [(e + 1, tl, tm, dm) for e, (tl, tm, dm) in enumerate(
        zip(result.epoch_train_loss, result.epoch_train_metric,
            result.epoch_dev_metric))]
    write_csv(path, ("epoch", "train_loss", "train_metric", "dev_metric"), rows)
    print(f"wrote {path}")
    print(f"mode={result.mode} final_train={result.final_train_metric:.4f} "
          f"final_dev={result.final_dev_metric:.4f} "
          f"gap={result.generalization_gap:.4f} "
          f"wall={result.wall_time_seconds:.2f}s")
    if args.save_model:
        model = _model_with_params(settings.encoder, settings.seed,
                                   result.final_params)
        save_checkpoint(model, args.save_model)
        print(f"wrote {args.save_model}")
    return 0


def _cmd_sweep(args) -> int:
    settings = Settings(args)
    train_ds, dev_ds = settings.datasets()
    caster = int if args.param == "injection_layer" else float
    values = [caster(v) for v in args.values.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    rows = sensitivity_sweep(settings.encoder, train_ds, dev_ds, settings.train,
                             args.param, values, seeds)
    path = _out_path(args, "sweep")
    write_csv(path,
              ("param", "value", "n_seeds", "dev_mean", "dev_std", "dev_max",
               "gap_mean", "gap_std", "gap_max"),
              [(r.param, r.value, r.n_seeds, r.dev_mean, r.dev_std, r.dev_max,
                r.gap_mean, r.gap_std, r.gap_max) for r in rows])
    print(f"wrote {path}")
    for r in rows:
        print(f"{r.param}={r.value:g}: dev {r.dev_mean:.4f} (std {r.dev_std:.4f}), "
              f"gap {r.gap_mean:.4f} (std {r.gap_std:.4f})")
    return 0


def _cmd_verify_claim1(args) -> int:
    seed = args.seed if args.seed is not None else 0
    sigmas = [float(s) for s in args.sigmas.split(",") if s.strip()]
    if not sigmas:
        raise ValidationError("verify-claim1: need at least one sigma")
    f, f_batch = random_smooth_map(args.dim, stream_rng(seed, "theory"))
    x = stream_rng(seed, "probe").normal(size=args.dim)
    reports = []
    for i, sigma in enumerate(sigmas):
        rng = substream_rng(seed, "theory", i)
        reports.append(make_taylor_report(f, x, sigma, args.mc_samples, rng,
                                          f_batch=f_batch))
    path = _out_path(args, "verify-claim1")
    write_taylor_csv(reports, path)
    print(f"wrote {path}")
    for rep in reports:
        second_order = rep.r_j + rep.r_h_exact
        gap = abs(rep.mc_estimate - second_order)
        band = 3.0 * rep.mc_se
        verdict = "within" if gap <= band else "OUTSIDE"
        print(f"sigma={rep.sigma:g}: mc={rep.mc_estimate:.3e} "
              f"jacobian+hessian={second_order:.3e} "
              f"|gap|={gap:.2e} vs 3se={band:.2e} -> {verdict}")
    return 0


def _cmd_cross_term(args) -> int:
    seed = args.seed if args.seed is not None else 0
    rows = []
    worst = 0.0
    for i in range(args.pairs):
        rng = substream_rng(seed, "theory", i)
        j = rng.normal(size=args.dim)
        a = rng.normal(size=(args.dim, args.dim))
        h = 0.5 * (a + a.T)
        mean, se = cross_term_mc(j, h, args.sigma, args.mc_samples, rng)
        ratio = abs(mean) / se if se > 0 else 0.0
        worst = max(worst, ratio)
        rows.append((i, args.dim, args.sigma, mean, se, ratio))
    path = _out_path(args, "cross-term")
    write_csv(path, ("pair", "dim", "sigma", "mc_mean", "mc_se", "abs_mean_over_se"),
              rows)
    print(f"wrote {path}")
    print(f"{args.pairs} pairs, max |mean|/se = {worst:.3f} "
          f"({'all within 3' if worst <= 3.0 else 'some exceed 3'})")
    return 0


def _cmd_noise_curve(args) -> int:
    settings = Settings(args)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        model = build_encoder(settings.encoder, settings.seed)
    _, dev_ds = settings.datasets()
    probes = dev_ds.examples[:args.probes]
    curve = error_ratio_curve(model, probes, args.injection_layer,
                              args.rel_magnitude, settings.seed)
    path = _out_path(args, "noise-curve")
    write_csv(path,
              ("layer", "ratio", "injection_layer", "rel_magnitude", "n_probes"),
              [(layer, ratio, curve.injection_layer, curve.rel_magnitude,
                curve.n_probes) for layer, ratio in zip(curve.layers, curve.ratios)])
    print(f"wrote {path}")
    print("layer ratios: " +
          ", ".join(f"{l}:{r:.4f}" for l, r in zip(curve.layers, curve.ratios)))
    return 0


def _cmd_pca_spectrum(args) -> int:
    seed = args.seed if args.seed is not None else 0
    rng = stream_rng(seed, "noise")
    standard = sample_standard_noise((args.samples, args.dim), args.sigma, rng).data
    std_rep = pca_noise_spectrum(standard, source="standard")

    mset = synth_manifold(args.points, args.dim, args.intrinsic,
                          args.curvature, seed)
    index = build_index(mset.points)
    basis = neighborhood_basis(index, mset.points[0], k=args.k)
    if basis is None:
        raise ContractError("pca-spectrum: degenerate neighborhood, no basis")
    batch = np.stack([
        sample_inmanifold_noise(mset.points[0], basis, args.sigma, rng).data
        for _ in range(args.samples)])
    man_rep = pca_noise_spectrum(batch, source="in_manifold")

    path = _out_path(args, "pca-spectrum")
    rows = [(rep.source, rank, val)
            for rep in (std_rep, man_rep)
            for rank, val in enumerate(rep.sorted_eigenvalues, start=1)]
    write_csv(path, ("source", "rank", "normalized_eigenvalue"), rows)
    print(f"wrote {path}")
    m = min(10, args.dim)
    print(f"top-{m} mass: standard {std_rep.top_mass(m):.4f}, "
          f"in_manifold {man_rep.top_mass(m):.4f}")
    return 0


def _cmd_bench(args) -> int:
    kwargs = {"reps": args.reps}
    if args.standard_rows:
        kwargs["standard_rows"] = tuple(int(v) for v in args.standard_rows.split(","))
    if args.k_values:
        kwargs["k_values"] = tuple(int(v) for v in args.k_values.split(","))
    if args.index_sizes:
        kwargs["index_sizes"] = tuple(int(v) for v in args.index_sizes.split(","))
    report = bench_complexity(seed=args.seed if args.seed is not None else 0,
                              **kwargs)
    path = _out_path(args, "bench")
    rows = [("timing", r.kind, r.size, r.median_seconds, r.reps, None)
            for r in report.records]
    rows += [("exponent", kind, None, None, None, value)
             for kind, value in sorted(report.exponents.items())]
    write_csv(path, ("record", "kind", "size", "median_seconds", "reps", "exponent"),
              rows)
    print(f"wrote {path}")
    for kind, value in sorted(report.exponents.items()):
        print(f"{kind}: fitted exponent {value:.3f}")
    return 0


def _cmd_gap_report(args) -> int:
    settings = Settings(args)
    train_ds, dev_ds = settings.datasets()
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    if not modes:
        raise ValidationError("gap-report: need at least one mode")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    rows = []
    summaries = []
    for mode in modes:
        cfg = config_for_mode(settings.train, mode)
        summary = multi_seed(settings.encoder, train_ds, dev_ds, cfg, seeds)
        summaries.append((mode, summary))
        for run in summary.per_seed:
            rows.append(("run", mode, run.seed, run.final_train_metric,
                         run.final_dev_metric, run.generalization_gap,
                         None, None, None, None, None, None))
        rows.append(("summary", mode, None, None, None, None,
                     summary.dev_mean, summary.dev_std, summary.dev_max,
                     summary.gap_mean, summary.gap_std, summary.gap_max))
    path = _out_path(args, "gap-report")
    write_csv(path,
              ("record", "mode", "seed", "final_train_metric", "final_dev_metric",
               "generalization_gap", "dev_mean", "dev_std", "dev_max",
               "gap_mean", "gap_std", "gap_max"),
              rows)
    print(f"wrote {path}")
    for mode, summary in summaries:
        print(f"{mode}: dev {summary.dev_mean:.4f} (std {summary.dev_std:.4f}), "
              f"gap {summary.gap_mean:.4f} (std {summary.gap_std:.4f})")
    return 0


# -------------------------------------------------------------------- main

def build_parser() -> _Parser:
    parser = _Parser(prog="lnsrlab",
                     description="Noise-stability training and diagnostics.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None,
                        help="INI config with [encoder]/[noise]/[regularizer]/[train]/[data]")
    common.add_argument("--seed", type=int, default=None,
                        help="master seed override")
    common.add_argument("--out", default=".", help="output directory for CSV files")

    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common],
                       help="one training run, per-epoch metrics to CSV")
    p.add_argument("--save-model", default=None,
                   help="also write the trained weights to this checkpoint path")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("sweep", parents=[common],
                       help="multi-seed summaries while varying one knob")
    p.add_argument("--param", required=True,
                   choices=("injection_layer", "rel_magnitude"))
    p.add_argument("--values", required=True,
                   help="comma-separated settings of the swept parameter")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("verify-claim1", parents=[common],
                       help="second-order expansion vs Monte Carlo on a random smooth map")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--sigmas", default="0.1,0.05,0.01")
    p.add_argument("--mc-samples", type=int, default=20000)
    p.set_defaults(func=_cmd_verify_claim1)

    p = sub.add_parser("cross-term", parents=[common],
                       help="Monte-Carlo means of the odd cross term over random pairs")
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--dim", type=int, default=6)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--mc-samples", type=int, default=100000)
    p.set_defaults(func=_cmd_cross_term)

    p = sub.add_parser("noise-curve", parents=[common],
                       help="per-layer deviation ratios after noise injection")
    p.add_argument("--injection-layer", type=int, default=1)
    p.add_argument("--rel-magnitude", type=float, default=0.05)
    p.add_argument("--probes", type=int, default=64)
    p.add_argument("--checkpoint", default=None,
                   help="measure a saved model instead of a fresh one")
    p.set_defaults(func=_cmd_noise_curve)

    p = sub.add_parser("pca-spectrum", parents=[common],
                       help="covariance spectra of standard vs neighborhood noise")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--intrinsic", type=int, default=3)
    p.add_argument("--points", type=int, default=400)
    p.add_argument("--samples", type=int, default=400)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--curvature", type=float, default=0.0)
    p.set_defaults(func=_cmd_pca_spectrum)

    p = sub.add_parser("bench", parents=[common],
                       help="noise-pipeline timings with fitted scaling exponents")
    p.add_argument("--reps", type=int, default=7)
    p.add_argument("--standard-rows", default=None)
    p.add_argument("--k-values", default=None)
    p.add_argument("--index-sizes", default=None)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("gap-report", parents=[common],
                       help="train/dev gap comparison across objective modes")
    p.add_argument("--modes", default="ft,lnsr_standard")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.set_defaults(func=_cmd_gap_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
