"""Measurement tools built on top of the encoder and trainer.

Four instruments live here:

* error-ratio curves: how far a perturbed forward pass drifts from the
  clean one, layer by layer, as a fraction of the clean activation norm;
* PCA spectra of noise batches, for contrasting isotropic draws with
  draws confined to a low-dimensional neighborhood;
* sensitivity sweeps: repeat the multi-seed harness while varying one
  knob (injection layer or relative noise magnitude);
* micro-benchmarks of the noise pipeline with fitted scaling exponents.

Everything returns plain data; CSV serialization lives with the CLI.
"""

import math
import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .encoder import EncoderConfig, EncoderModel, forward_with_taps
from .errors import ContractError
from .linalg import jacobi_eigh
from .manifold import build_index, gram_schmidt, knn
from .noise import rescale_relative_rows, sample_standard_noise
from .trainer import TrainConfig, multi_seed

import logging

log = logging.getLogger(__name__)

SPECTRUM_SOURCES = ("standard", "in_manifold")
DEFAULT_PROBE_COUNT = 64
BENCH_MIN_REPS = 5
SWEEP_PARAMS = ("injection_layer", "rel_magnitude")


# ------------------------------------------------------------------ curves

@dataclass
class ErrorRatioCurve:
    """Per-layer relative deviation of a noise-injected pass.

    ``ratios[i]`` compares the input of block ``layers[i]`` between the
    perturbed and clean passes: Frobenius norm of the difference over the
    norm of the clean input, flattened across all positions.  The first
    entry belongs to the injected block itself, so with per-token
    rescaling it equals the requested relative magnitude.
    """

    injection_layer: int
    rel_magnitude: float
    layers: list
    ratios: list
    n_probes: int


def ratio_entries(clean, pert):
    """Layer indices and deviation ratios for one clean/perturbed trace pair.

    The perturbed trace must carry an injection record; entries run from
    the injected block b through the last block, measuring each block's
    *input* (the injected one with its noise applied).
    """
    if pert.injected_layer is None:
        raise ContractError("ratio_entries: perturbed trace has no injection record")
    b = pert.injected_layer
    num_layers = len(pert.layers) - 1
    if len(clean.layers) != len(pert.layers):
        raise ContractError("ratio_entries: trace lengths differ")
    layers = list(range(b, num_layers + 1))
    ratios = []
    for r in layers:
        xhat = pert.perturbed_input_of(r)
        x = clean.layers[r - 1].data
        denom = float(np.linalg.norm(x))
        if denom == 0.0:
            raise ContractError(f"ratio_entries: clean input of block {r} has zero norm")
        ratios.append(float(np.linalg.norm(xhat - x)) / denom)
    return layers, ratios


def _probe_generator(entropy: int, ids) -> np.random.Generator:
    # Noise is keyed on the token content, not the probe position, so
    # reordering the probe set cannot change which noise any example gets.
    seq = np.random.SeedSequence([int(entropy)] + [int(t) for t in ids])
    return np.random.Generator(np.random.PCG64(seq))


def error_ratio_curve(model: EncoderModel, probe_data, b: int, rho: float,
                      rng) -> ErrorRatioCurve:
    """Average deviation ratios over a probe set, noise rescaled per token.

    ``probe_data`` is a dataset or a list of (ids, label) pairs; ``rng``
    is an integer seed or a Generator (consumed once for entropy).  The
    injected noise is a standard Gaussian draw rescaled row-wise so every
    position moves by ``rho`` times its own norm; all positions of the
    padded [M, d] input are treated alike, which pins the first curve
    entry to exactly ``rho``.
    """
    examples = getattr(probe_data, "examples", probe_data)
    if len(examples) == 0:
        raise ContractError("error_ratio_curve: empty probe set")
    cfg = model.config
    if not 1 <= b <= cfg.num_layers:
        raise ContractError(f"error_ratio_curve: injection layer {b} outside 1..{cfg.num_layers}")
    if not rho >= 0:
        raise ContractError(f"error_ratio_curve: rho must be nonnegative, got {rho}")
    if isinstance(rng, (int, np.integer)):
        entropy = int(rng)
    else:
        entropy = int(rng.integers(0, 2 ** 63))

    columns = None
    for ids, _label in examples:
        _, clean = forward_with_taps(model, ids)
        clean_input = clean.layers[b - 1].data
        gen = _probe_generator(entropy, ids)
        raw = gen.normal(size=clean_input.shape)
        eps = rescale_relative_rows(raw, clean_input, rho).data
        _, pert = forward_with_taps(model, ids, injection=(b, eps))
        layers, ratios = ratio_entries(clean, pert)
        if columns is None:
            columns = [[] for _ in layers]
        for col, r in zip(columns, ratios):
            col.append(r)
    # fsum gives one correctly rounded total per layer, so the mean is
    # bit-identical under any permutation of the probe set.
    mean_ratios = [math.fsum(col) / len(col) for col in columns]
    return ErrorRatioCurve(injection_layer=b, rel_magnitude=float(rho),
                           layers=layers, ratios=mean_ratios,
                           n_probes=len(examples))


# ----------------------------------------------------------------- spectra

@dataclass
class SpectrumReport:
    """Descending normalized eigenvalues of a noise batch's covariance."""

    sorted_eigenvalues: np.ndarray
    source: str
    batch_size: int

    def top_mass(self, m: int) -> float:
        """Fraction of total variance captured by the m leading directions."""
        if m < 1:
            raise ContractError(f"top_mass: m must be >= 1, got {m}")
        return float(self.sorted_eigenvalues[:m].sum())


def pca_noise_spectrum(noise_batch, source: str = "standard") -> SpectrumReport:
    """Normalized covariance spectrum of an [n, d] batch of noise vectors.

    Centers the batch, forms the sample covariance (n−1 denominator), and
    diagonalizes it with Jacobi rotations.  Eigenvalues are clipped at
    zero and divided by their sum; a zero-variance batch yields an
    all-zero spectrum and a logged warning.
    """
    if source not in SPECTRUM_SOURCES:
        raise ContractError(f"pca_noise_spectrum: source must be one of {SPECTRUM_SOURCES}")
    x = np.asarray(getattr(noise_batch, "data", noise_batch), dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractError(f"pca_noise_spectrum: need an [n>=2, d] batch, got shape {x.shape}")
    n = x.shape[0]
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    evals, _ = jacobi_eigh(cov)
    scale = max(1.0, float(np.abs(evals).max()))
    if evals.min() < -1e-12 * scale:
        raise ContractError(
            f"pca_noise_spectrum: covariance produced eigenvalue {evals.min()} "
            f"far below zero"
        )
    evals = np.clip(evals, 0.0, None)
    total = float(evals.sum())
    if total == 0.0:
        log.warning("pca_noise_spectrum: zero-variance batch, spectrum is all zeros")
        return SpectrumReport(sorted_eigenvalues=np.zeros_like(evals),
                              source=source, batch_size=n)
    return SpectrumReport(sorted_eigenvalues=evals / total,
                          source=source, batch_size=n)


# ------------------------------------------------------------------ sweeps

@dataclass
class SweepRow:
    """Multi-seed summary for one setting of the swept parameter."""

    param: str
    value: float
    n_seeds: int
    dev_mean: float
    dev_std: float
    dev_max: float
    gap_mean: float
    gap_std: float
    gap_max: float


def _apply_setting(base_cfg: TrainConfig, param: str, value) -> TrainConfig:
    if param == "injection_layer":
        b = int(value)
        return replace(base_cfg,
                       noise=replace(base_cfg.noise, injection_layer=b),
                       reg=replace(base_cfg.reg, injection_layer=b))
    if param == "rel_magnitude":
        return replace(base_cfg, noise=replace(base_cfg.noise, rel_magnitude=float(value)))
    raise ContractError(f"sensitivity_sweep: unknown parameter {param!r}, "
                        f"expected one of {SWEEP_PARAMS}")


def sensitivity_sweep(model_cfg: EncoderConfig, train_ds, dev_ds,
                      base_cfg: TrainConfig, param: str, values, seeds):
    """One multi-seed summary row per value of the swept parameter."""
    values = list(values)
    if not values:
        raise ContractError("sensitivity_sweep: empty sweep")
    rows = []
    for v in values:
        cfg = _apply_setting(base_cfg, param, v)
        summary = multi_seed(model_cfg, train_ds, dev_ds, cfg, seeds)
        rows.append(SweepRow(
            param=param, value=float(v), n_seeds=len(summary.per_seed),
            dev_mean=summary.dev_mean, dev_std=summary.dev_std,
            dev_max=summary.dev_max, gap_mean=summary.gap_mean,
            gap_std=summary.gap_std, gap_max=summary.gap_max))
    return rows


# -------------------------------------------------------------- benchmarks

@dataclass
class BenchRecord:
    kind: str
    size: int
    median_seconds: float
    reps: int


@dataclass
class BenchReport:
    records: list
    exponents: dict = field(default_factory=dict)


def _median_time(fn, reps: int) -> float:
    fn()  # warmup: touch allocators and caches before measuring
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _fit_exponent(sizes, seconds) -> float:
    xs = np.log2(np.asarray(sizes, dtype=np.float64))
    ys = np.log2(np.asarray(seconds, dtype=np.float64))
    return float(np.polyfit(xs, ys, 1)[0])


def bench_complexity(standard_rows=(256, 512, 1024, 2048, 4096),
                     standard_dim: int = 64,
                     k_values=(8, 16, 32, 64),
                     sample_count: int = 8192,
                     sample_dim: int = 64,
                     index_sizes=(512, 1024, 2048, 4096),
                     index_dim: int = 32,
                     reps: int = 7,
                     seed: int = 0) -> BenchReport:
    """Median timings of the noise pipeline stages plus log-log exponents.

    Stages: standard-noise generation against total element count M*d;
    batched in-manifold sampling (coefficient draw plus projection onto a
    fixed orthonormal basis) against basis size k; brute-force neighbor
    queries against index size N; orthonormalization against k.  Runs are
    sequential in one process; each point is the median of ``reps``
    repetitions after one warmup call.
    """
    if reps < BENCH_MIN_REPS:
        raise ContractError(f"bench_complexity: need at least {BENCH_MIN_REPS} reps, got {reps}")
    for name, sizes in (("standard_rows", standard_rows), ("k_values", k_values),
                        ("index_sizes", index_sizes)):
        if len(tuple(sizes)) == 0:
            raise ContractError(f"bench_complexity: {name} must be nonempty")
        if any(int(s) < 1 for s in sizes):
            raise ContractError(f"bench_complexity: {name} entries must be >= 1")
    if any(int(k) > sample_dim for k in k_values):
        raise ContractError(
            f"bench_complexity: basis size cannot exceed sample_dim {sample_dim}")

    rng = np.random.default_rng(seed)
    records = []
    exponents = {}

    sizes, medians = [], []
    for m in standard_rows:
        fn = lambda m=m: sample_standard_noise((int(m), standard_dim), 1.0, rng)
        med = _median_time(fn, reps)
        records.append(BenchRecord("standard", int(m) * standard_dim, med, reps))
        sizes.append(int(m) * standard_dim)
        medians.append(med)
    if len(sizes) > 1:
        exponents["standard"] = _fit_exponent(sizes, medians)

    sizes, medians = [], []
    for k in k_values:
        k = int(k)
        basis = np.linalg.qr(rng.normal(size=(sample_dim, k)))[0].T
        fn = lambda k=k, basis=basis: rng.normal(size=(sample_count, k)) @ basis
        med = _median_time(fn, reps)
        records.append(BenchRecord("inmanifold_sample", k, med, reps))
        sizes.append(k)
        medians.append(med)
    if len(sizes) > 1:
        exponents["inmanifold_sample"] = _fit_exponent(sizes, medians)

    queries = rng.normal(size=(8, index_dim))
    sizes, medians = [], []
    for n in index_sizes:
        index = build_index(rng.normal(size=(int(n), index_dim)))
        def fn(index=index):
            for q in queries:
                knn(index, q, k=10)
        med = _median_time(fn, reps)
        records.append(BenchRecord("knn_query", int(n), med, reps))
        sizes.append(int(n))
        medians.append(med)
    if len(sizes) > 1:
        exponents["knn_query"] = _fit_exponent(sizes, medians)

    sizes, medians = [], []
    for k in k_values:
        k = int(k)
        vectors = rng.normal(size=(k, sample_dim))
        fn = lambda vectors=vectors: gram_schmidt(vectors)
        med = _median_time(fn, reps)
        records.append(BenchRecord("gram_schmidt", k, med, reps))
        sizes.append(k)
        medians.append(med)
    if len(sizes) > 1:
        exponents["gram_schmidt"] = _fit_exponent(sizes, medians)

    return BenchReport(records=records, exponents=exponents)
