"""Training loop with per-example noise injection and the multi-seed harness.

One run: Adam with bias correction and decoupled weight decay, linear
warmup then linear decay to zero, and per batch the clean forward pass plus
(in noisy modes) a perturbed pass whose trace deviation feeds the penalty.

Randomness discipline: weight init, data order, and noise each draw from
their own named stream of the run seed, and the noise stream is further
split per (epoch, example position).  Ablation modes that consume different
amounts of noise randomness therefore see bit-identical data order and
init, which is what makes mode comparisons paired rather than confounded.
"""

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import TextDataset
from .encoder import EncoderConfig, EncoderModel, build_encoder, forward_with_taps
from .errors import ContractError, ValidationError
from .manifold import NeighborIndex, build_index, neighborhood_basis, sample_inmanifold_noise
from .noise import NoiseSpec, rescale_relative_rows
from .objective import (
    MODES,
    NOISY_MODES,
    RegularizerConfig,
    assemble_objective,
    lnsr_term,
    task_loss,
)
from .rng import stream_rng, substream_rng


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_ratio: float = 0.06
    epochs: int = 3
    seed: int = 0
    knn_k: int = 10
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    reg: RegularizerConfig = field(default_factory=RegularizerConfig)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValidationError(f"TrainConfig.lr must be positive, got {self.lr}")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValidationError(
                f"TrainConfig.warmup_ratio must be in [0, 1), got {self.warmup_ratio}"
            )
        if self.batch_size < 1 or self.epochs < 1:
            raise ValidationError(
                f"TrainConfig: batch_size and epochs must be >= 1,"
                f" got {self.batch_size}, {self.epochs}"
            )
        if not 0.0 <= self.weight_decay:
            raise ValidationError(f"TrainConfig.weight_decay must be >= 0, got {self.weight_decay}")
        if self.knn_k < 1:
            raise ValidationError(f"TrainConfig.knn_k must be >= 1, got {self.knn_k}")
        mode = self.reg.mode
        if mode == "lnsr_standard" and self.noise.mode == "in_manifold":
            raise ValidationError("lnsr_standard pairs with standard or none noise")
        if mode == "lnsr_inmanifold" and self.noise.mode == "standard":
            raise ValidationError("lnsr_inmanifold pairs with in_manifold or none noise")
        if mode in NOISY_MODES and self.reg.injection_layer != self.noise.injection_layer:
            raise ValidationError(
                f"injection_layer mismatch: regularizer says {self.reg.injection_layer},"
                f" noise spec says {self.noise.injection_layer}"
            )


@dataclass
class AdamState:
    m: list
    v: list

    @classmethod
    def for_params(cls, params):
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, t: int, cfg: TrainConfig,
              lr: float | None = None):
    """One Adam update with bias correction and decoupled weight decay."""
    if t < 1:
        raise ContractError(f"adam_step: t must be >= 1, got {t}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractError("adam_step: params/grads/state length mismatch")
    step_lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.beta1, cfg.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ContractError(
                f"adam_step: gradient shape {g.shape} vs parameter {p.data.shape}"
            )
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        mhat = state.m[i] / (1.0 - b1 ** t)
        vhat = state.v[i] / (1.0 - b2 ** t)
        p.data = p.data - step_lr * (mhat / (np.sqrt(vhat) + cfg.adam_eps)
                                     + cfg.weight_decay * p.data)


def lr_at(step: int, total_steps: int, warmup_ratio: float, base_lr: float) -> float:
    """Linear warmup over ceil(ratio * total) steps, then linear decay to 0."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"lr_at: step {step} outside 0..{total_steps}")
    if step == total_steps:
        return 0.0
    warm = math.ceil(warmup_ratio * total_steps)
    if warm > 0 and step <= warm:
        return base_lr * step / warm
    return base_lr * (total_steps - step) / (total_steps - warm)


@dataclass
class RunResult:
    seed: int
    mode: str
    epoch_train_loss: list
    epoch_train_metric: list
    epoch_dev_metric: list
    final_train_metric: float
    final_dev_metric: float
    generalization_gap: float
    wall_time_seconds: float
    config: dict
    # Snapshot of trained weights, in declaration order.  Kept so callers can
    # compare runs bit-for-bit or hand the weights to diagnostics.
    final_params: list = field(default_factory=list, repr=False)


def pearson(preds, targets) -> float:
    """Correlation score for regression; 0 when either side is constant."""
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    pc = p - p.mean()
    tc = t - t.mean()
    denom = np.sqrt((pc * pc).sum() * (tc * tc).sum())
    if denom == 0.0:
        return 0.0
    return float((pc * tc).sum() / denom)


def evaluate(model: EncoderModel, dataset: TextDataset):
    """Mean task loss and metric (accuracy, or correlation for regression)."""
    losses = []
    if model.config.regression:
        preds, targets = [], []
        for ids, label in dataset.examples:
            logits, _ = forward_with_taps(model, ids)
            losses.append(task_loss(logits, label, True).item())
            preds.append(logits.data[0])
            targets.append(float(label))
        return float(np.mean(losses)), pearson(preds, targets)
    hits = 0
    for ids, label in dataset.examples:
        logits, _ = forward_with_taps(model, ids)
        losses.append(task_loss(logits, label, False).item())
        hits += int(np.argmax(logits.data) == label)
    return float(np.mean(losses)), hits / len(dataset.examples)


def _standard_noise_matrix(clean_input: np.ndarray, mask: np.ndarray,
                           spec: NoiseSpec, rng) -> np.ndarray:
    """Per-token standard Gaussian noise, zero on pad rows."""
    eps = rng.normal(0.0, spec.sigma, size=clean_input.shape)
    eps[~mask] = 0.0
    if spec.rel_magnitude is not None:
        target = clean_input.copy()
        target[~mask] = 0.0
        eps = rescale_relative_rows(eps, target, spec.rel_magnitude).data
    return eps


def _inmanifold_noise_matrix(model: EncoderModel, ids, clean_input: np.ndarray,
                             mask: np.ndarray, spec: NoiseSpec, rng, k: int,
                             index: NeighborIndex, basis_cache: dict) -> np.ndarray:
    """Per-token in-manifold noise from vocabulary neighborhoods.

    Each non-pad position queries the embedding table around its own token,
    orthonormalizes the neighbor differences, and draws coefficients; a
    degenerate neighborhood falls back to a standard Gaussian row.
    """
    eps = np.zeros_like(clean_input)
    padded = np.zeros(clean_input.shape[0], dtype=np.int64)
    padded[:len(ids)] = np.asarray(ids)
    for pos in np.flatnonzero(mask):
        tok = int(padded[pos])
        if tok not in basis_cache:
            basis_cache[tok] = neighborhood_basis(index, model.tok_emb.data[tok], k=k)
        basis = basis_cache[tok]
        x_row = clean_input[pos]
        if basis is None:
            row = rng.normal(0.0, spec.sigma, size=x_row.shape[0])
            if spec.rel_magnitude is not None:
                nrm = np.linalg.norm(row)
                xn = np.linalg.norm(x_row)
                row = row * (spec.rel_magnitude * xn / nrm) if nrm > 0 and xn > 0 \
                    else np.zeros_like(row)
            eps[pos] = row
        else:
            eps[pos] = sample_inmanifold_noise(
                x_row, basis, spec.sigma, rng, mix_ratio=spec.rel_magnitude).data
    return eps


def run_training(model_cfg: EncoderConfig, train_ds: TextDataset,
                 dev_ds: TextDataset, cfg: TrainConfig) -> RunResult:
    """One deterministic training run; see module docstring for the loop."""
    mode = cfg.reg.mode
    noisy = mode in NOISY_MODES
    effective_noise = cfg.noise.mode if noisy else "none"
    if effective_noise == "in_manifold" and model_cfg.vocab_size < cfg.knn_k + 1:
        raise ValidationError(
            f"in-manifold mode needs vocab_size >= knn_k + 1"
            f" ({model_cfg.vocab_size} < {cfg.knn_k + 1})"
        )
    b = cfg.reg.injection_layer
    if not 1 <= b <= model_cfg.num_layers:
        raise ValidationError(
            f"injection_layer {b} outside 1..{model_cfg.num_layers}"
        )

    started = time.perf_counter()
    model = build_encoder(model_cfg, cfg.seed)
    params = model.parameters()
    state = AdamState.for_params(params)
    n = len(train_ds.examples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    global_step = 0

    epoch_train_loss, epoch_train_metric, epoch_dev_metric = [], [], []
    for epoch in range(cfg.epochs):
        order = substream_rng(cfg.seed, "order", epoch).permutation(n)
        running = []
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            index = None
            basis_cache: dict = {}
            if effective_noise == "in_manifold":
                index = build_index(model.tok_emb.data)
            T.zero_grads(params)
            inv = 1.0 / len(batch)
            for j, ex_idx in enumerate(batch):
                ids, label = train_ds.examples[int(ex_idx)]
                logits_c, clean = forward_with_taps(model, ids)
                logits_p, r_term, per_layer = None, None, None
                if noisy:
                    ex_rng = substream_rng(cfg.seed, "noise", epoch, start + j)
                    clean_input = clean.layers[b - 1].data
                    mask = clean.token_mask
                    if effective_noise == "standard":
                        eps = _standard_noise_matrix(clean_input, mask, cfg.noise, ex_rng)
                    elif effective_noise == "in_manifold":
                        eps = _inmanifold_noise_matrix(
                            model, ids, clean_input, mask, cfg.noise, ex_rng,
                            cfg.knn_k, index, basis_cache)
                    else:
                        eps = np.zeros_like(clean_input)
                    logits_p, pert = forward_with_taps(model, ids, injection=(b, eps))
                    if mode in ("lnsr_standard", "lnsr_inmanifold"):
                        r_term, per_layer = lnsr_term(clean, pert, cfg.reg)
                obj, _ = assemble_objective(
                    logits_c, logits_p, label, r_term, mode,
                    regression=model_cfg.regression, per_layer_terms=per_layer)
                running.append(obj.item())
                T.backward(obj, seed_grad=inv)
            global_step += 1
            grads = [p.grad.data if p.grad is not None else np.zeros_like(p.data)
                     for p in params]
            step_lr = lr_at(global_step, total_steps, cfg.warmup_ratio, cfg.lr)
            adam_step(params, grads, state, global_step, cfg, lr=step_lr)
        _, train_metric = evaluate(model, train_ds)
        _, dev_metric = evaluate(model, dev_ds)
        epoch_train_loss.append(float(np.mean(running)))
        epoch_train_metric.append(train_metric)
        epoch_dev_metric.append(dev_metric)

    gap = epoch_train_metric[-1] - epoch_dev_metric[-1]
    return RunResult(
        seed=cfg.seed, mode=mode,
        epoch_train_loss=epoch_train_loss,
        epoch_train_metric=epoch_train_metric,
        epoch_dev_metric=epoch_dev_metric,
        final_train_metric=epoch_train_metric[-1],
        final_dev_metric=epoch_dev_metric[-1],
        generalization_gap=gap,
        wall_time_seconds=time.perf_counter() - started,
        final_params=[p.data.copy() for p in params],
        config={"model": vars(model_cfg).copy(),
                "train": {k: v for k, v in vars(cfg).items()
                          if k not in ("noise", "reg")},
                "noise": vars(cfg.noise).copy(),
                "reg": vars(cfg.reg).copy()},
    )


@dataclass
class MultiSeedResult:
    per_seed: list
    dev_mean: float
    dev_std: float
    dev_max: float
    gap_mean: float
    gap_std: float
    gap_max: float


def summarize_runs(runs) -> MultiSeedResult:
    devs = np.array([r.final_dev_metric for r in runs])
    gaps = np.array([r.generalization_gap for r in runs])
    std = (lambda a: float(a.std(ddof=1)) if a.size > 1 else 0.0)
    return MultiSeedResult(
        per_seed=list(runs),
        dev_mean=float(devs.mean()), dev_std=std(devs), dev_max=float(devs.max()),
        gap_mean=float(gaps.mean()), gap_std=std(gaps), gap_max=float(gaps.max()),
    )


def config_for_mode(base_cfg: TrainConfig, mode: str) -> TrainConfig:
    """Variant of ``base_cfg`` running the given objective mode.

    Keeps scales (sigma, relative magnitude, injection layer, lambda) from
    the base config and flips only the mode pair: plain fine-tuning turns
    noise off, the noisy modes select the matching sampler.
    """
    if mode not in MODES:
        raise ValidationError(f"config_for_mode: {mode!r} not in {MODES}")
    noise_mode = {"ft": "none", "ft_noise_only": "standard",
                  "lnsr_standard": "standard", "lnsr_inmanifold": "in_manifold"}[mode]
    return replace(base_cfg,
                   noise=replace(base_cfg.noise, mode=noise_mode),
                   reg=replace(base_cfg.reg, mode=mode))


def multi_seed(model_cfg: EncoderConfig, train_ds: TextDataset,
               dev_ds: TextDataset, base_cfg: TrainConfig, seeds) -> MultiSeedResult:
    """Repeat one configuration across seeds; mean / sample std / max stats."""
    seeds = list(seeds)
    if len(seeds) < 2:
        raise ContractError(f"multi_seed: need at least 2 seeds, got {len(seeds)}")
    runs = [run_training(model_cfg, train_ds, dev_ds, replace(base_cfg, seed=s))
            for s in seeds]
    return summarize_runs(runs)
