"""Optimizer, schedule, and training-loop tests.

The closed-form Adam and schedule values are worked by hand; the loop-level
checks compare whole training runs (plain fine-tuning vs. regularized modes)
at the bit level where the algebra says they must coincide.
"""

import dataclasses

import numpy as np
import pytest

from lnsrlab import tensor as T
from lnsrlab.data import synth_classification
from lnsrlab.encoder import EncoderConfig
from lnsrlab.errors import ContractError, ValidationError
from lnsrlab.noise import NoiseSpec
from lnsrlab.objective import RegularizerConfig
from lnsrlab.trainer import (
    AdamState,
    RunResult,
    TrainConfig,
    adam_step,
    evaluate,
    lr_at,
    multi_seed,
    pearson,
    run_training,
    summarize_runs,
)


def _cfg(**over):
    base = dict(lr=2e-3, batch_size=8, epochs=2, seed=3,
                noise=NoiseSpec(mode="none"), reg=RegularizerConfig(mode="ft"))
    base.update(over)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def toy_task():
    train, dev = synth_classification(16, 2, 8, 30, 0.6, seed=0)
    mcfg = EncoderConfig(vocab_size=30, embed_dim=8, num_layers=2, num_heads=2,
                         ffn_dim=16, max_seq_len=8)
    return mcfg, train, dev


# ---------------------------------------------------------------- adam_step

def test_adam_first_step_closed_form():
    # t=1 bias correction makes mhat = g and vhat = g^2, so the update is
    # lr * g / (|g| + eps) regardless of g's magnitude.
    p = T.Tensor(np.array([[1.0]]), requires_grad=True)
    cfg = _cfg(lr=0.1)
    st = AdamState.for_params([p])
    adam_step([p], [np.array([[1.0]])], st, 1, cfg)
    expected = 1.0 - 0.1 * (1.0 / (1.0 + cfg.adam_eps))
    assert p.data[0, 0] == pytest.approx(expected, abs=1e-15)


def test_adam_zero_grad_zero_decay_is_identity():
    vals = np.array([[0.5, -2.0], [3.0, 0.0]])
    p = T.Tensor(vals.copy(), requires_grad=True)
    st = AdamState.for_params([p])
    adam_step([p], [np.zeros((2, 2))], st, 1, _cfg(lr=0.1))
    assert np.array_equal(p.data, vals)


def test_adam_weight_decay_scales_param():
    p = T.Tensor(np.array([[4.0]]), requires_grad=True)
    cfg = _cfg(lr=0.1, weight_decay=0.01)
    st = AdamState.for_params([p])
    adam_step([p], [np.zeros((1, 1))], st, 1, cfg)
    # decoupled decay: p -> p * (1 - lr * wd)
    assert p.data[0, 0] == pytest.approx(4.0 * (1.0 - 0.1 * 0.01), rel=1e-14)


def test_adam_descends_random_quadratic_bowls():
    rng = np.random.default_rng(7)
    cfg = _cfg(lr=1e-3)
    for _ in range(100):
        dim = int(rng.integers(2, 6))
        a = rng.normal(size=(dim, dim))
        h = a @ a.T + dim * np.eye(dim)          # strictly positive definite
        x0 = rng.normal(size=(dim, 1))
        p = T.Tensor(x0.copy(), requires_grad=True)
        st = AdamState.for_params([p])
        loss0 = float((x0.T @ h @ x0).item())
        adam_step([p], [2.0 * h @ x0], st, 1, cfg)
        loss1 = float((p.data.T @ h @ p.data).item())
        assert loss1 < loss0


def test_adam_contracts():
    p = T.Tensor(np.ones((2, 2)), requires_grad=True)
    st = AdamState.for_params([p])
    with pytest.raises(ContractError):
        adam_step([p], [np.ones((2, 2))], st, 0, _cfg())
    with pytest.raises(ContractError):
        adam_step([p], [np.ones((3, 2))], st, 1, _cfg())
    with pytest.raises(ContractError):
        adam_step([p], [], st, 1, _cfg())


# -------------------------------------------------------------------- lr_at

def test_lr_schedule_shape():
    base = 0.5
    # warmup: ceil(0.06 * 100) = 6 steps
    assert lr_at(0, 100, 0.06, base) == 0.0
    assert lr_at(3, 100, 0.06, base) == pytest.approx(base * 3 / 6)
    assert lr_at(6, 100, 0.06, base) == pytest.approx(base)
    # decay side is linear to zero
    assert lr_at(7, 100, 0.06, base) == pytest.approx(base * 93 / 94)
    assert lr_at(100, 100, 0.06, base) == 0.0
    # continuity at the warmup/decay joint
    left = lr_at(6, 100, 0.06, base)
    right = base * (100 - 6) / (100 - 6)
    assert left == pytest.approx(right)


def test_lr_schedule_no_warmup_and_contracts():
    assert lr_at(0, 10, 0.0, 1.0) == pytest.approx(1.0)
    assert lr_at(5, 10, 0.0, 1.0) == pytest.approx(0.5)
    with pytest.raises(ContractError):
        lr_at(-1, 10, 0.1, 1.0)
    with pytest.raises(ContractError):
        lr_at(11, 10, 0.1, 1.0)


def test_lr_schedule_peak_never_exceeds_base():
    for step in range(0, 201):
        assert lr_at(step, 200, 0.1, 0.3) <= 0.3 + 1e-15


# ------------------------------------------------------------ config checks

def test_config_validation():
    with pytest.raises(ValidationError):
        _cfg(lr=0.0)
    with pytest.raises(ValidationError):
        _cfg(warmup_ratio=1.0)
    with pytest.raises(ValidationError):
        _cfg(batch_size=0)
    with pytest.raises(ValidationError):
        _cfg(epochs=0)
    with pytest.raises(ValidationError):
        _cfg(weight_decay=-0.1)
    with pytest.raises(ValidationError):
        _cfg(knn_k=0)


def test_config_rejects_contradictory_mode_noise_pairs():
    with pytest.raises(ValidationError):
        _cfg(noise=NoiseSpec(mode="in_manifold"),
             reg=RegularizerConfig(mode="lnsr_standard"))
    with pytest.raises(ValidationError):
        _cfg(noise=NoiseSpec(mode="standard"),
             reg=RegularizerConfig(mode="lnsr_inmanifold"))
    with pytest.raises(ValidationError):
        _cfg(noise=NoiseSpec(mode="standard", injection_layer=2),
             reg=RegularizerConfig(mode="lnsr_standard", injection_layer=1))


def test_inmanifold_requires_enough_real_tokens(toy_task):
    mcfg, train, dev = toy_task
    cfg = _cfg(knn_k=40,
               noise=NoiseSpec(mode="in_manifold", sigma=0.05),
               reg=RegularizerConfig(mode="lnsr_inmanifold"))
    # vocab has only 28 non-reserved rows; k=40 neighbors cannot exist
    with pytest.raises(ValidationError):
        run_training(mcfg, train, dev, cfg)


# ------------------------------------------------------------ training loop

def test_training_is_deterministic(toy_task):
    mcfg, train, dev = toy_task
    a = run_training(mcfg, train, dev, _cfg())
    b = run_training(mcfg, train, dev, _cfg())
    assert a.epoch_train_loss == b.epoch_train_loss
    assert a.epoch_dev_metric == b.epoch_dev_metric
    assert all(np.array_equal(x, y) for x, y in zip(a.final_params, b.final_params))


def test_training_seed_changes_trajectory(toy_task):
    mcfg, train, dev = toy_task
    a = run_training(mcfg, train, dev, _cfg(seed=3))
    b = run_training(mcfg, train, dev, _cfg(seed=4))
    assert a.epoch_train_loss != b.epoch_train_loss


def test_separable_task_reaches_high_train_accuracy():
    train, dev = synth_classification(40, 2, 8, 30, 1.0, seed=0)
    mcfg = EncoderConfig(vocab_size=30, embed_dim=16, num_layers=2,
                         num_heads=2, ffn_dim=32, max_seq_len=8)
    cfg = _cfg(lr=5e-3, batch_size=16, epochs=3, seed=1)
    res = run_training(mcfg, train, dev, cfg)
    assert res.final_train_metric > 0.95


def test_lambda_zero_with_real_noise_matches_plain_ft(toy_task):
    # With zero penalty weight the perturbed pass contributes exactly zero
    # gradient, so the parameter trajectory must be bitwise unchanged.
    mcfg, train, dev = toy_task
    ft = run_training(mcfg, train, dev, _cfg())
    lz = run_training(mcfg, train, dev, _cfg(
        noise=NoiseSpec(mode="standard", sigma=0.05, rel_magnitude=None),
        reg=RegularizerConfig(mode="lnsr_standard", lambda_weights=0.0)))
    assert ft.epoch_train_loss == lz.epoch_train_loss
    assert all(np.array_equal(a, b)
               for a, b in zip(ft.final_params, lz.final_params))


def test_zero_noise_lnsr_matches_plain_ft(toy_task):
    # eps = 0 makes perturbed and clean traces identical, so the penalty and
    # its gradients vanish exactly.
    mcfg, train, dev = toy_task
    ft = run_training(mcfg, train, dev, _cfg())
    ez = run_training(mcfg, train, dev, _cfg(
        noise=NoiseSpec(mode="none"),
        reg=RegularizerConfig(mode="lnsr_standard", lambda_weights=1.0)))
    assert ft.epoch_train_loss == ez.epoch_train_loss
    assert all(np.array_equal(a, b)
               for a, b in zip(ft.final_params, ez.final_params))


def test_active_regularizer_changes_trajectory(toy_task):
    mcfg, train, dev = toy_task
    ft = run_training(mcfg, train, dev, _cfg())
    ln = run_training(mcfg, train, dev, _cfg(
        noise=NoiseSpec(mode="standard", sigma=0.05, rel_magnitude=None),
        reg=RegularizerConfig(mode="lnsr_standard", lambda_weights=1.0)))
    assert ft.epoch_train_loss != ln.epoch_train_loss
    assert any(not np.array_equal(a, b)
               for a, b in zip(ft.final_params, ln.final_params))


def test_noise_only_mode_trains_on_perturbed_logits(toy_task):
    mcfg, train, dev = toy_task
    ft = run_training(mcfg, train, dev, _cfg())
    no = run_training(mcfg, train, dev, _cfg(
        noise=NoiseSpec(mode="standard", sigma=0.5, rel_magnitude=None),
        reg=RegularizerConfig(mode="ft_noise_only")))
    assert ft.epoch_train_loss != no.epoch_train_loss


def test_inmanifold_training_runs(toy_task):
    mcfg, train, dev = toy_task
    cfg = _cfg(epochs=1, knn_k=4,
               noise=NoiseSpec(mode="in_manifold", sigma=0.05, rel_magnitude=0.05),
               reg=RegularizerConfig(mode="lnsr_inmanifold", lambda_weights=0.5))
    res = run_training(mcfg, train, dev, cfg)
    assert len(res.epoch_train_loss) == 1
    assert np.isfinite(res.epoch_train_loss[0])
    assert res.mode == "lnsr_inmanifold"


# -------------------------------------------------------- evaluate / pearson

def test_pearson_basic():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [-1, -2, -3]) == pytest.approx(-1.0)
    assert pearson([1, 1, 1], [2, 4, 6]) == 0.0


def test_evaluate_on_untrained_model_is_finite(toy_task):
    from lnsrlab.encoder import build_encoder
    mcfg, train, dev = toy_task
    model = build_encoder(mcfg, init_seed=0)
    loss, acc = evaluate(model, dev)
    assert np.isfinite(loss)
    assert 0.0 <= acc <= 1.0


# ------------------------------------------------------------- multi-seed

def _fake_run(dev, gap):
    return RunResult(seed=0, mode="ft", epoch_train_loss=[], epoch_train_metric=[],
                     epoch_dev_metric=[], final_train_metric=dev + gap,
                     final_dev_metric=dev, generalization_gap=gap,
                     wall_time_seconds=0.0, config={})


def test_summary_statistics_worked_example():
    # dev accuracies 70, 72, 74 -> mean 72, sample std 2, max 74
    runs = [_fake_run(70.0, 0.0), _fake_run(72.0, 0.0), _fake_run(74.0, 0.0)]
    s = summarize_runs(runs)
    assert s.dev_mean == pytest.approx(72.0)
    assert s.dev_std == pytest.approx(2.0)
    assert s.dev_max == pytest.approx(74.0)


def test_gap_is_train_minus_dev(toy_task):
    mcfg, train, dev = toy_task
    res = run_training(mcfg, train, dev, _cfg(epochs=1))
    assert res.generalization_gap == pytest.approx(
        res.final_train_metric - res.final_dev_metric)
    # worked example: train 95.89, dev 70.13 -> gap 25.76
    r = _fake_run(70.13, 95.89 - 70.13)
    assert r.final_train_metric - r.final_dev_metric == pytest.approx(25.76)


def test_single_run_std_is_zero():
    s = summarize_runs([_fake_run(50.0, 1.0)])
    assert s.dev_std == 0.0 and s.gap_std == 0.0


def test_multi_seed_runs_each_seed(toy_task):
    mcfg, train, dev = toy_task
    s = multi_seed(mcfg, train, dev, _cfg(epochs=1), seeds=[3, 4])
    assert len(s.per_seed) == 2
    assert [r.seed for r in s.per_seed] == [3, 4]
    with pytest.raises(ContractError):
        multi_seed(mcfg, train, dev, _cfg(epochs=1), seeds=[3])
