"""Loss, optimizer, folds, and the training loop."""

import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cardiospike.autodiff import Value, grad_check
from cardiospike.data import SynthConfig, synth_corpus
from cardiospike.model import DetectorConfig, init_params
from cardiospike.training import (EpochStats, FoldReport, OptimizerError,
                                  OptimizerState, TrainConfig, TrainingDiverged,
                                  adamw_step, cross_validate, focal_loss,
                                  format_report, kfold_split, train)


# --- focal loss ---------------------------------------------------------------

def test_focal_reduces_to_half_bce():
    # with gamma = 0 and alpha = 0.5, the loss is half the cross-entropy;
    # independent oracle: BCE = mean(log(1 + e^z) - y z)
    rng = np.random.default_rng(0)
    z = rng.normal(scale=4.0, size=(200, 1))
    y = (rng.random(200) < 0.4).astype(int)
    got = focal_loss(Value(z), y, alpha=0.5, gamma=0.0).item()
    bce = float(np.mean(np.logaddexp(0.0, z[:, 0]) - y * z[:, 0]))
    assert got == pytest.approx(0.5 * bce, abs=1e-12)


def test_focal_single_point_oracle():
    # p = 0.5 at z = 0: loss = alpha * ln 2
    got = focal_loss(Value(np.zeros((1, 1))), np.array([1]), alpha=0.5, gamma=0.0)
    assert got.item() == pytest.approx(0.5 * math.log(2.0), abs=1e-15)
    # y = 1, z = ln 9 so p = 0.9; alpha 0.25, gamma 2:
    # loss = 0.25 * (1 - 0.9)^2 * (-ln 0.9)
    z = np.array([[math.log(9.0)]])
    got = focal_loss(Value(z), np.array([1]), alpha=0.25, gamma=2.0)
    assert got.item() == pytest.approx(0.25 * 0.01 * -math.log(0.9), rel=1e-12)


def test_focal_weights_classes_asymmetrically():
    z = np.zeros((1, 1))
    pos = focal_loss(Value(z), np.array([1]), alpha=0.25, gamma=0.0).item()
    neg = focal_loss(Value(z), np.array([0]), alpha=0.25, gamma=0.0).item()
    assert pos == pytest.approx(0.25 * math.log(2.0))
    assert neg == pytest.approx(0.75 * math.log(2.0))


def test_focal_gradient_matches_fd(rng):
    t = (rng.random(40) < 0.3).astype(int)
    for gamma in (0.0, 1.0, 2.0):
        z = Value(rng.normal(scale=3.0, size=(40, 1)))
        err = grad_check(lambda v: focal_loss(v, t, 0.25, gamma), z, step=1e-5)
        assert err < 1e-7


def test_focal_is_stable_at_extreme_logits():
    z = np.array([[700.0], [-700.0]])
    t = np.array([0, 1])
    loss = focal_loss(Value(z), t, alpha=0.25, gamma=2.0)
    assert np.isfinite(loss.item())
    zz = Value(z, requires_grad=True)
    focal_loss(zz, t, 0.25, 2.0).backward()
    assert np.isfinite(zz.grad).all()


def test_focal_rejects_bad_targets():
    with pytest.raises(ValueError):
        focal_loss(Value(np.zeros((3, 1))), np.array([0, 1, 2]), 0.25, 2.0)
    with pytest.raises(ValueError):
        focal_loss(Value(np.zeros((3, 1))), np.array([0, 1]), 0.25, 2.0)


# --- AdamW ---------------------------------------------------------------------

class Bag:
    """Minimal params-like wrapper for optimizer tests."""

    def __init__(self, tensors):
        self.tensors = tensors

    def items(self):
        return self.tensors.items()


def test_adamw_first_step_oracle():
    # hand-computed: m=0.1, v=0.001, mhat=1, vhat=1
    # w' = 1 - 0.1/(1 + 1e-8) - 0.1*0.01*1
    w = Value(np.array([1.0]), requires_grad=True)
    w._grad = np.array([1.0])
    cfg = TrainConfig(learning_rate=0.1, weight_decay=0.01)
    adamw_step(Bag({"w": w}), OptimizerState(), cfg)
    expected = 1.0 - 0.1 / (1.0 + 1e-8) - 0.001
    assert w.data[0] == pytest.approx(expected, abs=1e-16)


def test_adamw_zero_grad_pure_decay():
    w = Value(np.array([2.0]), requires_grad=True)
    w._grad = np.array([0.0])
    cfg = TrainConfig(learning_rate=0.05, weight_decay=0.1)
    state = OptimizerState()
    adamw_step(Bag({"w": w}), state, cfg)
    assert w.data[0] == pytest.approx(2.0 * (1 - 0.05 * 0.1), abs=1e-15)
    np.testing.assert_array_equal(state.m["w"], [0.0])
    np.testing.assert_array_equal(state.v["w"], [0.0])


def test_adamw_no_decay_no_grad_is_identity():
    w = Value(np.array([3.0]), requires_grad=True)
    w._grad = np.array([0.0])
    cfg = TrainConfig(learning_rate=0.05, weight_decay=0.0)
    adamw_step(Bag({"w": w}), OptimizerState(), cfg)
    assert w.data[0] == 3.0


def test_adamw_matches_scalar_reference():
    # pure-python scalar reference, 100 steps, agreement to 1e-12
    cfg = TrainConfig(learning_rate=0.01, weight_decay=0.02)
    rng = np.random.default_rng(3)
    grads = rng.normal(size=100)

    w_ref, m_ref, v_ref = 0.7, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m_ref = cfg.beta1 * m_ref + (1 - cfg.beta1) * g
        v_ref = cfg.beta2 * v_ref + (1 - cfg.beta2) * g * g
        mhat = m_ref / (1 - cfg.beta1 ** t)
        vhat = v_ref / (1 - cfg.beta2 ** t)
        w_ref = w_ref - cfg.learning_rate * (
            mhat / (math.sqrt(vhat) + cfg.epsilon) + cfg.weight_decay * w_ref)

    w = Value(np.array([0.7]), requires_grad=True)
    state = OptimizerState()
    for g in grads:
        w._grad = np.array([g])
        adamw_step(Bag({"w": w}), state, cfg)
    assert w.data[0] == pytest.approx(w_ref, abs=1e-12)
    assert state.step == 100


def test_adamw_rejects_nan_grad():
    w = Value(np.array([1.0]), requires_grad=True)
    w._grad = np.array([np.nan])
    with pytest.raises(OptimizerError, match="w"):
        adamw_step(Bag({"w": w}), OptimizerState(), TrainConfig())


# --- config and folds --------------------------------------------------------------

def test_train_config_validation():
    for bad in (dict(focal_alpha=0.0), dict(focal_alpha=1.0), dict(focal_gamma=-1),
                dict(learning_rate=0.0), dict(weight_decay=-0.1), dict(beta1=1.0),
                dict(beta2=0.0), dict(epsilon=0.0), dict(epochs=-1),
                dict(batch_size=0), dict(threshold=0.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    cfg = TrainConfig()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@given(st.integers(2, 12), st.integers(0, 2 ** 32 - 1))
def test_kfold_partition_property(k, seed):
    n = k + int(seed % 17)
    folds = kfold_split(n, k, seed)
    assert len(folds) == k
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    everything = np.concatenate(folds)
    assert sorted(everything) == list(range(n))


def test_kfold_validation_and_determinism():
    with pytest.raises(ValueError):
        kfold_split(3, 5, 0)
    with pytest.raises(ValueError):
        kfold_split(10, 1, 0)
    a = kfold_split(20, 4, 9)
    b = kfold_split(20, 4, 9)
    for fa, fb in zip(a, b):
        np.testing.assert_array_equal(fa, fb)


# --- training loop ----------------------------------------------------------------

SMALL = DetectorConfig(base_channels=4, hidden_channels=6, side_channels=8,
                       layers_per_block=2, num_stacks=1, segment_len=16, pad=2)


def test_train_runs_and_is_deterministic(tiny_corpus):
    tcfg = TrainConfig(epochs=2, batch_size=32, seed=5)
    p1, h1 = train(tiny_corpus, SMALL, tcfg)
    p2, h2 = train(tiny_corpus, SMALL, tcfg)
    assert h1 == h2
    assert len(h1) == 2
    for name in p1.names():
        np.testing.assert_array_equal(p1[name].data, p2[name].data)
    assert all(isinstance(e, EpochStats) for e in h1)
    assert p1.allfinite()


def test_train_zero_epochs_returns_init(tiny_corpus):
    tcfg = TrainConfig(epochs=0, seed=3)
    params, history = train(tiny_corpus, SMALL, tcfg)
    assert history == []
    ref = init_params(SMALL, seed=3)
    for name in ref.names():
        np.testing.assert_array_equal(params[name].data, ref[name].data)


def test_train_rejects_empty():
    with pytest.raises(ValueError):
        train([], SMALL, TrainConfig())


def test_train_divergence_carries_last_good(tiny_corpus):
    # decoupled decay at lr * wd = 1e6 roughly multiplies every weight by
    # -1e6 per step, so the forward pass overflows within a few epochs
    tcfg = TrainConfig(epochs=40, learning_rate=1e8, seed=0)
    with pytest.raises(TrainingDiverged) as exc, np.errstate(all="ignore"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            train(tiny_corpus[:2], SMALL, tcfg)
    assert exc.value.params.allfinite()
    assert len(exc.value.history) < 40


def test_cross_validate_reports(tiny_corpus):
    tcfg = TrainConfig(epochs=1, batch_size=32, seed=1)
    reports = cross_validate(tiny_corpus, SMALL, tcfg, k=3)
    assert [r.fold for r in reports] == [0, 1, 2]
    for r in reports:
        assert isinstance(r, FoldReport)
        assert r.tp + r.fp + r.fn + r.tn > 0
        assert 0.0 <= r.f_score <= 1.0
        assert len(r.history) == 1
        assert r.params is not None
    text = format_report(reports)
    assert text.startswith("fold\tepoch\tmean_loss\tf_score\n")
    assert "# mean f_score over 3 folds" in text


def test_cross_validate_test_samples_partition(tiny_corpus):
    # each record appears in exactly one fold's test set
    tcfg = TrainConfig(epochs=0, seed=2)
    reports = cross_validate(tiny_corpus, SMALL, tcfg, k=3)
    total = sum(r.tp + r.fp + r.fn + r.tn for r in reports)
    assert total == sum(len(r) for r in tiny_corpus)
