import copy
import json
import math

import numpy as np
import pytest

from weakts.errors import ConfigurationError, ContractError, TrainingError
from weakts.gradcheck import as_param, check_gradients
from weakts.pipeline import PipelineConfig, build_splits, stack
from weakts.synth import SynthConfig, generate
from weakts.tensor import Tape
from weakts.training import (AdamState, ReduceOnPlateau, TrainConfig, adam_step, cross_entropy,
                             evaluate, mean_loss, predict_proba, run_replicates, train)
from weakts.zoo import ModelSpec, TSCModel, load_checkpoint

TOY = dict(fcn_filters=(4, 6, 4), lstm_units=3, d_model=4)


@pytest.fixture(scope="module")
def corpus():
    return generate(SynthConfig(length=400, noise=0.5, seed=11), 18)


@pytest.fixture(scope="module")
def splits(corpus):
    return {n: build_splits(corpus, PipelineConfig(steps=n)) for n in (1, 2)}


def tiny(name, steps=None):
    return ModelSpec.create(name, channels=6, length=40, steps=steps, **TOY)


class TestCrossEntropy:
    def test_perfect_prediction(self):
        assert cross_entropy(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 1]).item() == 0.0

    def test_uniform(self):
        assert cross_entropy(np.full((3, 2), 0.5), [0, 1, 1]).item() == pytest.approx(math.log(2))

    def test_clamped(self):
        assert cross_entropy(np.array([[0.0, 1.0]]), [0]).item() == pytest.approx(-math.log(1e-12))

    def test_monotone_in_true_class_probability(self):
        losses = [cross_entropy(np.array([[1 - p, p]]), [1]).item() for p in (0.2, 0.5, 0.9)]
        assert losses[0] > losses[1] > losses[2]

    def test_invalid_labels(self):
        with pytest.raises(ContractError):
            cross_entropy(np.full((2, 2), 0.5), [0, 2])
        with pytest.raises(ContractError):
            cross_entropy(np.full((2, 2), 0.5), [0, 1, 1])

    def test_gradient(self, rng):
        p = rng.uniform(0.1, 0.9, size=(4, 1))
        probs = as_param(np.hstack([p, 1 - p]))
        assert check_gradients(lambda: cross_entropy(probs, [0, 1, 1, 0]), [probs]).ok


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        p = np.array([1.0, -2.0])
        state = AdamState.zeros_like([p])
        for _ in range(5):
            adam_step([p], [np.zeros(2)], state, 1e-3)
        assert p.tolist() == [1.0, -2.0]

    @pytest.mark.parametrize("g", [3.0, -0.2, 1e-6])
    def test_first_step_closed_form(self, g):
        p = np.array([0.0])
        adam_step([p], [np.array([g])], AdamState.zeros_like([p]), 1e-3)
        b1, b2, eps = 0.9, 0.999, 1e-8
        # m_hat = g and v_hat = g^2 after bias correction
        expected = -1e-3 * g / (abs(g) + eps)
        assert p[0] == pytest.approx(expected, rel=1e-12)
        assert abs(p[0] + 1e-3 * np.sign(g)) < 1e-3 * eps / abs(g) * (1 + b1 + b2)

    def test_matches_reference_loop(self, rng):
        grads = rng.normal(size=(6, 3))
        p = np.zeros(3)
        state = AdamState.zeros_like([p])
        m = v = np.zeros(3)
        ref = np.zeros(3)
        for t, g in enumerate(grads, start=1):
            adam_step([p], [g], state, 0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p, ref, rtol=1e-12)

    def test_symmetry(self):
        a, b = np.array([0.5]), np.array([0.5])
        state = AdamState.zeros_like([a, b])
        for g in (0.1, -0.3, 0.7):
            adam_step([a, b], [np.array([g]), np.array([g])], state, 1e-2)
        assert a[0] == b[0]

    def test_shape_mismatch(self):
        p = np.zeros(3)
        with pytest.raises(ContractError):
            adam_step([p], [np.zeros(2)], AdamState.zeros_like([p]), 1e-3)
        with pytest.raises(ContractError):
            adam_step([p], [], AdamState.zeros_like([p]), 1e-3)


def simulate_plateau(losses, lr, factor, patience, min_lr):
    """Independent re-statement of the schedule used as an oracle."""
    best, since, lrs = math.inf, 0, []
    for loss in losses:
        if loss < best:
            best, since = loss, 0
        else:
            since += 1
            if since == patience:
                lr, since = max(lr * factor, min_lr), 0
        lrs.append(lr)
    return lrs


class TestPlateau:
    def test_flat_loss_two_reductions(self):
        sched = ReduceOnPlateau(1e-3, 0.5, 10, 1e-4)
        lrs = [sched.step(1.0) for _ in range(21)]
        assert sched.reductions == 2
        assert lrs[-1] == pytest.approx(2.5e-4)
        assert lrs == simulate_plateau([1.0] * 21, 1e-3, 0.5, 10, 1e-4)

    def test_decreasing_loss_never_reduces(self):
        sched = ReduceOnPlateau(1e-3)
        for k in range(30):
            sched.step(1.0 / (k + 1))
        assert sched.reductions == 0 and sched.lr == 1e-3

    def test_floor(self):
        sched = ReduceOnPlateau(1e-3, 0.5, 1, 3e-4)
        for _ in range(10):
            sched.step(1.0)
        assert sched.lr == 3e-4 and sched.reductions == 2

    def test_random_losses_match_simulation(self, rng):
        losses = rng.uniform(size=200).round(1)
        sched = ReduceOnPlateau(1e-3, 0.5, 4, 1e-5)
        assert [sched.step(v) for v in losses] == simulate_plateau(losses, 1e-3, 0.5, 4, 1e-5)


class TestTrainConfig:
    @pytest.mark.parametrize("kwargs", [dict(plateau_factor=1.0), dict(plateau_factor=0.0),
                                        dict(min_lr=1e-2), dict(epochs=0), dict(replicates=0)])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kwargs)


class TestTrain:
    @pytest.mark.parametrize("name, steps", [("FCN", 1), ("FCN_LSTM", 2), ("FCN_SelfA", 2)])
    def test_report_contract(self, splits, name, steps):
        cfg = TrainConfig(epochs=3, batch_size=64, seed=4)
        model, report = train(tiny(name, steps), splits[steps], cfg)
        assert len(report.train_loss) == len(report.val_loss) == len(report.lr) == 3
        assert report.best_val_loss == min(report.val_loss)
        assert report.val_loss[report.best_epoch] == report.best_val_loss
        assert set(report.test) == {"acc", "auc", "f1_0", "f1_1"}
        assert report.dataset_hash == splits[steps].fingerprint()
        assert not model.training

    def test_best_snapshot_is_returned(self, splits):
        model, report = train(tiny("FCN"), splits[1], TrainConfig(epochs=4, batch_size=64))
        Xv, yv = stack(splits[1].validation)
        assert mean_loss(model, Xv, yv) == pytest.approx(report.best_val_loss, abs=1e-12)

    def test_same_seed_identical_report(self, splits):
        cfg = TrainConfig(epochs=2, batch_size=64, seed=9)
        a = train(tiny("FCN_LSTM", 2), splits[2], cfg)[1]
        b = train(tiny("FCN_LSTM", 2), splits[2], cfg)[1]
        assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())
        c = train(tiny("FCN_LSTM", 2), splits[2], TrainConfig(epochs=2, batch_size=64, seed=10))[1]
        assert c.train_loss != a.train_loss

    def test_nan_input_aborts(self, splits):
        bad = copy.deepcopy(splits[1])
        bad.train[0].subsequences[0, 0, 0] = np.nan
        with pytest.raises(TrainingError, match="epoch 0, batch"):
            train(tiny("FCN"), bad, TrainConfig(epochs=1, batch_size=len(bad.train)))

    def test_step_mismatch(self, splits):
        with pytest.raises(ContractError):
            train(tiny("FCN_LSTM", 2), splits[1], TrainConfig(epochs=1))

    def test_checkpoint(self, splits, tmp_path):
        model, report = train(tiny("FCN"), splits[1], TrainConfig(epochs=1, batch_size=64),
                              checkpoint=tmp_path / "fcn")
        restored = load_checkpoint(tmp_path / "fcn")
        assert evaluate(restored, splits[1].test) == report.test

    @pytest.mark.slow
    def test_learns_separable_corpus(self):
        # noiseless, no redundancy, no boundary jitter: the classes differ only by motif band
        cfg = SynthConfig(noise=0.0, redundancy=0.0, boundary_jitter=0, seed=1)
        sp = build_splits(generate(cfg, 18), PipelineConfig(steps=1))
        model, _ = train(ModelSpec.create("FCN", channels=6, length=40, fcn_filters=(16, 32, 16)),
                         sp, TrainConfig(epochs=8, batch_size=32))
        X, y = stack(sp.test)
        pred = predict_proba(model, X).argmax(axis=1)
        # pieces cut at a label change can hold only a few real samples, too few to
        # resolve the motif band; whole windows carry the full pattern
        full = np.array([b.masks[-1].all() for b in sp.test])
        assert full.mean() > 0.6
        assert np.mean(pred[full] == y[full]) >= 0.99


class TestReplicates:
    def test_seeds_and_mean(self, splits, tmp_path):
        cfg = TrainConfig(epochs=1, batch_size=64, seed=3, replicates=3)
        rep = run_replicates(tiny("FCN"), splits[1], cfg, checkpoint_dir=tmp_path)
        assert [r.seed for r in rep.replicates] == [3, 4, 5]
        assert rep.mean["acc"] == pytest.approx(np.mean([r.test["acc"] for r in rep.replicates]))
        assert sorted(p.name for p in tmp_path.iterdir())[0] == "FCN_seed3.json"
        d = rep.to_dict()
        assert set(d["curves"]) == {"3", "4", "5"}

    def test_threads_match_serial(self, splits):
        cfg = TrainConfig(epochs=1, batch_size=64, replicates=2)
        a = run_replicates(tiny("FCN"), splits[1], cfg)
        b = run_replicates(tiny("FCN"), splits[1], cfg, jobs=2)
        assert json.dumps(a.to_dict()) == json.dumps(b.to_dict())


def test_gradient_step_reduces_loss(splits):
    X, y = stack(splits[1].train[:64])
    model = TSCModel(tiny("FCN"), seed=0)
    params = model.parameters()
    with Tape() as tape:
        loss = cross_entropy(model(X), y)
        tape.backward(loss)
    adam_step([p.values for p in params], [p.grad for p in params],
              AdamState.zeros_like([p.values for p in params]), 1e-3)
    assert cross_entropy(model(X), y).item() < loss.item()
