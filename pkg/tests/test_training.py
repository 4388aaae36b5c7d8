"""Losses, Adam, the two-stage optimization steps, and the training loop."""

import numpy as np
import pytest

from topocast import tensor as tt
from topocast.data import synthetic_series
from topocast.model import Model, ModelConfig
from topocast.tensor import NumericalError, Tensor
from topocast.training import (
    Adam,
    EarlyStopping,
    TrainConfig,
    adam_step,
    batch_loss,
    inner_step,
    mae,
    mse,
    outer_gradient,
    outer_step,
    train,
)


def tiny_model(seed=0, **kw):
    base = dict(lookback=6, horizon=2, n_vars=2, scheme="temporal",
                layers=1, heads=1, dim=4, ffn_dim=4)
    base.update(kw)
    return Model.build(ModelConfig(**base), seed=seed)


def tiny_batch(seed=5, size=2, lookback=6, horizon=2, n_vars=2):
    rng = np.random.default_rng(seed)
    return [
        (rng.normal(size=(lookback, n_vars)), rng.normal(size=(horizon, n_vars)))
        for _ in range(size)
    ]


class ScalarModel:
    """Minimal stand-in exposing the trainer's model interface: predicts a
    single learnable constant."""

    def __init__(self, value=0.0):
        self.theta = Tensor(np.array([[value]]), requires_grad=True)

    def forward(self, x, record=False):
        return tt.mul(self.theta, 1.0), None

    def named_parameters(self):
        return {"theta": self.theta}

    def inner_names(self):
        return ["theta"]

    def injection_names(self):
        return []


class TestLosses:
    def test_identical_inputs(self):
        y = np.ones((3, 2))
        assert mse(y, y) == 0.0
        assert mae(y, y) == 0.0

    def test_constant_error(self):
        a = np.zeros((4, 3))
        assert mse(a + 2.0, a) == 4.0
        assert mae(a + 2.0, a) == 2.0

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(5, 3))
        b = rng.normal(size=(5, 3))
        se = ae = 0.0
        for i in range(5):
            for j in range(3):
                d = a[i, j] - b[i, j]
                se += d * d
                ae += abs(d)
        assert abs(mse(a, b) - se / 15) < 1e-14
        assert abs(mae(a, b) - ae / 15) < 1e-14

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            mae(np.zeros((2, 2)), np.zeros((3, 2)))


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        p = np.array([1.0, -2.0])
        m = np.zeros(2)
        v = np.zeros(2)
        adam_step([p], [np.zeros(2)], ([m], [v]), lr=0.1, t=1)
        assert np.array_equal(p, [1.0, -2.0])

    def test_first_step_matches_hand_formula(self):
        g = np.array([0.3, -1.7])
        p = np.zeros(2)
        m = np.zeros(2)
        v = np.zeros(2)
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        adam_step([p], [g], ([m], [v]), lr, b1, b2, eps, t=1)
        # bias correction at t=1 cancels the (1-beta) factors exactly
        expected = -lr * g / (np.abs(g) + eps)
        assert np.abs(p - expected).max() < 1e-12

    def test_two_identical_steps_follow_recurrence(self):
        g = np.array([0.5])
        p = np.zeros(1)
        m = np.zeros(1)
        v = np.zeros(1)
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        # independent recurrence evaluation
        em = ev = 0.0
        ep = 0.0
        for t in (1, 2):
            em = b1 * em + (1 - b1) * g[0]
            ev = b2 * ev + (1 - b2) * g[0] ** 2
            ep -= lr * (em / (1 - b1**t)) / (np.sqrt(ev / (1 - b2**t)) + eps)
        adam_step([p], [g], ([m], [v]), lr, b1, b2, eps, t=1)
        adam_step([p], [g], ([m], [v]), lr, b1, b2, eps, t=2)
        assert abs(p[0] - ep) < 1e-12

    def test_t_must_be_positive(self):
        with pytest.raises(ValueError):
            adam_step([np.zeros(1)], [np.zeros(1)],
                      ([np.zeros(1)], [np.zeros(1)]), lr=0.1, t=0)

    def test_named_adam_matches_functional(self):
        g = np.array([0.3, 0.9])
        p1 = np.array([1.0, 1.0])
        p2 = p1.copy()
        m = np.zeros(2)
        v = np.zeros(2)
        opt = Adam()
        opt.step({"p": (p1, g)}, lr=0.05)
        adam_step([p2], [g], ([m], [v]), lr=0.05, t=1)
        assert np.abs(p1 - p2).max() < 1e-15


class TestInnerStep:
    def test_zero_learning_rate_keeps_model(self):
        model = tiny_model()
        before = {n: p.data.copy() for n, p in model.named_parameters().items()}
        inner_step(model, tiny_batch(), lr=0.0, optimizer=None)
        for n, p in model.named_parameters().items():
            assert np.array_equal(p.data, before[n])

    def test_scalar_model_hand_gradient(self):
        # loss (theta - 1)^2 at theta = 0 with lr 0.1 steps to 0.2
        model = ScalarModel(0.0)
        batch = [(np.zeros((1, 1)), np.array([[1.0]]))]
        inner_step(model, batch, lr=0.1, optimizer=None)
        assert abs(model.theta.data[0, 0] - 0.2) < 1e-12

    def test_injection_raws_untouched(self):
        model = tiny_model()
        raws = {n: model.named_parameters()[n].data.copy()
                for n in model.injection_names()}
        inner_step(model, tiny_batch(), lr=0.05, optimizer=Adam())
        for n, before in raws.items():
            assert np.array_equal(model.named_parameters()[n].data, before)

    def test_descent_for_small_learning_rates(self):
        batch = tiny_batch()
        for lr in (1e-4, 1e-3, 1e-2):
            model = tiny_model(seed=3)
            before = batch_loss(model, batch).item()
            inner_step(model, batch, lr=lr, optimizer=None)
            after = batch_loss(model, batch).item()
            assert after < before

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            inner_step(tiny_model(), [], lr=0.1)

    def test_nonfinite_loss_aborts(self):
        model = tiny_model()
        batch = [(np.full((6, 2), np.nan), np.zeros((2, 2)))]
        with pytest.raises(NumericalError):
            inner_step(model, batch, lr=0.1)


class TestOuterStep:
    def test_zero_learning_rate_keeps_raws(self):
        model = tiny_model()
        batch = tiny_batch()
        inner_step(model, batch, lr=0.01, optimizer=None)
        raws = {n: model.named_parameters()[n].data.copy()
                for n in model.injection_names()}
        outer_step(model, batch, eta2=0.0, optimizer=Adam(),
                   mode="first-order")
        for n, before in raws.items():
            assert np.array_equal(model.named_parameters()[n].data, before)

    def test_exact_equals_first_order_when_inner_rate_zero(self):
        model = tiny_model(seed=7)
        batch = tiny_batch(seed=8)
        pre = {n: model.named_parameters()[n].data.copy()
               for n in model.inner_names()}
        exact = outer_gradient(model, batch, "exact", eta1=0.0, pre_inner=pre)
        first = outer_gradient(model, batch, "first-order")
        for n in exact:
            assert np.abs(exact[n] - first[n]).max() < 1e-12

    def test_exact_differs_from_first_order_when_inner_rate_positive(self):
        model = tiny_model(seed=9)
        batch = tiny_batch(seed=10)
        pre = {n: model.named_parameters()[n].data.copy()
               for n in model.inner_names()}
        exact = outer_gradient(model, batch, "exact", eta1=0.05, pre_inner=pre)
        inner_step(model, batch, lr=0.05, optimizer=None)
        first = outer_gradient(model, batch, "first-order")
        assert max(np.abs(exact[n] - first[n]).max() for n in exact) > 1e-9

    def test_exact_matches_finite_differences_of_two_stage_objective(self):
        cfg = ModelConfig(lookback=5, horizon=2, n_vars=2, scheme="variable",
                          layers=1, heads=1, dim=4, ffn_dim=2)
        model = Model.build(cfg, seed=11)
        n_params = sum(p.data.size for p in model.named_parameters().values())
        assert n_params <= 200
        batch = tiny_batch(seed=12, lookback=5)
        eta1 = 0.05
        params = model.named_parameters()
        pre = {n: params[n].data.copy() for n in model.inner_names()}
        exact = outer_gradient(model, batch, "exact", eta1=eta1, pre_inner=pre)

        def objective():
            probe = Model.build(cfg, seed=11)
            for n, p in probe.named_parameters().items():
                p.data[...] = params[n].data
            inner_step(probe, batch, eta1, None)
            return batch_loss(probe, batch).item()

        h = 1e-4
        for name in model.injection_names():
            flat = params[name].data.reshape(-1)
            grad = exact[name].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = objective()
                flat[i] = orig - h
                down = objective()
                flat[i] = orig
                fd = (up - down) / (2 * h)
                assert abs(grad[i] - fd) / max(1.0, abs(grad[i])) < 1e-4

    def test_exact_requires_pre_inner_parameters(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            outer_gradient(model, tiny_batch(), "exact", eta1=0.1)

    def test_exact_with_adam_inner_rejected(self):
        with pytest.raises(ValueError, match="sgd"):
            TrainConfig(outer_mode="exact", inner_optimizer="adam")


class TestEarlyStopping:
    def test_stops_after_exactly_patience_bad_epochs(self):
        stopper = EarlyStopping(patience=3)
        outcomes = [stopper.update(v, e) for e, v in
                    enumerate([1.0, 1.1, 1.1, 1.1], start=1)]
        assert outcomes == [(True, False), (False, False), (False, False),
                            (False, True)]
        assert stopper.best_epoch == 1

    def test_improvement_resets_counter(self):
        stopper = EarlyStopping(patience=2)
        seq = [1.0, 1.2, 0.9, 1.5, 1.5]
        stops = [stopper.update(v, e)[1] for e, v in enumerate(seq, start=1)]
        assert stops == [False, False, False, False, True]
        assert stopper.best == 0.9


class TestTrain:
    def dataset(self, seed=0, length=220, n_vars=2):
        return synthetic_series(n_vars, length, periods=(8, 20),
                                noise_std=0.05, seed=seed)

    def model_cfg(self, **kw):
        base = dict(lookback=12, horizon=4, n_vars=2, scheme="variable",
                    layers=1, heads=2, dim=8, ffn_dim=8)
        base.update(kw)
        return ModelConfig(**base)

    def test_baseline_mode_has_no_injection_parameters(self):
        model, metrics, _ = train(
            self.dataset(), self.model_cfg(inject=False),
            TrainConfig(batch_size=32, max_epochs=1, seed=1),
        )
        assert model.injection_names() == []
        assert len(metrics.epochs) == 1

    def test_deterministic_metric_traces(self):
        cfg = TrainConfig(batch_size=32, max_epochs=2, seed=3)
        _, m1, _ = train(self.dataset(), self.model_cfg(), cfg)
        _, m2, _ = train(self.dataset(), self.model_cfg(), cfg)
        assert m1.to_csv() == m2.to_csv()

    def test_exact_mode_training_runs(self):
        cfg = TrainConfig(batch_size=64, max_epochs=1, seed=4,
                          outer_mode="exact", inner_optimizer="sgd")
        _, metrics, _ = train(self.dataset(length=80), self.model_cfg(), cfg)
        assert np.isfinite(metrics.test_mse)

    def test_restores_best_validation_model(self):
        cfg = TrainConfig(batch_size=16, max_epochs=6, patience=2, seed=5,
                          inner_lr=0.05, lr_decay=1.0)
        model, metrics, stats = train(self.dataset(), self.model_cfg(), cfg)
        best = min(r.val_mse for r in metrics.epochs)
        from topocast.data import split
        from topocast.training import evaluate

        _, val_view, _ = split(self.dataset(), ratios=(0.7, 0.1, 0.2),
                               lookback=12, overhang=True)
        val_mse, _ = evaluate(model, val_view, stats, 12, 4)
        assert abs(val_mse - best) < 1e-12

    def test_early_stop_limits_epochs(self):
        # aggressive learning rate destabilizes validation quickly
        cfg = TrainConfig(batch_size=16, max_epochs=30, patience=2, seed=6,
                          inner_lr=0.5, lr_decay=1.0)
        _, metrics, _ = train(self.dataset(), self.model_cfg(), cfg)
        bad = 0
        best = float("inf")
        for r in metrics.epochs:
            if r.val_mse < best:
                best = r.val_mse
                bad = 0
            else:
                bad += 1
            if bad >= 2:
                break
        assert len(metrics.epochs) < 30
        assert bad == 2

    def test_decayed_outer_rate_converges(self):
        # halving every epoch: late-epoch injection weights are Cauchy
        from topocast.tensor import Tensor as _T

        effs = []

        def hook(model, record, metrics):
            inj = model.injection()[0]
            pe, sim = inj.effective()
            effs.append(np.concatenate([pe.data.ravel(), sim.data.ravel()]))

        cfg = TrainConfig(batch_size=64, max_epochs=26, patience=26, seed=7,
                          outer_lr=1e-3, lr_decay=0.5)
        train(self.dataset(length=60), self.model_cfg(), cfg,
              epoch_hook=hook)
        assert len(effs) == 26
        assert np.abs(effs[-1] - effs[-2]).max() < 1e-9

    def test_norm_stats_fit_on_train_split_only(self):
        from topocast.data import split
        from topocast.tokens import fit_norm

        ds = self.dataset()
        cfg = TrainConfig(batch_size=32, max_epochs=1, seed=10)
        _, _, stats = train(ds, self.model_cfg(), cfg)
        train_view, _, _ = split(ds, ratios=(0.7, 0.1, 0.2), lookback=12,
                                 overhang=True)
        expected = fit_norm(train_view.core)
        assert np.array_equal(stats.mean, expected.mean)
        assert np.array_equal(stats.std, expected.std)

    def test_csv_has_expected_format(self):
        cfg = TrainConfig(batch_size=32, max_epochs=1, seed=8)
        _, metrics, _ = train(self.dataset(), self.model_cfg(), cfg)
        lines = metrics.to_csv().strip().split("\n")
        assert lines[0] == "epoch,train_loss,val_mse,val_mae"
        assert lines[1].startswith("1,")
        assert lines[-1].startswith("test,")

    def test_dual_model_trains(self):
        cfg = TrainConfig(batch_size=64, max_epochs=1, seed=9)
        model, metrics, _ = train(
            self.dataset(), self.model_cfg(scheme="temporal"), cfg,
            kind="dual",
        )
        assert model.kind == "dual"
        assert np.isfinite(metrics.test_mse)
