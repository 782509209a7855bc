import numpy as np
import pytest

from eowsoftmax import diffcore as dc
from eowsoftmax.data import Dataset
from eowsoftmax.energy import SgldConfig
from eowsoftmax.model import EowClassifier, log_softmax
from eowsoftmax.objective import (
    SgdState,
    TrainConfig,
    TrainingDiverged,
    eow_loss,
    eow_loss_value,
    fit,
    label_smoothing_loss,
    label_smoothing_loss_value,
    sgd_step,
    vanilla_loss,
)


def _model(seed=0, k=3, widths=(2, 16, 16)):
    return EowClassifier(list(widths), k, rng=np.random.default_rng(seed))


def _batch(seed, n=8, k=3):
    rng = np.random.default_rng(100 + seed)
    return rng.normal(size=(n, 2)), rng.integers(0, k, n), np.abs(rng.normal(size=(6, 16)))


def _fd(model, value, analytic):
    theta0 = model.theta.copy()

    def f(t):
        model.theta[:] = t
        return value()

    try:
        return dc.finite_diff_check(f, theta0, analytic=analytic)
    finally:
        model.theta[:] = theta0


class TestEowLoss:
    def test_lambda_zero_is_cross_entropy(self):
        m = _model()
        x, y, z = _batch(0)
        res = eow_loss(m, x, y, z, lam=0.0)
        ce = -log_softmax(m.logits(x))[np.arange(8), y].mean()
        assert abs(res.loss - ce) <= 1e-12
        assert res.energy == 0.0
        np.testing.assert_array_equal(res.grad, eow_loss(m, x, y, None, lam=0.1).grad)

    def test_perfect_model_zero_loss(self):
        m = _model()
        m.theta[:] = 0.0
        m.biases[-1][:] = [800.0, 0.0, 0.0, 0.0]
        x = np.zeros((4, 2))
        res = eow_loss(m, x, np.zeros(4, dtype=int), None, lam=0.0)
        assert res.loss == 0.0
        m.biases[-1][:] = [0.0, 0.0, 0.0, 800.0]
        res = eow_loss(m, x, np.zeros(4, dtype=int), np.zeros((3, 16)), lam=0.1, stage=2)
        assert res.energy == 0.0

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_finite_differences(self, seed):
        m = _model(seed)
        x, y, z = _batch(seed)
        res = eow_loss(m, x, y, z, 0.1, 2)
        assert res.loss == pytest.approx(eow_loss_value(m, x, y, z, 0.1, 2), rel=1e-13)
        assert _fd(m, lambda: eow_loss_value(m, x, y, z, 0.1, 2), res.grad) < 1e-4

    def test_sampled_latents_are_constants(self):
        m = _model(1)
        x, y, z = _batch(1)
        g_ce = eow_loss(m, x, y, None, lam=0.0).grad
        g1 = eow_loss(m, x, y, z, 0.1).grad
        g2 = eow_loss(m, x, y, z + 0.5, 0.1).grad
        assert not np.allclose(g1, g2)
        # the data term is unaffected by the latents, so the difference is the energy term only
        np.testing.assert_allclose(g1 - g_ce, _energy_grad(m, z, 0.1), rtol=1e-10, atol=1e-14)
        np.testing.assert_allclose(g2 - g_ce, _energy_grad(m, z + 0.5, 0.1), rtol=1e-10, atol=1e-14)

    def test_label_range(self):
        m = _model()
        with pytest.raises(ValueError):
            eow_loss(m, np.zeros((1, 2)), [3])


def _energy_grad(m, z, lam):
    tape = dc.Tape()
    params = m.bind(tape)
    logq = dc.log_softmax(m.trace(params, z, 2))
    e = dc.mul(dc.negate(dc.mean(dc.column(logq, m.num_classes))), lam)
    return m.flat_grad(dc.grad(tape, e, params))


class TestBaselines:
    def test_uniform_is_log_k(self):
        m = _model()
        m.theta[:] = 0.0
        x, y, _ = _batch(0)
        assert vanilla_loss(m, x, y).loss == pytest.approx(np.log(3), abs=1e-15)

    def test_one_hot_correct_is_zero(self):
        m = _model()
        m.theta[:] = 0.0
        m.biases[-1][:] = [0.0, 800.0, 0.0, 0.0]
        assert vanilla_loss(m, np.zeros((2, 2)), [1, 1]).loss == 0.0

    def test_ignores_extra_logit(self):
        m = _model(2)
        x, y, _ = _batch(2)
        a = vanilla_loss(m, x, y).loss
        m.biases[-1][-1] += 10.0
        assert vanilla_loss(m, x, y).loss == pytest.approx(a, rel=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_vanilla_gradient(self, seed):
        m = _model(seed)
        x, y, _ = _batch(seed)
        res = vanilla_loss(m, x, y)
        assert _fd(m, lambda: label_smoothing_loss_value(m, x, y, 0.0), res.grad) < 1e-4

    @pytest.mark.parametrize("seed", range(3))
    def test_smoothing_gradient(self, seed):
        m = _model(seed)
        x, y, _ = _batch(seed)
        res = label_smoothing_loss(m, x, y, 0.2)
        assert res.loss == pytest.approx(label_smoothing_loss_value(m, x, y, 0.2), rel=1e-13)
        assert _fd(m, lambda: label_smoothing_loss_value(m, x, y, 0.2), res.grad) < 1e-4

    def test_smoothing_zero_equals_vanilla(self):
        m = _model(4)
        x, y, _ = _batch(4)
        a, b = label_smoothing_loss(m, x, y, 0.0), vanilla_loss(m, x, y)
        assert a.loss == b.loss
        np.testing.assert_array_equal(a.grad, b.grad)

    def test_smoothing_one_minimised_by_uniform(self):
        m = _model(0)
        x, y, _ = _batch(0)
        m.theta[:] = 0.0
        res = label_smoothing_loss(m, x, y, 1.0)
        assert res.loss == pytest.approx(np.log(3), abs=1e-15)
        np.testing.assert_allclose(res.grad, 0.0, atol=1e-15)

    def test_smoothing_hand_case(self):
        # K=2, probs (0.8, 0.2), eps=0.1, true class 0
        m = EowClassifier([1, 1], 2, rng=np.random.default_rng(0))
        m.theta[:] = 0.0
        m.biases[-1][:] = [np.log(0.8), np.log(0.2), 0.0]
        res = label_smoothing_loss(m, np.zeros((1, 1)), [0], 0.1)
        assert res.loss == pytest.approx(-0.95 * np.log(0.8) - 0.05 * np.log(0.2), rel=1e-14)


class TestSgd:
    def test_zero_gradient_no_decay(self):
        theta = np.array([1.0, -2.0])
        state = SgdState(np.zeros(2))
        sgd_step(theta, np.zeros(2), state, 0.1, 0.9, 0.0)
        np.testing.assert_array_equal(theta, [1.0, -2.0])

    def test_plain_gradient_descent(self):
        theta = np.array([1.0, -2.0])
        sgd_step(theta, np.array([0.5, 1.0]), SgdState(np.zeros(2)), 0.1, 0.0, 0.0)
        np.testing.assert_allclose(theta, [0.95, -2.1], rtol=1e-15)

    def test_two_momentum_steps(self):
        theta = np.array([1.0])
        state = SgdState(np.zeros(1))
        sgd_step(theta, np.array([2.0]), state, 0.1, 0.9, 0.01)
        # v1 = 2 + 0.01 * 1 = 2.01; theta1 = 1 - 0.201
        assert theta[0] == pytest.approx(0.799, abs=1e-15)
        sgd_step(theta, np.array([1.0]), state, 0.1, 0.9, 0.01)
        v2 = 0.9 * 2.01 + 1.0 + 0.01 * 0.799
        assert state.velocity[0] == pytest.approx(v2, abs=1e-15)
        assert theta[0] == pytest.approx(0.799 - 0.1 * v2, abs=1e-15)

    def test_non_finite_gradient_skipped(self):
        theta = np.array([1.0])
        state = SgdState(np.array([0.3]))
        assert not sgd_step(theta, np.array([np.nan]), state, 0.1, 0.9, 0.0)
        assert theta[0] == 1.0 and state.velocity[0] == 0.3 and state.skipped == 1


def _separable(seed=0, n=120):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(size=(n // 2, 2)) * 0.3 + [-1.5, 0], rng.normal(size=(n // 2, 2)) * 0.3 + [1.5, 0]])
    y = np.repeat([0, 1], n // 2)
    return Dataset(x, y, 2)


class TestFit:
    def test_zero_epochs(self):
        m = _model(k=2)
        out, hist = fit(m, _separable(), TrainConfig(epochs=0), np.random.default_rng(0))
        assert out.checksum() == m.checksum() and hist == []

    def test_vanilla_separable(self):
        ds = _separable()
        m = EowClassifier([2, 8, 8], 2, rng=np.random.default_rng(0))
        cfg = TrainConfig(loss_kind="vanilla", lr=0.01, epochs=200, batch_size=32)
        out, hist = fit(m, ds, cfg, np.random.default_rng(0))
        assert hist[-1]["train_acc"] == 1.0
        assert out.confidence == "closed"

    def test_eow_separable_and_off_manifold_uncertainty(self):
        ds = _separable()
        m = EowClassifier([2, 8, 8], 2, rng=np.random.default_rng(0))
        cfg = TrainConfig(lr=0.01, epochs=200, batch_size=32,
                          sgld=SgldConfig(stage=0, alpha=0.01, sigma=0.1, steps=20))
        out, hist = fit(m, ds, cfg, np.random.default_rng(0))
        assert hist[-1]["train_acc"] >= 0.95
        probe = np.array([[0.0, 5.0], [0.0, -5.0], [6.0, 6.0], [-6.0, -6.0], [6.0, -6.0], [-6.0, 6.0]])
        assert out.probs(probe)[:, 2].mean() > out.probs(ds.inputs)[:, 2].mean()

    def test_deterministic(self):
        ds = _separable()
        cfg = TrainConfig(lr=0.01, epochs=3, sgld=SgldConfig(steps=5))
        a, _ = fit(_model(k=2), ds, cfg, np.random.default_rng(3))
        b, _ = fit(_model(k=2), ds, cfg, np.random.default_rng(3))
        assert a.theta.tobytes() == b.theta.tobytes()

    def test_metrics_csv(self, tmp_path):
        cfg = TrainConfig(lr=0.01, epochs=2, sgld=SgldConfig(steps=2))
        _, hist = fit(_model(k=2), _separable(), cfg, np.random.default_rng(0), eval_set=_separable(1),
                      metrics_path=tmp_path / "m.csv")
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert len(lines) == 3 and lines[0].startswith("epoch,lr,loss")
        assert np.isfinite(hist[-1]["eval_ece"])

    def test_lr_schedule(self):
        cfg = TrainConfig(lr=1.0, epochs=8)
        assert [cfg.lr_at(e) for e in range(8)] == pytest.approx([1, 1, 1, 1, 0.1, 0.1, 0.01, 0.01])

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_raises(self):
        cfg = TrainConfig(loss_kind="vanilla", lr=1e6, momentum=0.0, epochs=5)
        with pytest.raises(TrainingDiverged):
            fit(_model(k=2), _separable(), cfg, np.random.default_rng(0))

    def test_config_validation(self):
        for bad in ({"lam": -1}, {"lr": 0}, {"momentum": 1.0}, {"loss_kind": "focal"}, {"smoothing": 2}):
            with pytest.raises(ValueError):
                TrainConfig(**bad)
