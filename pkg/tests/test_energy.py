import numpy as np
import pytest

from eowsoftmax import kernels
from eowsoftmax import diffcore as dc
from eowsoftmax.energy import (
    PersistentBuffer,
    SamplingDiverged,
    SgldConfig,
    auxiliary_energy,
    init_chain,
    langevin,
    pointwise_energies,
    run_chain,
    sample,
    sampling_energy,
    sampling_energy_naive,
    sgld_step,
    ChainState,
)
from eowsoftmax.model import EowClassifier


def _model(seed=0, widths=(3, 8, 6), k=2):
    return EowClassifier(list(widths), k, rng=np.random.default_rng(seed))


def _zero(widths=(3, 8, 6), k=2):
    m = _model(0, widths, k)
    m.theta[:] = 0.0
    return m


class TestEnergies:
    def test_degenerate_uncertainty_gives_zero(self):
        m = _zero()
        m.biases[-1][-1] = 800.0  # h[K+1] == 1 in float64
        assert sampling_energy(m, np.ones((2, 6)), 2) == 0.0

    def test_uniform_values(self):
        m = _zero()
        z = np.random.default_rng(0).normal(size=(4, 6))
        assert sampling_energy(m, z, 2) == pytest.approx(np.log(3), abs=1e-15)
        assert auxiliary_energy(m, z, 2) == pytest.approx(np.log(1.5), abs=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_dual_path(self, seed):
        m = _model(seed)
        z = np.abs(np.random.default_rng(seed).normal(size=(16, 6)))
        assert sampling_energy(m, z, 2) == pytest.approx(sampling_energy_naive(m, z, 2), abs=1e-10)

    @pytest.mark.parametrize("seed", range(10))
    def test_complementary_masses(self, seed):
        m = _model(seed)
        x = np.random.default_rng(seed).normal(scale=3, size=(64, 3))
        e, e_aux = pointwise_energies(m, x, 0)
        np.testing.assert_allclose(np.exp(-e) + np.exp(-e_aux), 1.0, rtol=0, atol=1e-10)

    @pytest.mark.parametrize("seed", range(5))
    def test_auxiliary_below_every_class_nll(self, seed):
        m = _model(seed, k=4)
        x = np.random.default_rng(seed).normal(size=(32, 3))
        _, e_aux = pointwise_energies(m, x, 0)
        logp = np.log(m.probs(x))
        for y in range(4):
            assert np.all(e_aux <= -logp[:, y])

    def test_literal_sign_flips(self):
        m = _model(1)
        z = np.abs(np.random.default_rng(1).normal(size=(5, 6)))
        assert sampling_energy(m, z, 2, sign=-1.0) == pytest.approx(-sampling_energy(m, z, 2), rel=1e-15)


class TestEnergyGradientKernels:
    @pytest.mark.parametrize("backend", ["numba", "numpy"])
    @pytest.mark.parametrize("stage", [0, 1, 2])
    def test_matches_tape(self, backend, stage):
        m = _model(3)
        rng = np.random.default_rng(stage)
        z = np.abs(rng.normal(size=(7, m.stage_width(stage))))
        e, g = kernels.energy_grad(z, m.theta, m.layout, stage, 1.0, backend)
        tape = dc.Tape()
        params = m.bind(tape)
        zn = tape.leaf(z)
        logp = dc.log_softmax(m.trace(params, zn, stage))
        total = dc.negate(dc.sum(dc.column(logp, m.num_classes)))
        (gz,) = dc.grad(tape, total, [zn])
        np.testing.assert_allclose(e.sum(), total.value, rtol=1e-13)
        np.testing.assert_allclose(g, gz, rtol=1e-10, atol=1e-14)


class TestInitChain:
    def test_data_mode_is_encoder_output(self):
        m = _model()
        x = np.random.default_rng(0).normal(size=(5, 3))
        chain = init_chain(m, x, SgldConfig(stage=1), np.random.default_rng(0))
        np.testing.assert_array_equal(chain.z, m.encode_to_stage(x, 1))

    def test_noise_mode_reproducible(self):
        m = _model()
        cfg = SgldConfig(init_mode="noise")
        a = init_chain(m, np.ones((4, 3)), cfg, np.random.default_rng(9)).z
        b = init_chain(m, np.ones((4, 3)), cfg, np.random.default_rng(9)).z
        np.testing.assert_array_equal(a, b)
        assert a.shape == (4, 6)

    def test_persistent_empty_buffer_falls_back_to_noise(self):
        m = _model()
        cfg = SgldConfig(init_mode="persistent")
        buf = PersistentBuffer(2, 10)
        a = init_chain(m, np.ones((4, 3)), cfg, np.random.default_rng(9), buf).z
        b = init_chain(m, np.ones((4, 3)), SgldConfig(init_mode="noise"), np.random.default_rng(9)).z
        np.testing.assert_array_equal(a, b)

    def test_persistent_buffer_fills_then_reuses(self):
        m = _model()
        cfg = SgldConfig(init_mode="persistent", steps=3, reinit_prob=0.0)
        buf = PersistentBuffer(2, 8)
        rng = np.random.default_rng(0)
        for _ in range(2):
            sample(m, np.ones((4, 3)), cfg, rng, buf)
        assert len(buf) == 8
        chain = init_chain(m, np.ones((4, 3)), cfg, rng, buf)
        np.testing.assert_array_equal(chain.z, buf.z[chain.slots])

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            init_chain(_model(), np.empty((0, 3)), SgldConfig(), np.random.default_rng(0))


class TestSampler:
    def test_zero_steps_leave_chain(self):
        m = _model()
        x = np.random.default_rng(0).normal(size=(5, 3))
        z, diag = sample(m, x, SgldConfig(steps=0), np.random.default_rng(0))
        np.testing.assert_array_equal(z, m.encode_to_stage(x, 2))
        assert diag.energy_before == diag.energy_after

    def test_parameters_untouched(self):
        m = _model(4)
        before = m.checksum()
        sample(m, np.random.default_rng(0).normal(size=(16, 3)), SgldConfig(steps=20), np.random.default_rng(0))
        assert m.checksum() == before

    def test_deterministic(self):
        m = _model(4)
        x = np.random.default_rng(0).normal(size=(16, 3))
        a, _ = sample(m, x, SgldConfig(steps=20, sigma=0.1), np.random.default_rng(5))
        b, _ = sample(m, x, SgldConfig(steps=20, sigma=0.1), np.random.default_rng(5))
        np.testing.assert_array_equal(a, b)

    def test_noise_free_round_does_not_increase_energy(self):
        m = _model(2)
        x = np.random.default_rng(2).normal(size=(32, 3))
        cfg = SgldConfig(alpha=0.05, sigma=0.0, steps=50, stage=0)
        chain = init_chain(m, x, cfg, np.random.default_rng(0))
        energies = [sampling_energy(m, chain.z, 0)]
        for _ in range(cfg.steps):
            chain = sgld_step(m, chain, cfg, np.random.default_rng(0))
            energies.append(sampling_energy(m, chain.z, 0))
        assert np.all(np.diff(energies) <= 1e-12)

    def test_step_matches_update_rule(self):
        m = _model(6)
        rng = np.random.default_rng(1)
        z = np.abs(rng.normal(size=(4, 6)))
        cfg = SgldConfig(alpha=0.3, sigma=0.2, stage=2, clip=np.inf)
        _, g = kernels.energy_grad(z, m.theta, m.layout, 2)
        eps = np.random.default_rng(7).standard_normal((1, 4, 6))[0]
        out = sgld_step(m, ChainState(z, 2), cfg, np.random.default_rng(7))
        np.testing.assert_allclose(out.z, z - 0.15 * g + 0.2 * eps, rtol=1e-13)

    def test_clip_bounds_gradient_step(self):
        m = _model(6)
        z = 50 * np.abs(np.random.default_rng(1).normal(size=(4, 6)))
        cfg = SgldConfig(alpha=1.0, sigma=0.0, stage=2, clip=1e-3)
        out = sgld_step(m, ChainState(z, 2), cfg, np.random.default_rng(0))
        assert np.all(np.linalg.norm(out.z - z, axis=1) <= 0.5e-3 * (1 + 1e-9))

    def test_divergence_raises(self):
        m = _model(6)
        z = np.abs(np.random.default_rng(1).normal(size=(4, 6)))
        cfg = SgldConfig(alpha=1.0, sigma=1e308, steps=5, stage=2)
        with pytest.raises(SamplingDiverged) as info:
            run_chain(m, ChainState(z, 2), cfg, np.random.default_rng(0))
        assert info.value.step >= 0

    def test_config_validation(self):
        for bad in ({"alpha": 0}, {"sigma": -1}, {"steps": -1}, {"init_mode": "x"}, {"energy_sign": "?"}):
            with pytest.raises(ValueError):
                SgldConfig(**bad)


class TestQuadratic:
    def test_contraction_without_noise(self):
        z0 = np.array([[3.0, -4.0]])
        norms = []
        langevin(lambda z: z, z0, 0.5, 0.0, 20, np.random.default_rng(0), trace=lambda z: norms.append(np.linalg.norm(z)))
        np.testing.assert_allclose(norms, 5.0 * 0.75 ** np.arange(1, 21), rtol=1e-12)
        assert np.all(np.diff(norms) < 0)

    def test_stationary_variance_short(self):
        alpha = 0.1
        acc = []
        langevin(lambda z: z, np.zeros((256, 1)), alpha, np.sqrt(alpha), 3000, np.random.default_rng(0),
                 trace=lambda z: acc.append(np.mean(z**2)))
        var = np.mean(acc[500:])
        assert var == pytest.approx(1 / (1 - alpha / 4), rel=0.05)
