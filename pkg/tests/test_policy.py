import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import maillab.tensor as T
from maillab.architectures import build_network
from maillab.harness import TrainConfig, train
from maillab.policy import (BCPolicy, BcConfig, DiffusionPolicy, NoiseSchedule, SamplerOptions,
                            bc_loss, bc_predict, ddpm_sample, ddpm_training_loss, denoise_step,
                            forward_noising, make_noise_schedule)
from maillab.toy_il import gen_copy_task

from conftest import param_grad_error, perturb_parameters, tiny_config


@pytest.fixture
def sched():
    return make_noise_schedule()


class ZeroNet:
    """Noise predictor that always answers zero."""

    def __call__(self, s, a, t, cond=None):
        return T.Tensor(np.zeros_like(np.asarray(T.as_tensor(a).data)))


class TestSchedule:
    def test_single_step(self):
        s = make_noise_schedule(1, 0.1, 0.1)
        assert s.T == 1
        assert s.alpha_bar[0] == pytest.approx(0.9, abs=1e-15)

    def test_from_alphas_product(self):
        s = NoiseSchedule.from_alphas([0.9, 0.8])
        np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72], atol=1e-15)

    def test_default_invariants(self, sched):
        assert sched.T == 16
        assert np.all(np.diff(sched.alpha_bar) < 0)
        assert sched.alpha_bar[-1] > 0.3
        assert np.all((sched.beta > 0) & (sched.beta < 1))
        np.testing.assert_allclose(sched.alpha, 1 - sched.beta, rtol=0, atol=0)

    def test_recursive_product_exact(self, sched):
        for t in range(1, sched.T):
            assert sched.alpha_bar[t] == sched.alpha_bar[t - 1] * sched.alpha[t]

    def test_betas_linear(self, sched):
        np.testing.assert_allclose(np.diff(sched.beta), np.diff(sched.beta)[0], atol=1e-15)

    @pytest.mark.parametrize("args", [(0, 1e-4, 0.1), (4, 0.0, 0.1), (4, 0.2, 0.1), (4, 0.1, 1.0)])
    def test_invalid(self, args):
        with pytest.raises(ValueError):
            make_noise_schedule(*args)

    def test_bc_config_variance(self):
        with pytest.raises(ValueError):
            BcConfig(0.0)


class TestForwardNoising:
    def test_zero_noise(self, sched, rng):
        a0 = rng.normal(size=(4, 2))
        np.testing.assert_allclose(forward_noising(a0, 3, np.zeros_like(a0), sched),
                                   np.sqrt(sched.alpha_bar[2]) * a0)

    def test_closed_form(self):
        s = NoiseSchedule.from_alphas([0.9, 0.8])
        out = forward_noising(np.zeros(1), 2, np.ones(1), s)
        assert out[0] == pytest.approx(np.sqrt(0.28), abs=1e-12)
        assert out[0] == pytest.approx(0.52915, abs=1e-5)

    def test_identity_limit(self, rng):
        s = NoiseSchedule.from_alphas([1 - 1e-14])
        a0 = rng.normal(size=(3, 2))
        np.testing.assert_allclose(forward_noising(a0, 1, rng.normal(size=(3, 2)), s), a0, atol=1e-6)

    @pytest.mark.parametrize("t", [0, 17])
    def test_out_of_range(self, sched, t):
        with pytest.raises(ValueError):
            forward_noising(np.zeros(2), t, np.zeros(2), sched)

    def test_per_item_steps(self, sched, rng):
        a0, z = rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 4, 2))
        t = np.array([1, 8, 16])
        out = forward_noising(a0, t, z, sched)
        for i in range(3):
            np.testing.assert_allclose(out[i], forward_noising(a0[i], int(t[i]), z[i], sched))

    @settings(max_examples=40, deadline=None)
    @given(t=st.integers(1, 16), seed=st.integers(0, 2**31 - 1))
    def test_round_trip(self, t, seed):
        sched = make_noise_schedule()
        r = np.random.default_rng(seed)
        a0, z = r.normal(size=(4, 2)), r.normal(size=(4, 2))
        a_t = forward_noising(a0, t, z, sched)
        ab = sched.alpha_bar[t - 1]
        recovered = (a_t - np.sqrt(1 - ab) * z) / np.sqrt(ab)
        np.testing.assert_allclose(recovered, a0, atol=1e-10)


class TestTrainingLoss:
    def test_oracle_is_zero(self, sched):
        class Oracle:
            def __call__(self, s, a_t, t, cond=None):
                return T.Tensor(np.asarray(a_t) * 0 + z)
        r = np.random.default_rng(5)
        a0 = r.normal(size=(8, 4, 2))
        # replay the draws the loss will make
        probe = np.random.default_rng(9)
        probe.integers(1, 17, size=8)
        z = probe.standard_normal(a0.shape)
        loss = ddpm_training_loss(Oracle(), np.zeros((8, 1, 1)), a0, sched, np.random.default_rng(9))
        assert float(loss.data) == pytest.approx(0.0, abs=1e-24)

    def test_zero_predictor_expectation(self, sched):
        J, act = 4, 2
        a0 = np.zeros((10_000, J, act))
        loss = ddpm_training_loss(ZeroNet(), np.zeros((10_000, 1, 1)), a0, sched,
                                  np.random.default_rng(3))
        assert abs(float(loss.data) - J * act) <= 0.05 * J * act

    def test_uniform_steps(self, sched):
        seen = []

        class Recorder(ZeroNet):
            def __call__(self, s, a, t, cond=None):
                seen.append(np.asarray(t))
                return super().__call__(s, a, t, cond)

        ddpm_training_loss(Recorder(), np.zeros((100_000, 1, 1)), np.zeros((100_000, 1, 1)), sched,
                           np.random.default_rng(4))
        freq = np.bincount(seen[0], minlength=17)[1:] / 100_000
        assert np.all(np.abs(freq - 1 / 16) <= 0.005)

    def test_empty_batch(self, sched, rng):
        with pytest.raises(ValueError):
            ddpm_training_loss(ZeroNet(), np.zeros((0, 1, 1)), np.zeros((0, 1, 1)), sched, rng)

    def test_gradient_depth1_dma(self, sched, rng):
        net = build_network(tiny_config("D-Ma", depth=1))
        perturb_parameters(net, rng)
        pol = DiffusionPolicy(net, sched)
        s, a0 = rng.normal(size=(3, 2, 3)), rng.normal(size=(3, 3, 2))

        def loss():
            return pol.loss(s, a0, np.random.default_rng(11))

        assert np.isfinite(float(loss().data))
        assert param_grad_error(loss, net.parameters(), rng) <= 1e-4


class TestSampler:
    def test_t1_zero_eps(self):
        s = make_noise_schedule(1, 0.1, 0.1)
        a1 = np.random.default_rng(0).standard_normal((4, 2))
        out = ddpm_sample(ZeroNet(), np.zeros((1, 1)), s, rng=np.random.default_rng(0),
                          action_shape=(4, 2))
        np.testing.assert_allclose(out, a1 / np.sqrt(0.9), atol=1e-15)

    @pytest.mark.parametrize("rule", ["standard", "paper"])
    def test_final_step_adds_no_noise(self, sched, rule, rng):
        a = rng.normal(size=(4, 2))
        eps = rng.normal(size=(4, 2))
        np.testing.assert_array_equal(denoise_step(a, 1, eps, sched, rng.normal(size=(4, 2)), rule),
                                      denoise_step(a, 1, eps, sched, None, rule))

    @pytest.mark.parametrize("rule,coef", [("standard", "beta"), ("paper", "alpha")])
    def test_noise_coefficient(self, sched, rule, coef, rng):
        a, eps, z = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        diff = denoise_step(a, 5, eps, sched, z, rule) - denoise_step(a, 5, eps, sched, None, rule)
        np.testing.assert_allclose(diff, np.sqrt(getattr(sched, coef)[4]) * z)

    @pytest.mark.parametrize("t", range(1, 17))
    def test_single_step_inversion(self, sched, t, rng):
        a0, z = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
        a_t = forward_noising(a0, t, z, sched)
        one = NoiseSchedule.from_alphas([sched.alpha_bar[t - 1]])
        np.testing.assert_allclose(denoise_step(a_t, 1, z, one), a0, atol=1e-10)

    def test_deterministic(self, sched, rng):
        net = build_network(tiny_config("D-Ma"))
        perturb_parameters(net, rng)
        s = rng.normal(size=(2, 3))
        first = ddpm_sample(net, s, sched, SamplerOptions(seed=4))
        second = ddpm_sample(net, s, sched, SamplerOptions(seed=4))
        assert first.shape == (3, 2)
        np.testing.assert_array_equal(first, second)

    def test_bad_rule(self):
        with pytest.raises(ValueError):
            SamplerOptions("other")


class TestBehaviorCloning:
    def test_exact_mean_is_zero(self):
        a = np.ones((3, 2, 2))
        assert float(bc_loss(lambda s, c: T.Tensor(a), None, a).data) == 0.0

    def test_ones_residual(self):
        a = np.zeros((5, 1, 2))
        loss = bc_loss(lambda s, c: T.Tensor(np.ones((5, 1, 2))), None, a)
        assert float(loss.data) == pytest.approx(2.0)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            bc_loss(lambda s, c: T.Tensor(np.zeros((0, 1, 2))), None, np.zeros((0, 1, 2)))

    def test_predict_deterministic_shape(self, rng):
        net = build_network(tiny_config("ED-Ma"))
        perturb_parameters(net, rng)
        pol = BCPolicy(net)
        s = rng.normal(size=(2, 3))
        first, second = pol.predict(s), pol.predict(s)
        assert first.shape == (3, 2)
        np.testing.assert_array_equal(first, second)

    def test_gradient_depth1(self, rng):
        net = build_network(tiny_config("D-Ma", depth=1))
        perturb_parameters(net, rng)
        pol = BCPolicy(net)
        s, a = rng.normal(size=(3, 2, 3)), rng.normal(size=(3, 3, 2))
        assert param_grad_error(lambda: pol.loss(s, a), net.parameters(), rng) <= 1e-4

    def test_action_scale_roundtrip(self, rng):
        net = build_network(tiny_config("D-Ma"))
        perturb_parameters(net, rng)
        s = rng.normal(size=(4, 2, 3))
        base = BCPolicy(net).predict(s)
        np.testing.assert_allclose(BCPolicy(net, action_scale=2.5).predict(s), 2.5 * base)
        a = rng.normal(size=(4, 3, 2))
        scaled = float(BCPolicy(net, action_scale=2.0).loss(s, 2.0 * a).data)
        assert scaled == pytest.approx(float(BCPolicy(net).loss(s, a).data))

    def test_bad_scale(self, rng):
        with pytest.raises(ValueError):
            BCPolicy(build_network(tiny_config("D-Ma")), action_scale=0.0)

    def test_copy_task_converges(self):
        cfg = TrainConfig(policy="BC", variant="D-Ma", K=1, J=1, epochs=200, batch_size=50, lr=3e-3,
                          lr_schedule="cosine", model_dim=16, depth=1, state_dim=4, seed=0)
        result = train(cfg, gen_copy_task(200, 0))
        s = np.stack([tr.observations for tr in gen_copy_task(200, 0).trajectories])
        mse = np.mean(np.sum((result.policy.predict(s)[:, 0] - s[:, 0]) ** 2, axis=-1))
        assert result.metrics[-1]["loss"] < 1e-3
        assert mse < 1e-3
