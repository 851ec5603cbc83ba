"""A-term, E-term, rewards and the combined loss."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdgnn import autodiff as ad
from mdgnn.channel_env import SystemConfig, generate_channel, sum_se_precoding
from mdgnn.gib_objectives import (
    GibConfig,
    MixturePrior,
    a_term,
    e_term,
    gaussian_kl,
    kl_bernoulli,
    mixture_logpdf,
    task_reward,
    total_loss,
)


class TestBernoulliKL:
    def test_identity_is_exactly_zero(self):
        for a in (1e-3, 0.3, 0.5, 0.77):
            assert kl_bernoulli(a, a) == 0.0

    def test_known_value(self):
        expected = 0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5)
        assert kl_bernoulli(0.9, 0.5) == pytest.approx(expected, rel=1e-14)
        assert expected == pytest.approx(0.368064, abs=1e-6)

    def test_clamped_endpoints(self):
        assert np.isfinite(kl_bernoulli(0.0, 0.5)) and np.isfinite(kl_bernoulli(1.0, 0.5))
        assert kl_bernoulli(1.0, 0.5) == pytest.approx(math.log(2), rel=1e-5)

    def test_tensor_path_matches_numpy(self, rng):
        phi = rng.uniform(0, 1, 7)
        t = kl_bernoulli(ad.param(phi), 0.3)
        np.testing.assert_allclose(t.value, kl_bernoulli(phi, 0.3), rtol=1e-13)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.floats(0.01, 0.99))
    def test_a_term_nonnegative(self, phis, alpha):
        phi = np.array(phis)[None]
        assert a_term([(phi, None)], alpha) >= 0.0

    def test_a_term_masks_and_averages(self):
        phi = np.array([[0.9, 0.2], [0.9, 0.2]])
        valid = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert a_term([(phi, valid)], 0.5) == pytest.approx(kl_bernoulli(0.9, 0.5))
        assert a_term([(phi, valid)], 0.5, batch_axis=False) == pytest.approx(2 * kl_bernoulli(0.9, 0.5))
        assert a_term([], 0.5) == 0.0


class TestETerm:
    def test_brute_force_scalar(self):
        logits, means, lv = np.array([0.3, -0.2]), np.array([0.5, -1.0]), np.array([0.1, -0.4])
        prior = MixturePrior(logits, means, lv)
        mu, s2, z = 0.2, 0.7, -0.4
        w = np.exp(logits) / np.exp(logits).sum()
        dens = sum(w[x] * math.exp(-(z - means[x]) ** 2 / (2 * math.exp(lv[x])))
                   / math.sqrt(2 * math.pi * math.exp(lv[x])) for x in range(2))
        q = math.exp(-(z - mu) ** 2 / (2 * s2)) / math.sqrt(2 * math.pi * s2)
        assert e_term(mu, s2, z, prior) == pytest.approx(math.log(q / dens), rel=1e-12)

    def test_monte_carlo_matches_closed_form(self):
        r = np.random.default_rng(1)
        mu, s2, m0, v0 = 0.7, 0.5, -0.3, 1.6
        z = mu + math.sqrt(s2) * r.standard_normal(100_000)
        prior = MixturePrior(np.zeros(1), np.array([m0]), np.array([math.log(v0)]))
        est = e_term(np.full_like(z, mu), np.full_like(z, s2), z, prior) / z.size
        exact = gaussian_kl(mu, s2, m0, v0)
        assert abs(est / exact - 1) < 0.02

    def test_rejects_nonpositive_variance(self):
        with pytest.raises(FloatingPointError):
            e_term(0.0, 0.0, 0.0, MixturePrior.default(1))

    def test_mixture_logpdf_tensor_path(self, rng):
        z = rng.standard_normal(5)
        p = MixturePrior(rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal(3))
        ref = mixture_logpdf(z, p.logits, p.means, p.log_vars)
        t = mixture_logpdf(ad.param(z), ad.param(p.logits), ad.param(p.means), ad.param(p.log_vars))
        np.testing.assert_allclose(t.value, ref, rtol=1e-13)

    def test_prior_weights(self):
        np.testing.assert_allclose(MixturePrior.default(5).weights, 0.2)


class TestGibConfig:
    def test_defaults(self):
        s_e, s_a = GibConfig().resolved(3)
        assert s_e == (3,) and s_a == (1, 2, 3)
        assert GibConfig().resolved(3, structure_sampling=False)[1] == ()

    def test_index_set_rule(self):
        GibConfig(s_e=(1,), s_a=(2, 3), layers=3)
        with pytest.raises(ValueError):
            GibConfig(s_e=(1,), s_a=(3,), layers=3)
        with pytest.raises(ValueError):
            GibConfig(s_e=(), layers=2)
        with pytest.raises(ValueError):
            GibConfig(s_e=(4,), layers=3)

    @pytest.mark.parametrize("kw", [{"beta": -1.0}, {"alpha": 0.0}, {"alpha": 1.0},
                                    {"mixture_X": 0}, {"temperature": 0.0}])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            GibConfig(**kw)


class TestRewardAndLoss:
    def test_reward_matches_sum_se(self, rng):
        cfg = SystemConfig(M=3, K=2, N=2)
        h = np.stack([generate_channel(cfg, 0.0, s).h_true for s in range(3)])
        w = 0.3 * (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape))
        r = task_reward((w.real, w.imag), h, cfg)
        assert float(r.value) == pytest.approx(sum_se_precoding(h, w, cfg).mean(), rel=1e-12)
        inc = cfg.replace(combining="incoherent")
        r = task_reward((w.real, w.imag), h, inc)
        assert float(r.value) == pytest.approx(sum_se_precoding(h, w, inc).mean(), rel=1e-12)

    def test_power_reward(self, rng):
        cfg = SystemConfig(M=2, K=2, N=2)
        h = generate_channel(cfg, 0.0, 3).h_true[None]
        basis = rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape)
        basis /= np.linalg.norm(basis, axis=-1, keepdims=True)
        p = rng.uniform(0, 0.5, (1, 2, 2))
        r = task_reward((p, basis), h, cfg)
        ref = sum_se_precoding(h, np.sqrt(p)[..., None] * basis, cfg).mean()
        assert float(r.value) == pytest.approx(ref, rel=1e-12)

    def test_supervised(self):
        out = (ad.param(np.ones((1, 2))), ad.param(np.zeros((1, 2))))
        r = task_reward(out, np.zeros((1, 1, 1, 1), complex), SystemConfig(M=1, K=1, N=1),
                        supervised=True, target=np.array([[1 + 1j, 1 + 0j]]))
        assert float(r.value) == pytest.approx(-1.0)
        with pytest.raises(ValueError):
            task_reward(out, np.zeros((1, 1, 1, 1)), SystemConfig(M=1, K=1, N=1), supervised=True)

    def test_loss_linear_in_beta(self, rng):
        cfg = SystemConfig(M=2, K=2, N=2)
        h = generate_channel(cfg, 0.0, 3).h_true[None]
        w = 0.3 * (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape))
        mu, s2 = rng.standard_normal((1, 3)), np.full((1, 3), 0.4)
        trace = [{"phi": [(rng.uniform(size=(1, 4)), None)], "mu": mu, "sigma2": s2, "z": mu + 0.1}]
        prior = MixturePrior.default(2)
        parts = [total_loss(trace, (w.real, w.imag), h, GibConfig(beta=b), cfg, prior) for b in (0.0, 1e-3, 2e-3)]
        l0, l1, l2 = (float(p.loss.value) for p in parts)
        assert l0 == pytest.approx(-parts[0].reward)
        assert l1 - l0 == pytest.approx(1e-3 * (parts[1].a_term + parts[1].e_term), rel=1e-9)
        assert l2 - l0 == pytest.approx(2 * (l1 - l0), rel=1e-9)
