"""Channel generation, SE evaluation and feasibility projection."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdgnn.channel_env import (
    PowerSolution,
    PrecodingSolution,
    SystemConfig,
    generate_channel,
    project_power,
    sample_channels,
    sum_se_power,
    sum_se_precoding,
    wraparound_distance,
)


def _se_loop(h, w, cfg):
    """Direct per-user loop, independent of the vectorised implementation."""
    M, K, N = h.shape
    total = 0.0
    for k in range(K):
        gains = []
        for i in range(K):
            if cfg.combining == "coherent":
                g = sum(np.vdot(h[m, k], w[m, i]) for m in range(M))
                gains.append(abs(g) ** 2)
            else:
                gains.append(sum(abs(np.vdot(h[m, k], w[m, i])) ** 2 for m in range(M)))
        interf = sum(gains) - gains[k]
        total += cfg.alpha[k] * np.log2(1 + gains[k] / (interf + cfg.noise_power))
    return total


def _rand_w(rng, shape, scale=0.4):
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


class TestGeneration:
    def test_shapes_and_determinism(self):
        cfg = SystemConfig(M=3, K=2, N=4)
        a = generate_channel(cfg, 0.1, 5)
        b = generate_channel(cfg, 0.1, 5)
        assert a.h_true.shape == (3, 2, 4)
        np.testing.assert_array_equal(a.h_true, b.h_true)
        np.testing.assert_array_equal(a.h_observed, b.h_observed)

    def test_zero_noise_is_exact(self):
        ch = generate_channel(SystemConfig(M=2, K=2, N=2), 0.0, 1)
        np.testing.assert_array_equal(ch.h_true, ch.h_observed)

    def test_true_channel_independent_of_noise_level(self):
        cfg = SystemConfig(M=2, K=3, N=2)
        a, b = generate_channel(cfg, 0.01, 9), generate_channel(cfg, 1.0, 9)
        np.testing.assert_array_equal(a.h_true, b.h_true)

    def test_absolute_noise_variance(self):
        cfg = SystemConfig(M=4, K=4, N=4, csi_noise="absolute")
        ch = sample_channels(cfg, 0.1, np.random.default_rng(3), batch=2000)
        err = ch.h_observed - ch.h_true
        assert abs(np.mean(np.abs(err) ** 2) / 0.1 - 1) < 0.05

    def test_relative_noise_scales_with_pathloss(self):
        cfg = SystemConfig(M=2, K=2, N=4)
        ch = sample_channels(cfg, 0.5, np.random.default_rng(3), batch=4000)
        err = np.abs(ch.h_observed - ch.h_true) ** 2 / ch.beta[..., None]
        assert abs(err.mean() / 0.5 - 1) < 0.05

    def test_sigma_is_std(self):
        cfg = SystemConfig(M=4, K=4, N=4, csi_noise="absolute", sigma_is_std=True)
        ch = sample_channels(cfg, 0.3, np.random.default_rng(3), batch=2000)
        assert abs(np.mean(np.abs(ch.h_observed - ch.h_true) ** 2) / 0.09 - 1) < 0.05

    @pytest.mark.parametrize("bad", [-0.1, float("nan"), float("inf")])
    def test_rejects_bad_sigma(self, bad):
        with pytest.raises(ValueError):
            generate_channel(SystemConfig(M=1, K=1, N=1), bad, 0)

    def test_rejects_bad_config(self):
        with pytest.raises(ValueError):
            SystemConfig(M=0)
        with pytest.raises(ValueError):
            SystemConfig(K=2, fairness_weights=(1.0, 2.0))

    def test_wraparound_distance(self):
        a = np.array([[10.0, 10.0]])
        b = np.array([[990.0, 500.0]])
        assert wraparound_distance(a, b, 1000.0)[0, 0] == pytest.approx(np.hypot(20, 490))


class TestSpectralEfficiency:
    def test_scalar_closed_form(self):
        cfg = SystemConfig(M=1, K=1, N=1)
        h = np.array([[[3e-5 + 4e-5j]]])
        w = np.array([[[0.5 - 0.2j]]])
        expected = np.log2(1 + abs(h[0, 0, 0]) ** 2 * abs(w[0, 0, 0]) ** 2 / cfg.noise_power)
        assert sum_se_precoding(h, w, cfg) == pytest.approx(expected, rel=1e-14)

    @pytest.mark.parametrize("combining", ["coherent", "incoherent"])
    def test_matches_direct_loop(self, rng, combining):
        cfg = SystemConfig(M=3, K=3, N=2, combining=combining, fairness_weights=(1.0, 0.5, 0.2))
        ch = generate_channel(cfg, 0.0, 2)
        for _ in range(5):
            w = _rand_w(rng, (3, 3, 2))
            assert sum_se_precoding(ch.h_true, w, cfg) == pytest.approx(_se_loop(ch.h_true, w, cfg), rel=1e-12)

    def test_batch_matches_single(self, rng):
        cfg = SystemConfig(M=2, K=2, N=2)
        ch = sample_channels(cfg, 0.0, rng, batch=4)
        w = _rand_w(rng, (4, 2, 2, 2))
        se = sum_se_precoding(ch.h_true, w, cfg)
        for b in range(4):
            assert se[b] == pytest.approx(sum_se_precoding(ch.h_true[b], w[b], cfg), rel=1e-13)

    def test_ue_permutation_invariance(self, rng):
        cfg = SystemConfig(M=3, K=4, N=2)
        h = generate_channel(cfg, 0.0, 4).h_true
        w = _rand_w(rng, (3, 4, 2))
        perm = rng.permutation(4)
        assert sum_se_precoding(h[:, perm], w[:, perm], cfg) == pytest.approx(sum_se_precoding(h, w, cfg), rel=1e-12)

    def test_ap_and_antenna_permutation_invariance(self, rng):
        cfg = SystemConfig(M=3, K=2, N=3)
        h = generate_channel(cfg, 0.0, 4).h_true
        w = _rand_w(rng, (3, 2, 3))
        pm, pn = rng.permutation(3), rng.permutation(3)
        assert (sum_se_precoding(h[pm][:, :, pn], w[pm][:, :, pn], cfg)
                == pytest.approx(sum_se_precoding(h, w, cfg), rel=1e-12))

    def test_common_phase_invariance(self, rng):
        cfg = SystemConfig(M=2, K=3, N=2)
        h = generate_channel(cfg, 0.0, 4).h_true
        w = _rand_w(rng, (2, 3, 2))
        ph = np.exp(1j * rng.uniform(0, 2 * np.pi))
        assert sum_se_precoding(h * ph, w, cfg) == pytest.approx(sum_se_precoding(h, w, cfg), rel=1e-12)

    def test_shape_mismatch(self):
        cfg = SystemConfig(M=2, K=2, N=2)
        with pytest.raises(ValueError):
            sum_se_precoding(np.zeros((2, 2, 2), complex), np.zeros((2, 3, 2), complex), cfg)

    def test_power_solution(self, rng):
        cfg = SystemConfig(M=2, K=2, N=2)
        h = generate_channel(cfg, 0.0, 4).h_true
        basis = _rand_w(rng, (2, 2, 2))
        basis /= np.linalg.norm(basis, axis=-1, keepdims=True)
        p = rng.uniform(0, 0.5, (2, 2))
        sol = PowerSolution(p, basis)
        assert sol.is_feasible(cfg)
        assert sum_se_power(h, sol, cfg) == pytest.approx(
            sum_se_precoding(h, np.sqrt(p)[..., None] * basis, cfg), rel=1e-13)
        with pytest.raises(ValueError):
            sum_se_power(h, PowerSolution(-p, basis), cfg)


class TestProjection:
    def test_scales_overloaded_rows(self, rng):
        cfg = SystemConfig(M=3, K=2, N=2)
        w = _rand_w(rng, (3, 2, 2))
        w[0] *= np.sqrt(4 * cfg.p_max_watt / np.sum(np.abs(w[0]) ** 2))
        w[1] *= np.sqrt(0.25 * cfg.p_max_watt / np.sum(np.abs(w[1]) ** 2))
        out = project_power(PrecodingSolution(w), cfg)
        rows = out.row_power()
        assert rows[0] == pytest.approx(cfg.p_max_watt, rel=1e-12)
        np.testing.assert_array_equal(out.w[1], w[1])
        assert out.is_feasible(cfg)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100.0))
    def test_idempotent_and_feasible(self, seed, scale):
        cfg = SystemConfig(M=2, K=3, N=2)
        r = np.random.default_rng(seed)
        w = _rand_w(r, (2, 3, 2), scale)
        once = project_power(w, cfg)
        np.testing.assert_array_equal(project_power(once, cfg), once)
        assert PrecodingSolution(once).is_feasible(cfg)
        p = r.uniform(-1, 3, (2, 3)) * scale
        pp = project_power(p, cfg)
        assert np.all(pp >= 0) and np.all(pp.sum(-1) <= cfg.p_max + 1e-12)
        np.testing.assert_array_equal(project_power(pp, cfg), pp)

    def test_rejects_nonfinite(self):
        cfg = SystemConfig(M=1, K=1, N=1)
        with pytest.raises(ValueError):
            project_power(np.array([[[np.nan + 0j]]]), cfg)
