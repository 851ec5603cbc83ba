"""Edge and vertex models: encoding, heads, equivariance, checkpoints."""

import numpy as np
import pytest

from mdgnn import perm_weights as pw
from mdgnn.channel_env import SystemConfig, sample_channels
from mdgnn.gib_objectives import GibConfig
from mdgnn.mdgnn_core import (
    FAMILIES,
    ModelConfig,
    encode_input,
    forward,
    init_model,
    load_model,
    predict,
    save_model,
    vertex_features,
)
from _util import permute_channel, random_channel

SMALL = dict(M=3, K=2, N=2, L=2, hidden=4)


def _model(rng, **kw):
    return init_model(ModelConfig(**{**SMALL, **kw}), rng)


def _w(model, h, mode="mean", seed=0):
    sys = SystemConfig(M=model.cfg.M, K=model.cfg.K, N=model.cfg.N)
    return predict(model, h, sys, rng=np.random.default_rng(seed), mode=mode).w


class TestEncoding:
    def test_real_channel_has_zero_imaginary_half(self, rng):
        cfg = ModelConfig(**SMALL)
        x = encode_input(rng.standard_normal((2, 3, 2, 2)) + 0j, cfg)
        assert x.shape == (2, 4, 3, 2)
        assert np.all(x[:, 2:] == 0)

    def test_unit_rms(self, rng):
        x = encode_input(random_channel(rng, 3, 3, 2, 2), ModelConfig(**SMALL))
        np.testing.assert_allclose(np.sqrt((x ** 2).mean(axis=(1, 2, 3))), 1.0, rtol=1e-12)

    def test_layout_follows_edge_axes(self, rng):
        cfg = ModelConfig(**SMALL, row="1D-GNN-K", normalize_input=False)
        h = random_channel(rng, 1, 3, 2, 2)
        x = encode_input(h, cfg)
        assert x.shape == (1, 2 * 3 * 2, 2)
        np.testing.assert_array_equal(x[0, 0, 1], h[0, 0, 1, 0].real)

    def test_log_compression_keeps_direction(self, rng):
        cfg = ModelConfig(**SMALL, compress="log", normalize_input=False)
        h = random_channel(rng, 1, 3, 2, 2)
        x = encode_input(h, cfg)
        c = x[0, :2] + 1j * x[0, 2:]                 # [N, M, K]
        c = np.moveaxis(c, 0, -1)
        cos = np.abs(np.sum(np.conj(c) * h[0], axis=-1)) / (np.linalg.norm(c, axis=-1) * np.linalg.norm(h[0], axis=-1))
        np.testing.assert_allclose(cos, 1.0, rtol=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            encode_input(random_channel(rng, 1, 2, 2, 2), ModelConfig(**SMALL))


class TestForward:
    @pytest.mark.parametrize("family", FAMILIES)
    def test_same_seed_is_deterministic(self, rng, family):
        m = _model(rng, family=family)
        h = random_channel(rng, 2, 3, 2, 2)
        np.testing.assert_array_equal(_w(m, h, "sample", 5), _w(m, h, "sample", 5))
        np.testing.assert_array_equal(_w(m, h, "mean", 1), _w(m, h, "mean", 2))

    def test_stochastic_samples_differ(self, rng):
        m = _model(rng, family="egib-bern")
        h = random_channel(rng, 2, 3, 2, 2)
        assert np.abs(_w(m, h, "sample", 1) - _w(m, h, "sample", 2)).max() > 0

    def test_vanishing_variance_recovers_mean(self, rng):
        m = _model(rng, family="eib-mdgnn")
        L, c = m.cfg.L, m.cfg.hidden
        m.params[f"b{L}"][c:] = -60.0
        h = random_channel(rng, 2, 3, 2, 2)
        np.testing.assert_allclose(_w(m, h, "sample", 3), _w(m, h, "mean"), atol=1e-2 * np.abs(_w(m, h)).max())

    def test_trace_contents(self, rng):
        m = _model(rng, family="egib-bern")
        z, trace, _ = forward(m, random_channel(rng, 2, 3, 2, 2), np.random.default_rng(0), "train")
        assert len(trace) == 2 and "mu" in trace[-1] and "phi" in trace[0]
        phi, valid = trace[0]["phi"][0]
        assert np.all((phi.value > 0) & (phi.value < 1))
        assert np.all(np.diagonal(valid[0, 0, :, 0, :]) == 0)
        assert np.all(trace[-1]["sigma2"].value >= 1e-8)

    def test_unknown_mode(self, rng):
        with pytest.raises(ValueError):
            forward(_model(rng), random_channel(rng, 1, 3, 2, 2), mode="greedy")

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ModelConfig(family="cnn")
        with pytest.raises(ValueError):
            ModelConfig(family="egib-bern", L=3, gib=GibConfig(s_e=(1,), s_a=(3,)))
        with pytest.raises(ValueError):
            ModelConfig(family="egib-bern", topological=False)
        with pytest.raises(ValueError):
            ModelConfig(channels=(2, 3))


class TestHeads:
    @pytest.mark.parametrize("family", ["edge-mdgnn", "vertex-gnn"])
    def test_precoder_feasible(self, rng, family):
        m = _model(rng, family=family)
        m.params["bo"] += 50.0
        sys = SystemConfig(M=3, K=2, N=2)
        sol = predict(m, random_channel(rng, 4, 3, 2, 2), sys, mode="mean")
        assert sol.is_feasible(sys)
        np.testing.assert_allclose(sol.row_power(), sys.p_max_watt, rtol=1e-12)

    @pytest.mark.parametrize("family", ["edge-mdgnn", "vertex-gnn"])
    def test_equal_logits_split_evenly(self, rng, family):
        m = _model(rng, family=family, head="power")
        for k in ("Wo", "Wo_ap", "Wo_ue", "bo"):
            if k in m.params:
                m.params[k][...] = 0.0
        sys = SystemConfig(M=3, K=2, N=2)
        h = random_channel(rng, 2, 3, 2, 2)
        sol = predict(m, h, sys, basis=np.ones_like(h) / np.sqrt(2), mode="mean")
        np.testing.assert_allclose(sol.p, sys.p_max_watt / 3, rtol=1e-14)
        with pytest.raises(ValueError):
            predict(m, h, sys, mode="mean")

    def test_power_head_feasible(self, rng):
        m = _model(rng, family="egib-bern", head="power")
        sys = SystemConfig(M=3, K=2, N=2)
        h = random_channel(rng, 3, 3, 2, 2)
        basis = h / np.linalg.norm(h, axis=-1, keepdims=True)
        sol = predict(m, h, sys, basis=basis, mode="sample")
        assert sol.is_feasible(sys)

    @pytest.mark.parametrize("family", FAMILIES)
    def test_ue_permutation_equivariance(self, rng, family):
        m = _model(rng, family=family)
        h = random_channel(rng, 2, 3, 2, 2)
        perm = rng.permutation(2)
        np.testing.assert_allclose(_w(m, h[:, :, perm]), _w(m, h)[:, :, perm], atol=1e-12)


class TestEndToEndEquivariance:
    @pytest.mark.parametrize("row,nested", [(r, False) for r in pw.ROWS]
                             + [(r, True) for r in pw.ROWS if "L" in r])
    def test_edge_rows(self, rng, row, nested):
        m = _model(rng, family="egib-bern", row=row, nested=nested, M=3, K=3, N=2)
        g = m.cfg.graph()
        h = random_channel(rng, 2, 3, 3, 2)
        for _ in range(3):
            op = pw.PermOperator.random(g.structure, rng)
            lhs = _w(m, permute_channel(h, g, op))
            rhs = permute_channel(_w(m, h), g, op)
            np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_vertex_model_cannot_separate_collision_pair(rng):
    """Swapping link vectors across a 2x2 AP/UE cycle keeps all vertex features."""
    x, y = rng.standard_normal(2) + 1j * rng.standard_normal(2), rng.standard_normal(2) + 1j * rng.standard_normal(2)
    h = np.array([[[x, 3 * y], [3 * y, x]]])          # [1, M=2, K=2, N=2]
    h2 = np.array([[[3 * y, x], [x, 3 * y]]])
    cfg = ModelConfig(family="vertex-gnn", M=2, K=2, N=2, L=2, hidden=4)
    for a, b in zip(vertex_features(h, cfg), vertex_features(h2, cfg)):
        np.testing.assert_allclose(a, b, rtol=1e-13)
    vertex = init_model(cfg, rng)
    np.testing.assert_allclose(_w(vertex, h), _w(vertex, h2), rtol=1e-12)
    edge = init_model(cfg.replace(family="edge-mdgnn"), rng)
    assert np.abs(_w(edge, h) - _w(edge, h2)).max() > 1e-6


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        m = _model(rng, family="egib-bern", nested=True, row="3D-GNN-L-K-U")
        path = tmp_path / "m.ckpt"
        save_model(m, path)
        back = load_model(path)
        assert back.cfg == m.cfg
        assert set(back.params) == set(m.params)
        for k in m.params:
            np.testing.assert_array_equal(back.params[k], m.params[k])
        h = random_channel(rng, 1, 3, 2, 2)
        np.testing.assert_array_equal(_w(back, h), _w(m, h))

    def test_rejects_bad_files(self, tmp_path, rng):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOPE")
        with pytest.raises(ValueError):
            load_model(p)
        save_model(_model(rng), p)
        p.write_bytes(p.read_bytes()[:-16])
        with pytest.raises(ValueError):
            load_model(p)


def test_vertex_model_blind_to_antenna_order_within_a_link(rng):
    cfg = ModelConfig(family="vertex-gnn", M=2, K=2, N=3, L=2, hidden=4)
    h = random_channel(rng, 1, 2, 2, 3)
    h2 = h.copy()
    h2[0, 1, 0] = h[0, 1, 0, [2, 0, 1]]
    vertex = init_model(cfg, rng)
    np.testing.assert_allclose(_w(vertex, h), _w(vertex, h2), rtol=1e-12)
    edge = init_model(cfg.replace(family="edge-mdgnn"), rng)
    assert np.abs(_w(edge, h) - _w(edge, h2)).max() > 1e-6
