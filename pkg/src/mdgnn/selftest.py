"""Fast consistency checks behind ``mdgnn selftest`` (a few seconds)."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import perm_weights as pw
from .baselines import wmmse_precoding
from .channel_env import SystemConfig, generate_channel, sum_se_precoding
from .experiments import percent_delta
from .gib_objectives import kl_bernoulli
from .mdgnn_core import ModelConfig, forward, init_model, precoding_tensors


def _equivariance(rng):
    worst = 0.0
    for dims, kinds in (((3, 4), None), ((3, 2, 4), ("outer", "inner", "set"))):
        s = pw.PermStructure(dims, kinds, 2, 3, topological=False)
        w = pw.StructuredWeight(s, rng.standard_normal(pw.count_parameters(s) * 6))
        z = rng.standard_normal((2,) + dims)
        op = pw.PermOperator.random(s, rng)
        d = np.abs(pw.apply(w, pw.permute(op, z, s)) - pw.permute(op, pw.apply(w, z), s)).max()
        worst = max(worst, d)
    return worst


def _param_counts():
    dense = pw.PermStructure((4, 4), topological=False)
    nested = pw.PermStructure((4, 4, 4), ("outer", "inner", "set"), topological=False)
    return (pw.count_parameters(dense), pw.count_parameters(nested))


def _gradient(rng):
    cfg = SystemConfig(M=2, K=2, N=2)
    m = init_model(ModelConfig(family="edge-mdgnn", M=2, K=2, N=2, L=1, hidden=3), rng)
    ch = generate_channel(cfg, 0.1, 7)

    def loss(params):
        z, _, P = forward(m, ch.h_observed, mode="mean", params=params)
        re, im = precoding_tensors(m, z, P, cfg)
        return (ad.square(re) + ad.square(im)).sum()

    P = {k: ad.param(v) for k, v in m.params.items()}
    g = ad.grad(loss(P), P["W1"])
    base = m.params["W1"]
    idx = (0,) * base.ndim
    eps = 1e-6
    vals = []
    for s in (1, -1):
        q = dict(m.params)
        q["W1"] = base.copy()
        q["W1"][idx] += s * eps
        vals.append(loss({k: ad.Tensor(v) for k, v in q.items()}).value)
    fd = (vals[0] - vals[1]) / (2 * eps)
    return abs(fd - g[idx]) / max(1e-12, abs(fd), abs(g[idx]))


def _wmmse_single_user():
    cfg = SystemConfig(M=1, K=1, N=1)
    h = np.array([[[1e-5 + 0j]]])
    se = float(sum_se_precoding(h, wmmse_precoding(h, cfg), cfg))
    return abs(se - np.log2(1 + cfg.p_max_watt * 1e-10 / cfg.noise_power))


def run_selftest(emit=print) -> bool:
    rng = np.random.default_rng(0)
    checks = [
        ("layer equivariance", _equivariance(rng), lambda v: v <= 1e-10),
        ("parameter counts (4,4)->4, (4,4,4) nested->16", _param_counts(), lambda v: v == (4, 16)),
        ("bernoulli KL identity", kl_bernoulli(0.3, 0.3), lambda v: v == 0.0),
        ("gradient vs finite difference", _gradient(rng), lambda v: v <= 1e-4),
        ("WMMSE single-user closed form", _wmmse_single_user(), lambda v: v <= 1e-9),
        ("percent delta 30.04 vs 24.75", percent_delta(30.04, 24.75), lambda v: v == 21.37),
        ("percent delta 16.13 vs 24.75", percent_delta(16.13, 24.75), lambda v: v == -34.83),
    ]
    ok = True
    for name, value, test in checks:
        passed = bool(test(value))
        ok &= passed
        emit(f"[{'PASS' if passed else 'FAIL'}] {name}: {value}")
    return ok
