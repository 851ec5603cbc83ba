"""Gradient computation, Adam and the training loop."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import gib_objectives as go
from .baselines import lmmse_basis, wmmse_precoding, zf_basis
from .channel_env import SystemConfig, sample_channels, sum_se_power, sum_se_precoding
from .mdgnn_core import Model, forward, power_tensors, precoding_tensors, predict

HISTORY_FIELDS = ("step", "loss", "reward", "a_term", "e_term", "grad_norm", "wall_ms")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 3000
    batch_size: int = 32
    seed: int = 0
    grad_clip: float = 5.0
    # "true": reward on the actual channel; "observed": on the network input
    eval_channel: str = "true"
    supervised: bool = False
    # number of distinct training draws cycled through; None draws fresh ones
    pool_size: int | None = None
    # stop early once this much wall time has elapsed (seconds)
    max_seconds: float | None = None

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.eval_channel not in ("true", "observed"):
            raise ValueError("eval_channel must be 'true' or 'observed'")


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k in sorted(params):
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_by_global_norm(grads: dict, max_norm: float):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        s = max_norm / norm
        grads = {k: g * s for k, g in grads.items()}
    return grads, norm


def basis_for(task: str, h_observed, cfg: SystemConfig):
    if task == "power-zf":
        return zf_basis(h_observed, cfg).precoder_basis
    if task == "power-lmmse":
        return lmmse_basis(h_observed, cfg).precoder_basis
    raise ValueError(f"no precoder basis for task {task!r}")


def model_outputs(model: Model, z, P, sys_cfg: SystemConfig, basis=None):
    if model.cfg.head == "precoding":
        return precoding_tensors(model, z, P, sys_cfg)
    return power_tensors(model, z, P, sys_cfg), basis


def loss_and_grads(model: Model, h_obs, h_eval, sys_cfg: SystemConfig, rng, basis=None,
                   supervised=False, target=None, mode="train"):
    """One forward/backward pass; returns (LossParts, {name: grad})."""
    z, trace, P = forward(model, h_obs, rng, mode)
    outputs = model_outputs(model, z, P, sys_cfg, basis)
    prior = None
    if model.cfg.stochastic:
        prior = (P["prior_logits"], P["prior_means"], P["prior_logvars"])
    gib = model.cfg.gib if model.cfg.stochastic else None
    parts = go.total_loss(trace, outputs, h_eval, gib, sys_cfg, prior, supervised, target)
    if not np.isfinite(parts.loss.value):
        raise TrainingDiverged(f"non-finite loss {float(parts.loss.value)}")
    names = sorted(model.params)
    gs = ad.grad(parts.loss, [P[k] for k in names])
    grads = {}
    for k, g in zip(names, gs):
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {k!r}")
        grads[k] = g
    return parts, grads


def train(model: Model, sys_cfg: SystemConfig, sigma_i_sq: float, tcfg: TrainConfig,
          task: str = "precoding", history_path=None, sampler=None):
    """Train ``model`` in place on fresh (or pooled) channel draws.

    ``sampler(rng, batch)`` may replace the default channel generator.
    Returns ``(model, history)`` with one dict per step.
    """
    root = np.random.SeedSequence(tcfg.seed)
    data_ss, noise_ss = root.spawn(2)
    data_rng = np.random.default_rng(data_ss)
    noise_rng = np.random.default_rng(noise_ss)
    draw = sampler or (lambda rng, b: sample_channels(sys_cfg, sigma_i_sq, rng, batch=b))
    pool = None
    if tcfg.pool_size:
        pool = draw(data_rng, tcfg.pool_size)
    opt = Adam(model.params, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    history = []
    t0 = time.perf_counter()
    for step in range(tcfg.steps):
        if pool is not None:
            idx = data_rng.choice(tcfg.pool_size, size=min(tcfg.batch_size, tcfg.pool_size), replace=False)
            batch = pool[idx]
        else:
            batch = draw(data_rng, tcfg.batch_size)
        h_eval = batch.h_true if tcfg.eval_channel == "true" else batch.h_observed
        basis = basis_for(task, batch.h_observed, sys_cfg) if task != "precoding" else None
        target = None
        if tcfg.supervised:
            target = wmmse_precoding(batch.h_true, sys_cfg).w
        parts, grads = loss_and_grads(model, batch.h_observed, h_eval, sys_cfg, noise_rng, basis,
                                      tcfg.supervised, target)
        if parts.reward < -1e6:
            raise TrainingDiverged(f"reward collapsed to {parts.reward} at step {step}")
        grads, norm = clip_by_global_norm(grads, tcfg.grad_clip)
        if tcfg.lr > 0:
            opt.step(model.params, grads)
        wall = (time.perf_counter() - t0) * 1e3
        history.append({"step": step, "loss": float(parts.loss.value), "reward": parts.reward,
                        "a_term": parts.a_term, "e_term": parts.e_term, "grad_norm": norm,
                        "wall_ms": wall})
        if tcfg.max_seconds is not None and wall > 1e3 * tcfg.max_seconds:
            break
    if history_path is not None:
        write_history(history, history_path)
    return model, history


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in HISTORY_FIELDS})


def evaluate(model: Model, sys_cfg: SystemConfig, channels, task: str = "precoding",
             seed: int = 0, mode: str = "sample", chunk: int = 100) -> np.ndarray:
    """Per-draw sum SE on ``channels.h_true`` with the network fed ``h_observed``."""
    rng = np.random.default_rng(seed)
    out = []
    for s in range(0, len(channels), chunk):
        b = channels[s:s + chunk]
        if task == "precoding":
            sol = predict(model, b.h_observed, sys_cfg, rng=rng, mode=mode)
            out.append(sum_se_precoding(b.h_true, sol, sys_cfg))
        else:
            basis = basis_for(task, b.h_observed, sys_cfg)
            sol = predict(model, b.h_observed, sys_cfg, basis=basis, rng=rng, mode=mode)
            out.append(sum_se_power(b.h_true, sol, sys_cfg))
    return np.concatenate(out)
