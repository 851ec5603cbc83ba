"""Information-bottleneck loss terms and task rewards.

The training loss is

    loss = -reward + beta * (A + E)

where ``reward`` is the (unsupervised) sum spectral efficiency, ``A`` sums
Bernoulli KL divergences of the neighbour-sampling probabilities against a
Bernoulli(alpha) prior, and ``E`` is a single-sample estimate of the KL
between the Gaussian edge representation and a Gaussian-mixture prior.
All information quantities are in nats.

Functions accept numpy arrays or :class:`~mdgnn.autodiff.Tensor` objects and
return a Tensor whenever an input is a Tensor, a float otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .channel_env import SystemConfig

PROB_CLAMP = 1e-7
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GibConfig:
    beta: float = 1e-4
    alpha: float = 0.5
    mixture_X: int = 5
    # layers (1-based) with a Gaussian edge representation
    s_e: tuple | None = None
    # layers (1-based) with sampled neighbourhoods
    s_a: tuple | None = None
    temperature: float = 0.5
    # number of layers the sets refer to; enables the full index-set check
    layers: int | None = None

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.mixture_X < 1:
            raise ValueError("mixture_X must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        for name in ("s_e", "s_a"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(sorted({int(i) for i in v})))
        if self.layers is not None:
            self.check(self.layers)

    def check(self, L: int) -> None:
        """Enforce the index-set rule for an ``L``-layer model.

        ``S_e`` is nonempty and every structure-sampling layer set contains
        all layers after ``max(S_e)``.
        """
        s_e, s_a = self.resolved(L)
        if not s_e:
            raise ValueError("S_e must be nonempty")
        for i in s_e + s_a:
            if not 1 <= i <= L:
                raise ValueError(f"layer index {i} outside 1..{L}")
        missing = set(range(max(s_e) + 1, L + 1)) - set(s_a)
        if missing:
            raise ValueError(f"S_A must contain layers {sorted(missing)} after max(S_e)={max(s_e)}")

    def resolved(self, L: int, structure_sampling: bool = True):
        s_e = self.s_e if self.s_e is not None else (L,)
        if self.s_a is not None:
            s_a = self.s_a
        else:
            s_a = tuple(range(1, L + 1)) if structure_sampling else ()
        return tuple(s_e), tuple(s_a)


@dataclass
class MixturePrior:
    logits: np.ndarray
    means: np.ndarray
    log_vars: np.ndarray

    @classmethod
    def default(cls, X: int = 5) -> "MixturePrior":
        return cls(np.zeros(X), np.zeros(X), np.zeros(X))

    @property
    def weights(self) -> np.ndarray:
        e = np.exp(self.logits - self.logits.max())
        return e / e.sum()

    @property
    def variances(self) -> np.ndarray:
        return np.exp(self.log_vars)


def _wrap(*xs):
    return any(isinstance(x, ad.Tensor) for x in xs)


def _out(t, keep_tensor):
    return t if keep_tensor else float(t.value) if t.value.ndim == 0 else t.value


# ---------------------------------------------------------------------------
# A-term
# ---------------------------------------------------------------------------

def kl_bernoulli(phi, alpha):
    """``KL(B(phi) || B(alpha))`` elementwise, inputs clamped to ``[1e-7, 1 - 1e-7]``."""
    a = float(np.clip(alpha, PROB_CLAMP, 1.0 - PROB_CLAMP))
    if isinstance(phi, ad.Tensor):
        p = phi
        clipped = (p.value < PROB_CLAMP) | (p.value > 1.0 - PROB_CLAMP)
        if clipped.any():
            p = ad.where(~clipped, p, np.clip(p.value, PROB_CLAMP, 1.0 - PROB_CLAMP))
        q = 1.0 - p
        return p * (ad.log(p) - math.log(a)) + q * (ad.log(q) - math.log(1.0 - a))
    p = np.clip(np.asarray(phi, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    out = p * np.log(p / a) + (1.0 - p) * np.log((1.0 - p) / (1.0 - a))
    return float(out) if out.ndim == 0 else out


def a_term(phis, alpha: float, batch_axis: bool = True):
    """Sum of Bernoulli KLs over edges, neighbours, types and sampling layers.

    ``phis`` is an iterable of ``(phi, valid)`` pairs, one per (layer, type);
    ``valid`` masks out non-neighbour slots (e.g. the diagonal).  With
    ``batch_axis`` the leading axis is averaged instead of summed.
    """
    total = None
    keep = False
    for phi, valid in phis:
        keep = keep or isinstance(phi, ad.Tensor)
        kl = kl_bernoulli(phi, alpha)
        kl = kl * valid if valid is not None else kl
        if isinstance(kl, ad.Tensor):
            s = kl.sum() * (1.0 / kl.shape[0]) if batch_axis else kl.sum()
        else:
            kl = np.asarray(kl)
            s = kl.sum() / kl.shape[0] if batch_axis else kl.sum()
        total = s if total is None else total + s
    if total is None:
        return 0.0
    return total if keep else float(total)


# ---------------------------------------------------------------------------
# E-term
# ---------------------------------------------------------------------------

def gaussian_logpdf(z, mu, var):
    if _wrap(z, mu, var):
        return -0.5 * (LOG_2PI + ad.log(var) + ad.square(z - mu) / var)
    z, mu, var = (np.asarray(x, dtype=np.float64) for x in (z, mu, var))
    return -0.5 * (LOG_2PI + np.log(var) + (z - mu) ** 2 / var)


def mixture_logpdf(z, logits, means, log_vars):
    """``log sum_x w_x N(z; mu_x, exp(lv_x))`` with softmax weights, via log-sum-exp."""
    if _wrap(z, logits, means, log_vars):
        z = ad.as_tensor(z)
        zx = ad.reshape(z, z.shape + (1,))
        logw = logits - ad.logsumexp(logits, axis=-1, keepdims=True)
        comp = logw - 0.5 * (LOG_2PI + log_vars + ad.square(zx - means) / ad.exp(log_vars))
        return ad.logsumexp(comp, axis=-1)
    z = np.asarray(z, dtype=np.float64)[..., None]
    logits = np.asarray(logits, dtype=np.float64)
    logw = logits - np.logaddexp.reduce(logits)
    comp = logw - 0.5 * (LOG_2PI + log_vars + (z - means) ** 2 / np.exp(log_vars))
    return np.logaddexp.reduce(comp, axis=-1)


def e_term(mu, sigma2, z, prior, batch_axis: bool = False):
    """Single-sample density-ratio estimate ``log N(z; mu, s2) - log prior(z)``, summed.

    ``prior`` is a :class:`MixturePrior` or a ``(logits, means, log_vars)``
    triple of arrays / Tensors.  With ``batch_axis`` the sum is averaged
    over the leading axis.
    """
    if isinstance(prior, MixturePrior):
        prior = (prior.logits, prior.means, prior.log_vars)
    keep = _wrap(mu, sigma2, z, *prior)
    if keep:
        s2 = ad.as_tensor(sigma2)
        if not np.all(s2.value > 0):
            raise FloatingPointError("sigma^2 must be positive")
    elif not np.all(np.asarray(sigma2) > 0):
        raise FloatingPointError("sigma^2 must be positive")
    r = gaussian_logpdf(z, mu, sigma2) - mixture_logpdf(z, *prior)
    if keep:
        if not np.all(np.isfinite(r.value)):
            raise FloatingPointError("non-finite E-term")
        total = r.sum()
        return total * (1.0 / r.shape[0]) if batch_axis else total
    r = np.asarray(r)
    if not np.all(np.isfinite(r)):
        raise FloatingPointError("non-finite E-term")
    return float(r.sum() / r.shape[0]) if batch_axis else float(r.sum())


def gaussian_kl(mu, var, mu0, var0):
    """Closed-form ``KL(N(mu, var) || N(mu0, var0))`` for scalars."""
    return 0.5 * (math.log(var0 / var) + (var + (mu - mu0) ** 2) / var0 - 1.0)


# ---------------------------------------------------------------------------
# reward and loss
# ---------------------------------------------------------------------------

def se_from_parts(h, w_re, w_im, cfg: SystemConfig):
    """Differentiable weighted sum SE, batch mean.

    ``h`` is the complex channel ``[B, M, K, N]`` already divided by the
    noise standard deviation; ``w_re``/``w_im`` are real Tensors of the
    same shape.
    """
    if cfg.combining == "coherent":
        e = ad.square(ad.channel_gains(h, w_re, w_im)).sum(axis=0)
    else:
        hr, hi = np.ascontiguousarray(h.real), np.ascontiguousarray(h.imag)
        spec = "bmkn,bmin->bmki"
        g_re = ad.einsum(spec, hr, w_re) + ad.einsum(spec, hi, w_im)
        g_im = ad.einsum(spec, hr, w_im) - ad.einsum(spec, hi, w_re)
        e = (ad.square(g_re) + ad.square(g_im)).sum(axis=1)
    K = cfg.K
    eye = np.eye(K)
    sig = (e * eye).sum(axis=-1)
    interf = (e * (1.0 - eye)).sum(axis=-1)
    se = ad.log(1.0 + sig / (interf + 1.0)) * (cfg.alpha / math.log(2.0))
    return se.sum() * (1.0 / se.shape[0])


def task_reward(outputs, h_eval, cfg: SystemConfig, supervised: bool = False, target=None):
    """Batch-mean sum SE of ``outputs`` on ``h_eval`` (complex ``[B, M, K, N]``, watts).

    ``outputs`` is ``(w_re, w_im)`` for precoding or ``(p, basis)`` for power
    control.  In supervised mode the reward is the negative mean squared
    error between the emitted precoder (or powers) and ``target``.
    """
    h_eval = np.asarray(h_eval)
    if h_eval.ndim == 3:
        h_eval = h_eval[None]
    if supervised:
        if target is None:
            raise ValueError("supervised mode needs a target")
        a, b = outputs
        target = np.asarray(target)
        if np.iscomplexobj(target):
            err = ad.square(a - target.real) + ad.square(b - target.imag)
        else:
            err = ad.square(a - target)
        return -(err.sum() * (1.0 / err.shape[0]))
    hn = h_eval / math.sqrt(cfg.noise_power)
    a, b = outputs
    if isinstance(b, np.ndarray) and np.iscomplexobj(b):
        # power control: w = sqrt(p) * basis
        amp = ad.sqrt(a) if isinstance(a, ad.Tensor) else np.sqrt(a)
        amp = ad.reshape(ad.as_tensor(amp), ad.as_tensor(amp).shape + (1,))
        return se_from_parts(hn, amp * b.real, amp * b.imag, cfg)
    return se_from_parts(hn, ad.as_tensor(a), ad.as_tensor(b), cfg)


@dataclass
class LossParts:
    loss: ad.Tensor
    reward: float
    a_term: float
    e_term: float


def total_loss(trace, outputs, h_eval, gib: GibConfig | None, cfg: SystemConfig,
               prior=None, supervised: bool = False, target=None) -> LossParts:
    """``-reward + beta * (sum A-terms + sum E-terms)``, all batch averaged."""
    reward = task_reward(outputs, h_eval, cfg, supervised, target)
    loss = -reward
    a_val = e_val = 0.0
    if gib is not None and trace is not None:
        a = a_term([(p, v) for layer in trace for (p, v) in layer.get("phi", [])], gib.alpha)
        e = None
        for layer in trace:
            if "mu" in layer:
                t = e_term(layer["mu"], layer["sigma2"], layer["z"], prior, batch_axis=True)
                e = t if e is None else e + t
        a_val = float(ad.as_tensor(a).value)
        e_val = 0.0 if e is None else float(ad.as_tensor(e).value)
        if gib.beta > 0:
            bound = ad.as_tensor(a) if e is None else e + a
            loss = loss + gib.beta * bound
    return LossParts(ad.as_tensor(loss), float(ad.as_tensor(reward).value), a_val, e_val)
