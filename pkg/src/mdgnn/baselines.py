"""Optimisation-based baselines: WMMSE precoding, ZF / L-MMSE bases, WMMSE power control.

All routines accept a single channel ``[M, K, N]`` or a batch ``[B, M, K, N]``
and work internally on noise-normalised channels ``h / sigma`` so that the
receiver noise power is one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel_env import (
    PowerSolution,
    PrecodingSolution,
    SystemConfig,
    project_powers,
    project_precoder,
    sum_se_precoding,
)
from .kernels import power_multiplier

RIDGE = 1e-12


@dataclass(frozen=True)
class WmmseConfig:
    max_iters: int = 200
    tol: float = 1e-6
    bisection_tol: float = 1e-12

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (self.tol > 0 and self.bisection_tol > 0):
            raise ValueError("tolerances must be positive")


def _batched(h):
    h = np.asarray(h)
    single = h.ndim == 3
    return (h[None] if single else h), single


def _normalised(h, cfg):
    h = np.asarray(h)
    if not np.all(np.isfinite(h)):
        raise ValueError("channel contains non-finite entries")
    return h / np.sqrt(cfg.noise_power)


def _unit(v, axis=-1):
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    e1 = np.zeros_like(v)
    e1[..., 0] = 1.0
    return np.where(norm > 0, v / np.where(norm > 0, norm, 1.0), e1)


# ---------------------------------------------------------------------------
# WMMSE joint precoding
# ---------------------------------------------------------------------------

def _receiver_state(hn, w, alpha, coherent):
    """MMSE receivers and MSE weights for the current precoders.

    Returns (u, weights, aux) where aux carries what the transmit step needs:
    the coherent gram matrix, or the per-AP signal directions theta.
    """
    g = np.einsum("bmkn,bmin->bmki", np.conj(hn), w)
    K = g.shape[-1]
    if coherent:
        G = g.sum(axis=1)
        T = (np.abs(G) ** 2).sum(axis=-1) + 1.0
        sig = np.diagonal(G, axis1=-2, axis2=-1)
        u = sig / T
        e = 1.0 - np.abs(sig) ** 2 / T
        aux = G
    else:
        E = np.abs(g) ** 2
        T = E.sum(axis=(1, 3)) + 1.0
        gkk = np.diagonal(g, axis1=-2, axis2=-1)          # [B, M, K]
        S = (np.abs(gkk) ** 2).sum(axis=1)
        u = np.sqrt(S) / T
        e = 1.0 - S / T
        nrm = np.sqrt(S)[:, None, :]
        aux = np.where(nrm > 0, gkk / np.where(nrm > 0, nrm, 1.0), 0.0)
    e = np.maximum(e, 1e-300)
    weights = alpha[None, :K] / e
    return u, weights, aux


def _ap_update(hm, wm, u, weights, aux, p_m, rtol, coherent):
    """Exact minimisation of the weighted MSE over AP m's precoders.

    hm, wm: [B, K, N]. Returns the new [B, K, N] precoders.
    """
    c = weights * np.abs(u) ** 2                                # [B, K]
    A = np.einsum("bk,bkn,bkq->bnq", c, hm, np.conj(hm))
    if coherent:
        G = aux
        own = np.einsum("bkn,bin->bki", np.conj(hm), wm)
        r = G - own                                             # [B, K, I]
        b = (weights * u)[:, :, None] * hm - np.einsum("bk,bkn,bki->bin", c, hm, r)
    else:
        theta = aux                                             # [B, K] for this AP
        b = (weights * u * theta)[:, :, None] * hm
    lam, U = np.linalg.eigh(A)
    lam = np.maximum(lam, 0.0) + RIDGE
    q = np.einsum("bnj,bin->bji", np.conj(U), b)                # [B, N, K]
    energy = (np.abs(q) ** 2).sum(axis=-1)
    mu = power_multiplier(lam, energy, np.full(lam.shape[0], p_m), rtol)
    q = q / (lam + mu[:, None])[:, :, None]
    return np.einsum("bnj,bji->bin", U, q)


def wmmse_precoding(h, cfg: SystemConfig, wcfg: WmmseConfig = WmmseConfig(),
                    return_trace: bool = False):
    """Per-AP power constrained WMMSE for weighted sum-SE maximisation.

    Alternates MMSE receivers, MSE weights, and a Gauss-Seidel sweep over APs
    where each AP's precoders solve ``(A_m + mu_m I) w_mi = b_mi`` with the
    multiplier ``mu_m`` found by bisection.  The weighted sum SE is
    non-decreasing across iterations.  Instances stop individually once the
    relative SE change drops below ``wcfg.tol``.

    With ``return_trace`` the per-iteration SE ``[iters + 1, B]`` (or
    ``[iters + 1]`` for a single channel) is returned as a second value.
    """
    hb, single = _batched(h)
    hn = _normalised(hb, cfg)
    B, M, K, N = hn.shape
    coherent = cfg.combining == "coherent"
    alpha = cfg.alpha
    p = cfg.p_max
    w = _unit(hn) * np.sqrt(p / K)[None, :, None, None]
    unit_cfg = cfg.replace(noise_power_dbm=30.0)               # noise power 1 W
    se = sum_se_precoding(hn, w, unit_cfg)
    trace = [se]
    done = np.zeros(B, dtype=bool)
    for _ in range(wcfg.max_iters):
        u, weights, aux = _receiver_state(hn, w, alpha, coherent)
        w_new = w.copy()
        for m in range(M):
            if coherent:
                G = np.einsum("bmkn,bmin->bki", np.conj(hn), w_new)
                a = G
            else:
                a = aux[:, m]
            w_new[:, m] = _ap_update(hn[:, m], w_new[:, m], u, weights, a, p[m],
                                     wcfg.bisection_tol, coherent)
        w = np.where(done[:, None, None, None], w, w_new)
        se_new = sum_se_precoding(hn, w, unit_cfg)
        rel = np.abs(se_new - se) / np.maximum(np.abs(se), 1e-12)
        done |= rel < wcfg.tol
        se = se_new
        trace.append(se)
        if done.all():
            break
    w = project_precoder(w, cfg)
    trace = np.array(trace)
    if single:
        w, trace = w[0], trace[:, 0]
    sol = PrecodingSolution(w)
    return (sol, trace) if return_trace else sol


# ---------------------------------------------------------------------------
# local precoding bases
# ---------------------------------------------------------------------------

def zf_basis(h, cfg: SystemConfig) -> PowerSolution:
    """Unit-norm local zero-forcing directions per AP.

    Columns of ``H_m (H_m^H H_m)^-1`` with ``H_m = [h_m1 .. h_mK]``; the
    pseudo-inverse is used when N < K or ``H_m`` is rank deficient, in which
    case ``rank_deficient`` is set on the result.  Powers are uniform ``p_m/K``.
    """
    hb, single = _batched(h)
    hn = _normalised(hb, cfg)
    B, M, K, N = hn.shape
    H = np.swapaxes(hn, -1, -2)                                 # [B, M, N, K]
    s = np.linalg.svd(H, compute_uv=False)
    rank_def = bool(N < K or np.any(s[..., -1] <= s[..., :1][..., 0] * 1e-10))
    if rank_def:
        # pinv(H^H) is N x K; its columns are the ZF directions
        W = np.linalg.pinv(np.conj(np.swapaxes(H, -1, -2)))
    else:
        gram = np.conj(np.swapaxes(H, -1, -2)) @ H
        W = H @ np.linalg.inv(gram)
    basis = _unit(np.swapaxes(W, -1, -2))                      # [B, M, K, N]
    p = np.broadcast_to(cfg.p_max[:, None] / K, (B, M, K)).copy()
    if single:
        basis, p = basis[0], p[0]
    return PowerSolution(p, basis, rank_def)


def lmmse_basis(h, cfg: SystemConfig) -> PowerSolution:
    """Unit-norm local L-MMSE directions ``(sum_i pbar h_mi h_mi^H + sigma^2 I)^-1 h_mk``.

    ``pbar = p_m / K`` is the provisional uniform power.
    """
    hb, single = _batched(h)
    hn = _normalised(hb, cfg)
    B, M, K, N = hn.shape
    pbar = cfg.p_max / K
    R = pbar[None, :, None, None] * np.einsum("bmkn,bmkq->bmnq", hn, np.conj(hn))
    R = R + np.eye(N)
    V = np.linalg.solve(R, np.swapaxes(hn, -1, -2))             # [B, M, N, K]
    basis = _unit(np.swapaxes(V, -1, -2))
    p = np.broadcast_to(cfg.p_max[:, None] / K, (B, M, K)).copy()
    if single:
        basis, p = basis[0], p[0]
    return PowerSolution(p, basis)


# ---------------------------------------------------------------------------
# WMMSE power control on a fixed basis
# ---------------------------------------------------------------------------

def wmmse_power(h, basis, cfg: SystemConfig, wcfg: WmmseConfig = WmmseConfig(),
                return_trace: bool = False):
    """WMMSE-style power control ``p_mk`` along a fixed unit-norm basis.

    Works on amplitudes ``a_mk = sqrt(p_mk) >= 0``.  For fixed receivers and
    weights the problem separates per AP into scalar quadratics coupled only
    by the power budget, solved exactly with one bisection per AP.
    """
    if isinstance(basis, PowerSolution):
        basis = basis.precoder_basis
    hb, single = _batched(h)
    bb = basis[None] if single else np.asarray(basis)
    hn = _normalised(hb, cfg)
    B, M, K, N = hn.shape
    coherent = cfg.combining == "coherent"
    alpha = cfg.alpha
    pm = cfg.p_max
    g = np.einsum("bmkn,bmin->bmki", np.conj(hn), bb)          # h_mk^H b_mi
    E = np.abs(g) ** 2
    gdiag = np.diagonal(g, axis1=-2, axis2=-1)                  # [B, M, K]
    a = np.broadcast_to(np.sqrt(pm / K)[None, :, None], (B, M, K)).copy()
    unit_cfg = cfg.replace(noise_power_dbm=30.0)

    def se_of(amp):
        return sum_se_precoding(hn, amp[..., None] * bb, unit_cfg)

    se = se_of(a)
    trace = [se]
    done = np.zeros(B, dtype=bool)
    off = ~np.eye(K, dtype=bool)
    for _ in range(wcfg.max_iters):
        a_new = a.copy()
        if coherent:
            G = np.einsum("bmi,bmki->bki", a, g)
            T = (np.abs(G) ** 2).sum(axis=-1) + 1.0
            sig = np.diagonal(G, axis1=-2, axis2=-1)
            u = sig / T
            wts = alpha / np.maximum(1.0 - np.abs(sig) ** 2 / T, 1e-300)
            c = wts * np.abs(u) ** 2
            for m in range(M):
                gm = g[:, m]                                    # [B, K, I]
                r = G - a_new[:, m][:, None, :] * gm
                A = np.einsum("bk,bki->bi", c, np.abs(gm) ** 2)
                lin = (wts * np.real(np.conj(u) * gdiag[:, m])
                       - np.einsum("bk,bki->bi", c, np.real(np.conj(gm) * r)))
                a_new[:, m] = _scalar_step(A, lin, pm[m], wcfg.bisection_tol)
                G = r + a_new[:, m][:, None, :] * gm
        else:
            S = (a ** 2 * np.diagonal(E, axis1=-2, axis2=-1)).sum(axis=1)
            I = np.where(off, np.einsum("bmi,bmki->bki", a ** 2, E), 0.0).sum(axis=-1)
            T = S + I + 1.0
            u = np.sqrt(S) / T
            wts = alpha / np.maximum(1.0 - S / T, 1e-300)
            c = wts * u ** 2
            v = a * np.sqrt(np.diagonal(E, axis1=-2, axis2=-1))
            nv = np.linalg.norm(v, axis=1, keepdims=True)
            theta = np.where(nv > 0, v / np.where(nv > 0, nv, 1.0), 0.0)
            for m in range(M):
                A = np.einsum("bk,bki->bi", c, E[:, m])
                lin = wts * u * theta[:, m] * np.sqrt(np.diagonal(E[:, m], axis1=-2, axis2=-1))
                a_new[:, m] = _scalar_step(A, lin, pm[m], wcfg.bisection_tol)
        a = np.where(done[:, None, None], a, a_new)
        se_new = se_of(a)
        rel = np.abs(se_new - se) / np.maximum(np.abs(se), 1e-12)
        done |= rel < wcfg.tol
        se = se_new
        trace.append(se)
        if done.all():
            break
    p = project_powers(a ** 2, cfg)
    trace = np.array(trace)
    if single:
        p, bb, trace = p[0], bb[0], trace[:, 0]
    sol = PowerSolution(p, bb)
    return (sol, trace) if return_trace else sol


def _scalar_step(A, lin, p_m, rtol):
    """argmin sum_i A_i a_i^2 - 2 lin_i a_i  s.t.  a >= 0, sum_i a_i^2 <= p_m."""
    bpos = np.maximum(lin, 0.0)
    lam = A + RIDGE
    mu = power_multiplier(lam, bpos ** 2, np.full(A.shape[0], p_m), rtol)
    return bpos / (lam + mu[:, None])
