"""Binary channel snapshots and CSV dumps.

Snapshot layout (all little-endian float64):

    M, K, N, seed, sigma_i_sq, B
    h_true      B*M*K*N complex values, (re, im) interleaved
    h_observed  same layout

Integers are stored as doubles so the whole file is one float64 array.
"""

from __future__ import annotations

import csv

import numpy as np

from .channel_env import ChannelRealization

SNAPSHOT_HEADER = 6


def save_snapshot(path, ch: ChannelRealization, seed: int) -> None:
    ht = np.asarray(ch.h_true)
    batched = ht.ndim == 4
    ht = ht if batched else ht[None]
    ho = np.asarray(ch.h_observed).reshape(ht.shape)
    B, M, K, N = ht.shape
    head = np.array([M, K, N, seed, ch.sigma_i_sq, B if batched else 0], dtype="<f8")
    body = [np.ascontiguousarray(x).view(np.float64).ravel() for x in (ht.astype(np.complex128),
                                                                       ho.astype(np.complex128))]
    np.concatenate([head] + body).astype("<f8").tofile(path)


def load_snapshot(path):
    """Return ``(ChannelRealization, seed)``."""
    raw = np.fromfile(path, dtype="<f8")
    if raw.size < SNAPSHOT_HEADER:
        raise ValueError("snapshot too short")
    M, K, N, seed, sigma, B = raw[:SNAPSHOT_HEADER]
    M, K, N, nb = int(M), int(K), int(N), int(B)
    shape = (max(nb, 1), M, K, N)
    n = 2 * int(np.prod(shape))
    if raw.size != SNAPSHOT_HEADER + 2 * n:
        raise ValueError(f"snapshot size {raw.size} does not match header {shape}")
    body = raw[SNAPSHOT_HEADER:].astype(np.float64)
    ht = body[:n].view(np.complex128).reshape(shape)
    ho = body[n:].view(np.complex128).reshape(shape)
    if nb == 0:
        ht, ho = ht[0], ho[0]
    return ChannelRealization(ht.copy(), ho.copy(), float(sigma)), int(seed)


def write_channel_csv(path, ch: ChannelRealization) -> None:
    """One row per (draw, m, k, n) entry of the true and observed channels."""
    ht = np.asarray(ch.h_true)
    ho = np.asarray(ch.h_observed)
    if ht.ndim == 3:
        ht, ho = ht[None], ho[None]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["draw", "m", "k", "n", "h_true_re", "h_true_im", "h_obs_re", "h_obs_im"])
        for idx in np.ndindex(ht.shape):
            a, b = ht[idx], ho[idx]
            w.writerow(list(idx) + [repr(float(v)) for v in (a.real, a.imag, b.real, b.imag)])


def read_channel_csv(path, sigma_i_sq: float = float("nan")) -> ChannelRealization:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    idx = np.array([[int(r[c]) for c in ("draw", "m", "k", "n")] for r in rows])
    shape = tuple(idx.max(axis=0) + 1)
    ht = np.zeros(shape, dtype=np.complex128)
    ho = np.zeros(shape, dtype=np.complex128)
    for i, r in zip(idx, rows):
        ht[tuple(i)] = float(r["h_true_re"]) + 1j * float(r["h_true_im"])
        ho[tuple(i)] = float(r["h_obs_re"]) + 1j * float(r["h_obs_im"])
    return ChannelRealization(ht, ho, sigma_i_sq)


def write_rows(path, rows, fields) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in fields})


def read_rows(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
