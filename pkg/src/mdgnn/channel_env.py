"""Cell-free massive-MIMO environment.

M access points with N antennas each serve K single-antenna users in a
square area with wrap-around.  Channels follow a one-slope pathloss law with
i.i.d. Rayleigh small-scale fading; the observed CSI is the true channel plus
circular complex Gaussian estimation noise.

Array conventions: channels and precoders are complex ``[..., M, K, N]``,
powers are real ``[..., M, K]``.  Any leading axes are treated as a batch.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

PATHLOSS_INTERCEPT_DB = -30.5
PATHLOSS_EXPONENT = 3.67
FEASIBILITY_RTOL = 1e-12


@dataclass(frozen=True)
class SystemConfig:
    M: int = 10
    K: int = 4
    N: int = 4
    area_side: float = 1000.0
    noise_power_dbm: float = -94.0
    bandwidth_hz: float = 20e6
    p_max_watt: float = 1.0
    fairness_weights: tuple | None = None
    min_distance: float = 10.0
    # standard deviation of log-normal shadowing in dB; 0 disables it
    shadow_fading_db: float = 0.0
    # "relative": CSI error on link (m, k) has variance sigma_i^2 * beta_mk
    # "absolute": every entry has variance sigma_i^2
    csi_noise: str = "relative"
    # interpret the swept CSI noise level as a standard deviation
    sigma_is_std: bool = False
    # "coherent": |sum_m h^H w|^2;  "incoherent": sum_m |h^H w|^2
    combining: str = "coherent"

    def __post_init__(self):
        if min(self.M, self.K, self.N) < 1:
            raise ValueError(f"M, K, N must be >= 1, got {(self.M, self.K, self.N)}")
        if not self.p_max_watt > 0:
            raise ValueError("p_max_watt must be positive")
        if self.area_side <= 0 or self.min_distance <= 0:
            raise ValueError("area_side and min_distance must be positive")
        if self.fairness_weights is not None:
            fw = np.asarray(self.fairness_weights, dtype=float)
            if fw.shape != (self.K,):
                raise ValueError(f"fairness_weights must have length K={self.K}")
            if np.any(fw < 0) or np.any(fw > 1):
                raise ValueError("fairness weights must lie in [0, 1]")
            object.__setattr__(self, "fairness_weights", tuple(float(a) for a in fw))
        if self.csi_noise not in ("relative", "absolute"):
            raise ValueError(f"unknown csi_noise mode {self.csi_noise!r}")
        if self.combining not in ("coherent", "incoherent"):
            raise ValueError(f"unknown combining mode {self.combining!r}")

    @property
    def noise_power(self) -> float:
        """Receiver noise power in watts."""
        return 10.0 ** ((self.noise_power_dbm - 30.0) / 10.0)

    @property
    def alpha(self) -> np.ndarray:
        if self.fairness_weights is None:
            return np.ones(self.K)
        return np.asarray(self.fairness_weights, dtype=float)

    @property
    def p_max(self) -> np.ndarray:
        return np.full(self.M, float(self.p_max_watt))

    def replace(self, **changes) -> "SystemConfig":
        if "K" in changes and "fairness_weights" not in changes and self.fairness_weights is not None:
            changes["fairness_weights"] = None
        return dataclasses.replace(self, **changes)


@dataclass
class ChannelRealization:
    h_true: np.ndarray
    h_observed: np.ndarray
    sigma_i_sq: float
    beta: np.ndarray | None = field(default=None, repr=False)

    def __len__(self):
        return 1 if self.h_true.ndim == 3 else self.h_true.shape[0]

    def __getitem__(self, idx):
        beta = None if self.beta is None else self.beta[idx]
        return ChannelRealization(self.h_true[idx], self.h_observed[idx], self.sigma_i_sq, beta)


@dataclass
class PrecodingSolution:
    w: np.ndarray

    def row_power(self) -> np.ndarray:
        return np.sum(np.abs(self.w) ** 2, axis=(-2, -1))

    def is_feasible(self, cfg: SystemConfig, tol: float = 1e-9) -> bool:
        return bool(np.all(self.row_power() <= cfg.p_max + tol))


@dataclass
class PowerSolution:
    p: np.ndarray
    precoder_basis: np.ndarray
    rank_deficient: bool = False

    def is_feasible(self, cfg: SystemConfig, tol: float = 1e-9) -> bool:
        norms = np.linalg.norm(self.precoder_basis, axis=-1)
        return bool(np.all(self.p >= 0)
                    and np.all(self.p.sum(axis=-1) <= cfg.p_max + tol)
                    and np.all(np.abs(norms - 1.0) <= tol))

    def precoders(self) -> np.ndarray:
        return np.sqrt(self.p)[..., None] * self.precoder_basis


# ---------------------------------------------------------------------------
# channel generation
# ---------------------------------------------------------------------------

def pathloss_db(d: np.ndarray) -> np.ndarray:
    return PATHLOSS_INTERCEPT_DB - 10.0 * PATHLOSS_EXPONENT * np.log10(d)


def wraparound_distance(a: np.ndarray, b: np.ndarray, side: float) -> np.ndarray:
    """Minimum-image distance between point sets ``a [.., M, 2]`` and ``b [.., K, 2]``."""
    diff = np.abs(a[..., :, None, :] - b[..., None, :, :])
    diff = np.minimum(diff, side - diff)
    return np.hypot(diff[..., 0], diff[..., 1])


def csi_noise_variance(cfg: SystemConfig, sigma_i_sq: float, beta: np.ndarray) -> np.ndarray | float:
    level = float(sigma_i_sq) ** 2 if cfg.sigma_is_std else float(sigma_i_sq)
    if cfg.csi_noise == "relative":
        return level * beta
    return level


def _check_sigma(sigma_i_sq):
    s = float(sigma_i_sq)
    if not np.isfinite(s):
        raise ValueError(f"sigma_i_sq must be finite, got {sigma_i_sq!r}")
    if s < 0:
        raise ValueError(f"sigma_i_sq must be nonnegative, got {sigma_i_sq!r}")
    return s


def sample_channels(cfg: SystemConfig, sigma_i_sq: float, rng: np.random.Generator,
                    batch: int | None = None) -> ChannelRealization:
    """Draw ``batch`` independent network realisations from ``rng``.

    The draw order is fixed (AP positions, UE positions, shadowing, fading,
    CSI noise) and the CSI noise is always drawn, so the same generator state
    yields the same true channels for every noise level.
    """
    s = _check_sigma(sigma_i_sq)
    lead = () if batch is None else (int(batch),)
    M, K, N = cfg.M, cfg.K, cfg.N
    ap = rng.uniform(0.0, cfg.area_side, lead + (M, 2))
    ue = rng.uniform(0.0, cfg.area_side, lead + (K, 2))
    d = np.maximum(wraparound_distance(ap, ue, cfg.area_side), cfg.min_distance)
    beta_db = pathloss_db(d)
    if cfg.shadow_fading_db > 0:
        beta_db = beta_db + cfg.shadow_fading_db * rng.standard_normal(beta_db.shape)
    beta = 10.0 ** (beta_db / 10.0)
    shape = lead + (M, K, N)
    fading = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
    h_true = np.sqrt(beta)[..., None] * fading
    e = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
    if s == 0.0:
        h_obs = h_true.copy()
    else:
        var = csi_noise_variance(cfg, s, beta)
        std = np.sqrt(var)[..., None] if np.ndim(var) else np.sqrt(var)
        h_obs = h_true + std * e
    return ChannelRealization(h_true, h_obs, s, beta)


def generate_channel(cfg: SystemConfig, sigma_i_sq: float, rng_seed: int) -> ChannelRealization:
    """One seeded realisation; bit-identical for identical arguments."""
    return sample_channels(cfg, sigma_i_sq, np.random.default_rng(rng_seed))


# ---------------------------------------------------------------------------
# objectives and constraints
# ---------------------------------------------------------------------------

def _as_array(x, attr):
    return getattr(x, attr) if hasattr(x, attr) else np.asarray(x)


def link_gains(h: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Per-AP inner products ``g[..., m, k, i] = h_mk^H w_mi``."""
    return np.einsum("...mkn,...min->...mki", np.conj(h), w)


def sinr_terms(h: np.ndarray, w: np.ndarray, combining: str = "coherent"):
    """Return (signal, interference) power per user, each ``[..., K]``."""
    g = link_gains(h, w)
    K = g.shape[-1]
    off = ~np.eye(K, dtype=bool)
    if combining == "coherent":
        e = np.abs(g.sum(axis=-3)) ** 2
    else:
        e = (np.abs(g) ** 2).sum(axis=-3)
    sig = np.diagonal(e, axis1=-2, axis2=-1)
    interf = np.where(off, e, 0.0).sum(axis=-1)
    return sig, interf


def sum_se_precoding(h, w, cfg: SystemConfig):
    """Weighted sum spectral efficiency in bit/s/Hz.

    ``sum_k alpha_k log2(1 + S_k / (I_k + sigma^2))`` with coherent (default)
    or incoherent combining across APs, see :class:`SystemConfig`.
    """
    h = np.asarray(h)
    w = _as_array(w, "w")
    if h.shape[-3:] != (cfg.M, cfg.K, cfg.N) or w.shape[-3:] != h.shape[-3:]:
        raise ValueError(f"shape mismatch: h {h.shape}, w {w.shape}, cfg {(cfg.M, cfg.K, cfg.N)}")
    sig, interf = sinr_terms(h, w, cfg.combining)
    se = cfg.alpha * np.log2(1.0 + sig / (interf + cfg.noise_power))
    return se.sum(axis=-1)


def sum_se_power(h, sol: PowerSolution, cfg: SystemConfig):
    """Sum SE of power allocation ``p`` applied along unit-norm ``precoder_basis``."""
    p = np.asarray(sol.p, dtype=float)
    if np.any(p < 0):
        raise ValueError("negative powers")
    if p.shape[-2:] != (cfg.M, cfg.K):
        raise ValueError(f"power shape {p.shape} does not match (M, K)=({cfg.M}, {cfg.K})")
    return sum_se_precoding(h, sol.precoders(), cfg)


def project_precoder(w: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    w = np.asarray(w)
    if not np.all(np.isfinite(w)):
        raise ValueError("non-finite precoder")
    row = np.sum(np.abs(w) ** 2, axis=(-2, -1))
    p = cfg.p_max
    over = row > p * (1.0 + FEASIBILITY_RTOL)
    scale = np.where(over, np.sqrt(p / np.where(over, row, 1.0)), 1.0)
    return w * scale[..., None, None]


def project_powers(p: np.ndarray, cfg: SystemConfig) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite powers")
    p = np.maximum(p, 0.0)
    row = p.sum(axis=-1)
    pm = cfg.p_max
    over = row > pm * (1.0 + FEASIBILITY_RTOL)
    scale = np.where(over, pm / np.where(over, row, 1.0), 1.0)
    return p * scale[..., None]


def project_power(x, cfg: SystemConfig):
    """Scale each AP's transmit power down to its budget; feasible rows are untouched.

    Accepts a :class:`PrecodingSolution`, a :class:`PowerSolution`, or a raw
    complex precoder / real power array, and returns the same kind.
    """
    if isinstance(x, PrecodingSolution):
        return PrecodingSolution(project_precoder(x.w, cfg))
    if isinstance(x, PowerSolution):
        return PowerSolution(project_powers(x.p, cfg), x.precoder_basis, x.rank_deficient)
    x = np.asarray(x)
    if np.iscomplexobj(x):
        return project_precoder(x, cfg)
    return project_powers(x, cfg)
