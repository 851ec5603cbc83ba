"""Edge-graph MDGNN models and vertex-graph baselines.

Families
--------
``edge-mdgnn``  deterministic structured layers on hyper-edges
``eib-mdgnn``   adds a Gaussian edge representation (E-term only)
``egib-bern``   adds Bernoulli neighbourhood sampling (A- and E-terms)
``vertex-gnn``  AP/UE bipartite message passing on compressed features
``vib-gnn``     vertex GNN with a Gaussian vertex representation
``vgib-bern``   vertex GNN with Bernoulli edge sampling as well

Parameters live in a plain ``dict[str, ndarray]``; :func:`forward` wraps them
as :class:`~mdgnn.autodiff.Tensor` leaves so the same code path serves
inference and training.  Hidden tensors are ``[B, C, d_1, ..., d_J]``.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import perm_weights as pw
from .channel_env import PowerSolution, PrecodingSolution, SystemConfig
from .gib_objectives import GibConfig

FAMILIES = ("edge-mdgnn", "eib-mdgnn", "egib-bern", "vertex-gnn", "vib-gnn", "vgib-bern")
EDGE_FAMILIES = FAMILIES[:3]
GAUSSIAN_FAMILIES = ("eib-mdgnn", "egib-bern", "vib-gnn", "vgib-bern")
BERNOULLI_FAMILIES = ("egib-bern", "vgib-bern")
SIGMA2_FLOOR = 1e-8
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    family: str = "edge-mdgnn"
    head: str = "precoding"
    M: int = 10
    K: int = 4
    N: int = 4
    row: str = "2D-GNN-L-K"
    nested: bool = False
    topological: bool = True
    L: int = 3
    hidden: int = 32
    channels: tuple | None = None
    activation: str = "leaky_relu"
    normalize_input: bool = True
    # "log": replace each link's gain |h_mk| by log(1 + |h_mk|^2 / ref_power), keeping its direction
    compress: str = "none"
    ref_power: float = 10.0 ** (-12.4)
    mean_aggregation: bool = False
    gib: GibConfig | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.head not in ("precoding", "power"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.compress not in ("none", "log"):
            raise ValueError(f"unknown compress mode {self.compress!r}")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.channels is not None:
            ch = tuple(int(c) for c in self.channels)
            if len(ch) != self.L + 1 or min(ch) < 1:
                raise ValueError("channels must list L + 1 positive widths")
            object.__setattr__(self, "channels", ch)
        if self.stochastic:
            gib = self.gib or GibConfig()
            object.__setattr__(self, "gib", gib)
            s_e, s_a = self.index_sets
            if self.bernoulli:
                gib.check(self.L)
            if not s_e:
                raise ValueError("S_e must be nonempty")
            if self.bernoulli and not self.topological and self.family in EDGE_FAMILIES:
                raise ValueError("neighbourhood sampling needs a topological structure")

    @property
    def stochastic(self) -> bool:
        return self.family in GAUSSIAN_FAMILIES

    @property
    def bernoulli(self) -> bool:
        return self.family in BERNOULLI_FAMILIES

    @property
    def index_sets(self):
        if not self.stochastic:
            return (), ()
        s_e, s_a = self.gib.resolved(self.L, self.bernoulli)
        return s_e, (s_a if self.bernoulli else ())

    def graph(self) -> pw.GraphSpec:
        return pw.build_graph("power" if self.head == "power" else "precoding",
                              self.M, self.K, self.N, self.row, self.nested)

    @property
    def in_channels(self) -> int:
        if self.family in EDGE_FAMILIES:
            return 2 * math.prod(getattr(self, a) for a in self.graph().fold_axes)
        return 2

    @property
    def widths(self) -> tuple:
        if self.channels is not None:
            return self.channels
        return (self.in_channels,) + (self.hidden,) * self.L

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["gib"] = None if self.gib is None else dataclasses.asdict(self.gib)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("gib") is not None:
            d["gib"] = GibConfig(**d["gib"])
        if d.get("channels") is not None:
            d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass
class Model:
    cfg: ModelConfig
    params: dict = field(repr=False)

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "Model":
        return Model(self.cfg, {k: v.copy() for k, v in self.params.items()})


def _glorot(rng, fan_in, fan_out, shape, temper=1.0):
    a = math.sqrt(6.0 / (fan_in + fan_out)) / temper
    return rng.uniform(-a, a, shape)


def init_model(cfg: ModelConfig, rng: np.random.Generator) -> Model:
    p = {}
    widths = cfg.widths
    s_e, s_a = cfg.index_sets
    C_L = widths[-1]
    if cfg.family in EDGE_FAMILIES:
        g = cfg.graph()
        base = dataclasses.replace(g.structure, topological=cfg.topological,
                                   mean_aggregation=cfg.mean_aggregation)
        for l in range(1, cfg.L + 1):
            c_out = widths[l] * (2 if l in s_e else 1)
            s = base.with_channels(widths[l - 1], c_out)
            p[f"W{l}"] = pw.StructuredWeight.init(s, rng).blocks.copy()
            p[f"b{l}"] = np.zeros(c_out)
            if l in s_a:
                for t in s.agg_axes:
                    p[f"a{l}_{t}"] = rng.normal(0.0, 1.0 / math.sqrt(widths[l - 1]), (2, widths[l - 1]))
        if cfg.head == "precoding":
            f_out = 2 * math.prod(getattr(cfg, a) for a in g.fold_axes)
        else:
            f_out = 1
        p["Wo"] = _glorot(rng, C_L, f_out, (C_L, f_out))
        p["bo"] = np.zeros(f_out)
    else:
        temper = 1.0 + cfg.M + cfg.K
        for l in range(1, cfg.L + 1):
            c_in, c_out = widths[l - 1], widths[l] * (2 if l in s_e else 1)
            for side in ("ap", "ue"):
                p[f"{side}_self{l}"] = _glorot(rng, c_in, c_out, (c_in, c_out))
                p[f"{side}_nbr{l}"] = _glorot(rng, c_in, c_out, (c_in, c_out), temper)
                p[f"{side}_b{l}"] = np.zeros(c_out)
            if l in s_a:
                for side in ("ap", "ue"):
                    p[f"{side}_score{l}"] = rng.normal(0.0, 1.0 / math.sqrt(c_in), (2, c_in))
        f_out = 2 * cfg.N if cfg.head == "precoding" else 1
        p["Wo_ap"] = _glorot(rng, 2 * C_L, f_out, (C_L, f_out))
        p["Wo_ue"] = _glorot(rng, 2 * C_L, f_out, (C_L, f_out))
        p["bo"] = np.zeros(f_out)
    if cfg.head == "power":
        p["slack_w"] = np.zeros(C_L)
        p["slack_b"] = np.zeros(())
    if cfg.stochastic:
        X = cfg.gib.mixture_X
        p["prior_logits"] = np.zeros(X)
        p["prior_means"] = np.zeros(X)
        p["prior_logvars"] = np.zeros(X)
    return Model(cfg, p)


# ---------------------------------------------------------------------------
# input encoding
# ---------------------------------------------------------------------------

def encode_input(h_observed, cfg: ModelConfig) -> np.ndarray:
    """Real edge features ``[B, 2F, *edge_dims]`` from complex ``[B, M, K, N]`` channels.

    Folded axes become ``F`` feature slots; real parts come first, then
    imaginary parts.  With ``cfg.normalize_input`` each draw is scaled to
    unit feature RMS.
    """
    h = np.asarray(h_observed)
    if h.ndim == 3:
        h = h[None]
    if h.shape[1:] != (cfg.M, cfg.K, cfg.N):
        raise ValueError(f"channel shape {h.shape[1:]} does not match {(cfg.M, cfg.K, cfg.N)}")
    h = compress_channel(h, cfg)
    g = cfg.graph()
    idx = {a: i + 1 for i, a in enumerate(pw.CANONICAL_AXES)}
    order = [0] + [idx[a] for a in g.edge_axes + g.fold_axes]
    t = np.transpose(h, order)
    edge_shape = t.shape[1:1 + len(g.edge_axes)]
    t = t.reshape(t.shape[0], *edge_shape, -1)
    x = np.concatenate([t.real, t.imag], axis=-1)
    x = np.moveaxis(x, -1, 1)
    if cfg.normalize_input:
        x = x / _rms(x)
    return np.ascontiguousarray(x)


def compress_channel(h, cfg: ModelConfig):
    if cfg.compress == "none":
        return h
    gain = np.linalg.norm(h, axis=-1, keepdims=True)
    safe = np.where(gain > 0, gain, 1.0)
    return h / safe * np.log1p(gain ** 2 / cfg.ref_power)


def _rms(x):
    axes = tuple(range(1, x.ndim))
    r = np.sqrt(np.mean(x ** 2, axis=axes, keepdims=True))
    return np.where(r > 0, r, 1.0)


def vertex_features(h_observed, cfg: ModelConfig):
    """Compressed AP and UE features, each ``[B, 2, n]``.

    Per link: the channel norm and the magnitude of the antenna sum, both
    invariant to antenna reordering; averaged over the partner dimension.
    """
    h = np.asarray(h_observed)
    if h.ndim == 3:
        h = h[None]
    h = compress_channel(h, cfg)
    if cfg.normalize_input:
        h = h / _rms(np.abs(h))
    f = np.stack([np.linalg.norm(h, axis=-1),
                  np.abs(h.sum(axis=-1)) / math.sqrt(h.shape[-1])], axis=1)  # [B, 2, M, K]
    return f.mean(axis=3), f.mean(axis=2)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _sub(s: pw.PermStructure):
    axes = ad.letters(s.J, skip="bcyz")
    outer = "".join(axes[a] for a in s.outer_axes)
    return axes, outer


def _mix(block, z, s):
    axes, outer = _sub(s)
    return ad.einsum(f"{outer}yc,by{axes}->bc{axes}", block, z)


def _check_finite(t, layer):
    v = t.value
    if not np.all(np.isfinite(v)):
        mag = np.nanmax(np.abs(np.where(np.isfinite(v), v, np.nan))) if np.isfinite(v).any() else np.inf
        raise FloatingPointError(f"non-finite activations at layer {layer} (max finite magnitude {mag:.3g})")


def _sample_mask(logits, rng, mode, temperature, valid):
    """Neighbour mask from logits: relaxed, hard, or thresholded."""
    if mode == "train":
        u = rng.uniform(1e-12, 1.0 - 1e-12, logits.shape)
        m = ad.sigmoid((logits + (np.log(u) - np.log1p(-u))) * (1.0 / temperature))
        return m * valid
    if mode == "sample":
        u = rng.uniform(0.0, 1.0, logits.shape)
        return ad.Tensor((u < ad.sigmoid_value(logits.value)) * valid)
    return ad.Tensor((logits.value > 0) * valid)


def _edge_layer(l, z, P, s, cfg, rng, mode, sampling, gaussian):
    """One structured layer; returns (output, trace dict)."""
    trace = {}
    blocks = P[f"W{l}"]
    if not sampling:
        out = ad.structured_apply(blocks, z, s)
    else:
        out = _mix(blocks[0], z, s)
        phis = []
        B, C = z.shape[:2]
        for i, t in enumerate(s.agg_axes):
            Pn = math.prod(s.dims[:t])
            D = s.dims[t]
            Q = math.prod(s.dims[t + 1:])
            zt = ad.reshape(z, (B, C, Pn, D, Q))
            a = P[f"a{l}_{t}"]
            s_i = ad.einsum("c,bcpdq->bpdq", a[0], zt)
            s_j = ad.einsum("c,bcpdq->bpqd", a[1], zt)
            logits = (ad.reshape(s_i, (B, Pn, D, Q, 1)) + ad.reshape(s_j, (B, Pn, 1, Q, D))) \
                * (1.0 / math.sqrt(C))
            valid = (1.0 - np.eye(D))[None, None, :, None, :]
            phis.append((ad.sigmoid(logits), valid))
            mask = _sample_mask(logits, rng, mode, cfg.gib.temperature, valid)
            agg = ad.reshape(ad.masked_sum(mask, zt), z.shape)
            out = out + _mix(blocks[1 + i], agg, s)
        trace["phi"] = phis
    out = out + ad.reshape(P[f"b{l}"], (1, -1) + (1,) * s.J)
    if gaussian:
        c = out.shape[1] // 2
        mu = out[:, :c]
        sigma2 = ad.softplus(out[:, c:]) + SIGMA2_FLOOR
        if mode == "mean":
            zs = mu
        else:
            eps = rng.standard_normal(mu.shape)
            zs = mu + ad.sqrt(sigma2) * eps
        trace.update(mu=mu, sigma2=sigma2, z=zs)
        out = zs
    _check_finite(out, l)
    return out, trace


def _as_param_tensors(params):
    return {k: (v if isinstance(v, ad.Tensor) else ad.Tensor(v, name=k)) for k, v in params.items()}


def forward(model: Model, h_observed, rng: np.random.Generator | None = None,
            mode: str = "sample", params=None):
    """Run the model on complex channels ``[B, M, K, N]``.

    ``mode``: ``"train"`` (relaxed Bernoulli masks, Gaussian samples),
    ``"sample"`` (hard Bernoulli masks, Gaussian samples), ``"mean"``
    (masks thresholded at 1/2, Gaussian means; deterministic).

    Returns ``(z_L, trace, P)``: final activated representation, per-layer
    trace dicts, and the Tensor parameters used (for gradients).
    """
    cfg = model.cfg
    if mode not in ("train", "sample", "mean"):
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None:
        rng = np.random.default_rng(0)
    P = params if params is not None else _as_param_tensors(model.params)
    if cfg.family not in EDGE_FAMILIES:
        return forward_vertex(model, h_observed, rng, mode, P)
    act = ad.ACTIVATIONS[cfg.activation]
    s_e, s_a = cfg.index_sets
    g = cfg.graph()
    base = dataclasses.replace(g.structure, topological=cfg.topological,
                               mean_aggregation=cfg.mean_aggregation)
    z = ad.Tensor(encode_input(h_observed, cfg))
    trace = []
    for l in range(1, cfg.L + 1):
        c_out = P[f"W{l}"].shape[-1]
        s = base.with_channels(z.shape[1], c_out)
        out, tr = _edge_layer(l, z, P, s, cfg, rng, mode, l in s_a, l in s_e)
        trace.append(tr)
        z = act(out)
    return z, trace, P


def forward_vertex(model: Model, h_observed, rng, mode="sample", P=None):
    """Bipartite AP/UE message passing on antenna-compressed features."""
    cfg = model.cfg
    P = P if P is not None else _as_param_tensors(model.params)
    act = ad.ACTIVATIONS[cfg.activation]
    s_e, s_a = cfg.index_sets
    fa, fu = vertex_features(h_observed, cfg)
    a, u = ad.Tensor(fa), ad.Tensor(fu)   # [B, C, M], [B, C, K]
    trace = []
    for l in range(1, cfg.L + 1):
        tr = {}
        if l in s_a:
            C = a.shape[1]
            sa = P[f"ap_score{l}"]
            su = P[f"ue_score{l}"]
            # AP m listens to UE k, and UE k listens to AP m
            la = (ad.reshape(ad.einsum("c,bcm->bm", sa[0], a), (a.shape[0], -1, 1))
                  + ad.reshape(ad.einsum("c,bck->bk", sa[1], u), (u.shape[0], 1, -1))) * (1.0 / math.sqrt(C))
            lu = (ad.reshape(ad.einsum("c,bck->bk", su[0], u), (u.shape[0], -1, 1))
                  + ad.reshape(ad.einsum("c,bcm->bm", su[1], a), (a.shape[0], 1, -1))) * (1.0 / math.sqrt(C))
            tr["phi"] = [(ad.sigmoid(la), None), (ad.sigmoid(lu), None)]
            ma = _sample_mask(la, rng, mode, cfg.gib.temperature, 1.0)
            mu_ = _sample_mask(lu, rng, mode, cfg.gib.temperature, 1.0)
            agg_a = ad.einsum("bmk,bck->bcm", ma, u)
            agg_u = ad.einsum("bkm,bcm->bck", mu_, a)
        else:
            agg_a = ad.broadcast_to(u.sum(axis=2, keepdims=True), u.shape[:2] + (a.shape[2],))
            agg_u = ad.broadcast_to(a.sum(axis=2, keepdims=True), a.shape[:2] + (u.shape[2],))
        na = (ad.einsum("io,bim->bom", P[f"ap_self{l}"], a) + ad.einsum("io,bim->bom", P[f"ap_nbr{l}"], agg_a)
              + ad.reshape(P[f"ap_b{l}"], (1, -1, 1)))
        nu = (ad.einsum("io,bik->bok", P[f"ue_self{l}"], u) + ad.einsum("io,bik->bok", P[f"ue_nbr{l}"], agg_u)
              + ad.reshape(P[f"ue_b{l}"], (1, -1, 1)))
        if l in s_e:
            c = na.shape[1] // 2
            mu = ad.concat([na[:, :c], nu[:, :c]], axis=2)
            sigma2 = ad.softplus(ad.concat([na[:, c:], nu[:, c:]], axis=2)) + SIGMA2_FLOOR
            zs = mu if mode == "mean" else mu + ad.sqrt(sigma2) * rng.standard_normal(mu.shape)
            tr.update(mu=mu, sigma2=sigma2, z=zs)
            M = na.shape[2]
            na, nu = zs[:, :, :M], zs[:, :, M:]
        _check_finite(na, l)
        _check_finite(nu, l)
        trace.append(tr)
        a, u = act(na), act(nu)
    return (a, u), trace, P


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

def _edge_readout(model, z, P):
    """Per-(m, k) head features ``[B, M, K, F]`` (or canonical edge layout)."""
    cfg = model.cfg
    if cfg.family in EDGE_FAMILIES:
        g = cfg.graph()
        J = len(g.edge_axes)
        axes = ad.letters(J, skip="bcfz")
        out = ad.einsum(f"cf,bc{axes}->b{axes}f", P["Wo"], z) + P["bo"]
        return out, g
    a, u = z
    out = (ad.reshape(ad.einsum("cf,bcm->bmf", P["Wo_ap"], a), (a.shape[0], a.shape[2], 1, -1))
           + ad.reshape(ad.einsum("cf,bck->bkf", P["Wo_ue"], u), (u.shape[0], 1, u.shape[2], -1))
           + P["bo"])
    return out, None


def _to_canonical(out, g, cfg):
    """``[B, *edge, 2F]`` head output -> real and imaginary ``[B, M, K, N]``."""
    B = out.shape[0]
    F = out.shape[-1] // 2
    re, im = out[..., :F], out[..., F:]
    if g is None:
        return re, im   # vertex readout already [B, M, K, N]
    sizes = {"M": cfg.M, "K": cfg.K, "N": cfg.N}
    layout = g.edge_axes + g.fold_axes
    shape = (B,) + tuple(sizes[a] for a in layout)
    perm = (0,) + tuple(1 + layout.index(a) for a in pw.CANONICAL_AXES)
    return (ad.transpose(ad.reshape(re, shape), perm), ad.transpose(ad.reshape(im, shape), perm))


def precoding_tensors(model, z, P, sys_cfg: SystemConfig):
    """Differentiable precoder ``(w_re, w_im)`` after per-AP power projection."""
    cfg = model.cfg
    out, g = _edge_readout(model, z, P)
    re, im = _to_canonical(out, g, cfg)
    # unit head output corresponds to an equal split of the budget
    scale = math.sqrt(sys_cfg.p_max_watt / (cfg.K * cfg.N))
    re, im = re * scale, im * scale
    row = (ad.square(re) + ad.square(im)).sum(axis=(2, 3))
    pm = sys_cfg.p_max_watt
    factor = ad.sqrt(pm / ad.maximum(row, pm))
    factor = ad.reshape(factor, factor.shape + (1, 1))
    return re * factor, im * factor


def power_tensors(model, z, P, sys_cfg: SystemConfig):
    """Differentiable powers ``[B, M, K]``: per-AP softmax over K UEs and one slack slot."""
    cfg = model.cfg
    out, g = _edge_readout(model, z, P)
    if g is not None:
        logits = out[..., 0]
        if g.edge_axes != ("M", "K"):
            raise ValueError("power head needs edges over (M, K)")
        hidden_ap = z.mean(axis=3)                          # [B, C, M]
    else:
        logits = out[..., 0]
        hidden_ap = z[0]
    slack = ad.einsum("c,bcm->bm", P["slack_w"], hidden_ap) + P["slack_b"]
    allz = ad.concat([logits, ad.reshape(slack, slack.shape + (1,))], axis=2)
    logp = allz - ad.logsumexp(allz, axis=2, keepdims=True)
    return ad.exp(logp)[..., :cfg.K] * sys_cfg.p_max_watt


def head_precoding(model, z, sys_cfg: SystemConfig, P=None) -> PrecodingSolution:
    P = P if P is not None else _as_param_tensors(model.params)
    re, im = precoding_tensors(model, z, P, sys_cfg)
    return PrecodingSolution(re.value + 1j * im.value)


def head_power(model, z, basis, sys_cfg: SystemConfig, P=None) -> PowerSolution:
    P = P if P is not None else _as_param_tensors(model.params)
    p = power_tensors(model, z, P, sys_cfg).value
    return PowerSolution(p, np.asarray(basis))


def predict(model: Model, h_observed, sys_cfg: SystemConfig, basis=None,
            rng: np.random.Generator | None = None, mode: str = "sample"):
    """Inference helper returning a :class:`PrecodingSolution` or :class:`PowerSolution`."""
    z, _, P = forward(model, h_observed, rng, mode)
    if model.cfg.head == "precoding":
        re, im = precoding_tensors(model, z, P, sys_cfg)
        return PrecodingSolution(re.value + 1j * im.value)
    if basis is None:
        raise ValueError("power head needs a precoder basis")
    p = power_tensors(model, z, P, sys_cfg).value
    basis = np.asarray(basis)
    return PowerSolution(p, basis if basis.ndim == 4 else basis[None])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"MDGC"


def save_model(model: Model, path) -> None:
    """JSON header (config, parameter layout, version) + little-endian float64 payload."""
    names = sorted(model.params)
    layout = [[k, list(model.params[k].shape)] for k in names]
    header = json.dumps({"version": CHECKPOINT_VERSION, "config": model.cfg.to_dict(),
                         "layout": layout}).encode()
    payload = np.concatenate([np.ravel(model.params[k]) for k in names]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload.tobytes())


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError("not a model checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        payload = np.frombuffer(fh.read(), dtype="<f8")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')}")
    params, off = {}, 0
    for name, shape in header["layout"]:
        size = math.prod(shape)
        if off + size > payload.size:
            raise ValueError("truncated checkpoint payload")
        params[name] = payload[off:off + size].reshape(shape).astype(np.float64)
        off += size
    if off != payload.size:
        raise ValueError("checkpoint payload has trailing data")
    return Model(ModelConfig.from_dict(header["config"]), params)
