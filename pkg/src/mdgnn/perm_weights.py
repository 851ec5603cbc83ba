"""Parameter-shared linear maps on multidimensional edge tensors.

A hidden representation is a real tensor ``[..., C, d_1, ..., d_J]``: one
``C``-vector per hyper-edge ``(x_1, ..., x_J)``.  Each tensor axis is one of

``"set"``
    a permutable set; the weight only depends on whether two edges agree
    along this axis ("self") or not ("other");
``"outer"``
    a non-permutable index owning an independent subset; edges in different
    subsets never interact and every subset has its own blocks;
``"inner"``
    a set permutable only inside the subset of the immediately preceding
    ``"outer"`` axis.

The matrix entry between two edges is a ``C_in x C_out`` block selected by
the outer index and by the set of aggregating axes (set or inner) along which
the two edges differ.  Dense structures keep every such pattern; topological
ones keep only patterns with at most one differing axis.
"""

from __future__ import annotations

import itertools
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

KINDS = ("set", "outer", "inner")
MATERIALIZE_CAP = 10_000


@dataclass(frozen=True)
class PermStructure:
    dims: tuple
    kinds: tuple | None = None
    channels_in: int = 1
    channels_out: int = 1
    topological: bool = True
    mean_aggregation: bool = False

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        kinds = tuple(self.kinds) if self.kinds is not None else ("set",) * len(dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "kinds", kinds)
        if len(dims) == 0:
            raise ValueError("at least one dimension is required")
        if any(d < 1 for d in dims):
            raise ValueError(f"dims must be >= 1, got {dims}")
        if len(kinds) != len(dims) or any(k not in KINDS for k in kinds):
            raise ValueError(f"invalid kinds {kinds} for dims {dims}")
        for a, k in enumerate(kinds):
            if k == "inner" and (a == 0 or kinds[a - 1] != "outer"):
                raise ValueError("an 'inner' axis must directly follow its 'outer' axis")
        if self.channels_in < 1 or self.channels_out < 1:
            raise ValueError("channel counts must be >= 1")

    @property
    def J(self) -> int:
        return len(self.dims)

    @property
    def outer_axes(self) -> tuple:
        return tuple(a for a, k in enumerate(self.kinds) if k == "outer")

    @property
    def agg_axes(self) -> tuple:
        """Axes along which edges exchange information."""
        return tuple(a for a, k in enumerate(self.kinds) if k != "outer")

    @property
    def pairs(self) -> tuple:
        return tuple((a - 1, a) for a, k in enumerate(self.kinds) if k == "inner")

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @property
    def n_singles(self) -> int:
        return self.kinds.count("set")

    @property
    def outer_shape(self) -> tuple:
        return tuple(self.dims[a] for a in self.outer_axes)

    @property
    def patterns(self) -> tuple:
        """Differing-axis patterns that own a block, self pattern ``()`` first."""
        agg = self.agg_axes
        if self.topological:
            return ((),) + tuple((a,) for a in agg)
        out = []
        for r in range(len(agg) + 1):
            out.extend(itertools.combinations(agg, r))
        return tuple(out)

    @property
    def n_edges(self) -> int:
        return math.prod(self.dims)

    def with_channels(self, c_in: int, c_out: int) -> "PermStructure":
        return PermStructure(self.dims, self.kinds, c_in, c_out, self.topological,
                             self.mean_aggregation)

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "kinds": list(self.kinds),
                "channels_in": self.channels_in, "channels_out": self.channels_out,
                "topological": self.topological, "mean_aggregation": self.mean_aggregation}

    @classmethod
    def from_dict(cls, d: dict) -> "PermStructure":
        return cls(tuple(d["dims"]), tuple(d["kinds"]), d["channels_in"], d["channels_out"],
                   d["topological"], d.get("mean_aggregation", False))


def count_parameters(structure: PermStructure) -> int:
    """Number of distinct shared ``C_in x C_out`` blocks.

    Non-nested: ``2^J`` dense, ``J + 1`` topological.  With ``P`` nested pairs
    and ``Q`` plain sets: ``d_1 d_3 ... d_(2P-1) 2^(P+Q)`` dense and
    ``d_1 d_3 ... d_(2P-1) (P+Q+1)`` topological.
    """
    n_bits = len(structure.agg_axes)
    per_subset = (n_bits + 1) if structure.topological else 2 ** n_bits
    return math.prod(structure.outer_shape) * per_subset


def naive_parameter_count(dims) -> int:
    """Block count of an unconstrained map, ``2^(d_1 + ... + d_J)``."""
    return 2 ** sum(int(d) for d in dims)


@dataclass(frozen=True)
class StructuredWeight:
    structure: PermStructure
    free_params: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = np.asarray(self.free_params, dtype=np.float64).ravel()
        if p.size != self.n_free:
            raise ValueError(f"expected {self.n_free} free parameters, got {p.size}")
        p.setflags(write=False)
        object.__setattr__(self, "free_params", p)

    @property
    def n_free(self) -> int:
        s = self.structure
        return count_parameters(s) * s.channels_in * s.channels_out

    @property
    def blocks(self) -> np.ndarray:
        """View ``[n_patterns, *outer_shape, C_in, C_out]``."""
        s = self.structure
        return self.free_params.reshape(block_shape(s))

    @classmethod
    def from_blocks(cls, structure: PermStructure, blocks) -> "StructuredWeight":
        return cls(structure, np.asarray(blocks, dtype=np.float64).reshape(-1))

    @classmethod
    def init(cls, structure: PermStructure, rng: np.random.Generator) -> "StructuredWeight":
        """Uniform Glorot init tempered by ``1 / (1 + sum_j d_j)``."""
        s = structure
        a = math.sqrt(6.0 / (s.channels_in + s.channels_out)) / (1.0 + sum(s.dims))
        n = count_parameters(s) * s.channels_in * s.channels_out
        return cls(s, rng.uniform(-a, a, n))


def block_shape(s: PermStructure) -> tuple:
    return (len(s.patterns),) + s.outer_shape + (s.channels_in, s.channels_out)


# ---------------------------------------------------------------------------
# matrix-free application
# ---------------------------------------------------------------------------

def pattern_aggregate(z: np.ndarray, s: PermStructure, pattern: tuple) -> np.ndarray:
    """Sum of neighbours differing from each edge along exactly the axes in ``pattern``.

    Uses inclusion-exclusion over axis sums; ``z`` is ``[..., C, d_1..d_J]``.
    """
    if not pattern:
        return z
    off = z.ndim - s.J
    acc = np.zeros_like(z)
    for r in range(len(pattern) + 1):
        for sub in itertools.combinations(pattern, r):
            term = z.sum(axis=tuple(off + a for a in sub), keepdims=True) if sub else z
            sign = -1.0 if (len(pattern) - r) % 2 else 1.0
            acc = acc + sign * term
    if s.mean_aggregation:
        acc = acc / max(1, math.prod(s.dims[a] - 1 for a in pattern))
    return acc


def _rows(z: np.ndarray, s: PermStructure):
    """Reshape ``[..., C, d...]`` to ``[..., *outer_shape, R, C]`` for batched matmul."""
    lead = z.ndim - s.J - 1
    rest = tuple(a for a in range(s.J) if a not in s.outer_axes)
    perm = (tuple(range(lead)) + tuple(lead + 1 + a for a in s.outer_axes)
            + tuple(lead + 1 + a for a in rest) + (lead,))
    R = math.prod(s.dims[a] for a in rest)
    return z.transpose(perm).reshape(z.shape[:lead] + s.outer_shape + (R, z.shape[lead])), perm


def _unrows(y: np.ndarray, s: PermStructure, perm, lead_shape):
    rest = tuple(a for a in range(s.J) if a not in s.outer_axes)
    shape = lead_shape + s.outer_shape + tuple(s.dims[a] for a in rest) + (y.shape[-1],)
    return y.reshape(shape).transpose(np.argsort(perm))


def mix_channels(block: np.ndarray, z: np.ndarray, s: PermStructure) -> np.ndarray:
    """Apply a ``[*outer_shape, C_in, C_out]`` block to ``z [..., C_in, d...]``."""
    zr, perm = _rows(z, s)
    return _unrows(zr @ block, s, perm, z.shape[:z.ndim - s.J - 1])


def apply(weight: StructuredWeight, z: np.ndarray) -> np.ndarray:
    """Structured product ``P z`` without materialising ``P``.

    ``z`` is ``[..., C_in, d_1, ..., d_J]``; returns ``[..., C_out, d_1, ..., d_J]``.
    """
    s = weight.structure
    z = np.asarray(z, dtype=np.float64)
    if z.shape[z.ndim - s.J - 1:] != (s.channels_in,) + s.dims:
        raise ValueError(f"input shape {z.shape} incompatible with {(s.channels_in,) + s.dims}")
    blocks = weight.blocks
    out = None
    for t, pat in enumerate(s.patterns):
        term = mix_channels(blocks[t], pattern_aggregate(z, s, pat), s)
        out = term if out is None else out + term
    return out


def apply_transpose(weight: StructuredWeight, g: np.ndarray) -> np.ndarray:
    """``P^T g``: the same structure with every block transposed."""
    s = weight.structure
    st = s.with_channels(s.channels_out, s.channels_in)
    wt = StructuredWeight.from_blocks(st, np.swapaxes(weight.blocks, -1, -2))
    return apply(wt, g)


def block_gradient(weight: StructuredWeight, z: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient of ``<g, apply(weight, z)>`` with respect to the blocks."""
    s = weight.structure
    lead = tuple(range(z.ndim - s.J - 1))
    gr, _ = _rows(g, s)
    grads = []
    for pat in s.patterns:
        ar, _ = _rows(pattern_aggregate(z, s, pat), s)
        grads.append((np.swapaxes(ar, -1, -2) @ gr).sum(axis=lead))
    return np.stack(grads)


# ---------------------------------------------------------------------------
# dense oracle
# ---------------------------------------------------------------------------

def materialize(weight: StructuredWeight, cap: int = MATERIALIZE_CAP) -> np.ndarray:
    """Dense matrix acting on ``z.reshape(-1)`` for ``z`` of shape ``[C_in, d_1..d_J]``.

    Assembled recursively one axis at a time: a set / inner axis yields a
    ``d x d`` block pattern with the "self" sub-matrix on the diagonal and the
    shared "other" sub-matrix elsewhere; an outer axis yields a block-diagonal
    matrix of per-subset sub-matrices.  In topological mode sub-matrices whose
    edges differ along two or more axes are zero.  For testing only.
    """
    s = weight.structure
    E = s.n_edges
    if max(s.channels_out, s.channels_in) * E > cap:
        raise ValueError(f"materialisation of {s.channels_out * E} rows exceeds cap {cap}")
    blocks = weight.blocks
    index = {p: i for i, p in enumerate(s.patterns)}

    def build(axis, outer_idx, differ):
        if axis == s.J:
            t = index.get(tuple(differ))
            if t is None:
                return np.zeros((s.channels_out, s.channels_in))
            return blocks[(t,) + tuple(outer_idx)].T
        d = s.dims[axis]
        if s.kinds[axis] == "outer":
            subs = [build(axis + 1, outer_idx + [x], differ) for x in range(d)]
            n = subs[0].shape
            out = np.zeros((d, n[0], d, n[1]))
            for x in range(d):
                out[x, :, x, :] = subs[x]
            return out.reshape(d * n[0], d * n[1])
        same = build(axis + 1, outer_idx, differ)
        other = build(axis + 1, outer_idx, differ + [axis])
        pattern = np.where(np.eye(d, dtype=bool)[:, None, :, None], same[None, :, None, :],
                           other[None, :, None, :])
        return pattern.reshape(d * same.shape[0], d * same.shape[1])

    # recursion orders rows as (d_1, ..., d_J, C); permute to (C, d_1, ..., d_J)
    dense = build(0, [], [])
    if s.mean_aggregation:
        raise ValueError("materialize supports sum aggregation only")
    co, ci = s.channels_out, s.channels_in
    dense = dense.reshape(s.dims + (co,) + s.dims + (ci,))
    J = s.J
    perm = (J,) + tuple(range(J)) + (2 * J + 1,) + tuple(range(J + 1, 2 * J + 1))
    return dense.transpose(perm).reshape(co * E, ci * E)


def distinct_blocks(dense: np.ndarray, s: PermStructure) -> int:
    """Count distinct non-zero ``C_out x C_in`` blocks of a materialised matrix."""
    E = s.n_edges
    co, ci = s.channels_out, s.channels_in
    t = dense.reshape(co, E, ci, E).transpose(1, 3, 0, 2).reshape(E * E, co * ci)
    nz = t[np.any(t != 0, axis=1)]
    return len({row.tobytes() for row in nz})


# ---------------------------------------------------------------------------
# permutations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PermOperator:
    """Per-axis permutations; ``(permute(z))[.., i, ..] = z[.., perm[i], ..]``.

    ``perms[a]`` is a 1-D permutation for set axes and ``None`` for outer axes.
    For inner axes it is a ``[d_outer, d_inner]`` array: one independent
    permutation per subset.  ``perms[a]`` of an outer axis may be set only when
    ``allow_outer`` is true; such operators move whole subsets and are used
    to probe that nested layers are *not* equivariant to them.
    """
    perms: tuple
    allow_outer: bool = False

    @classmethod
    def identity(cls, s: PermStructure) -> "PermOperator":
        perms = []
        for a, k in enumerate(s.kinds):
            if k == "outer":
                perms.append(None)
            elif k == "inner":
                perms.append(np.tile(np.arange(s.dims[a]), (s.dims[a - 1], 1)))
            else:
                perms.append(np.arange(s.dims[a]))
        return cls(tuple(perms))

    @classmethod
    def random(cls, s: PermStructure, rng: np.random.Generator) -> "PermOperator":
        perms = []
        for a, k in enumerate(s.kinds):
            if k == "outer":
                perms.append(None)
            elif k == "inner":
                perms.append(np.stack([rng.permutation(s.dims[a]) for _ in range(s.dims[a - 1])]))
            else:
                perms.append(rng.permutation(s.dims[a]))
        return cls(tuple(perms))

    def inverse(self) -> "PermOperator":
        inv = []
        for p in self.perms:
            if p is None:
                inv.append(None)
            else:
                inv.append(np.argsort(p, axis=-1))
        return PermOperator(tuple(inv), self.allow_outer)

    def validate(self, s: PermStructure) -> None:
        if len(self.perms) != s.J:
            raise ValueError("operator / structure dimension mismatch")
        for a, (p, k) in enumerate(zip(self.perms, s.kinds)):
            if p is None:
                continue
            p = np.asarray(p)
            if k == "outer" and not self.allow_outer:
                raise ValueError(f"axis {a} is an outer (non-permutable) axis")
            expect = (s.dims[a - 1], s.dims[a]) if k == "inner" else (s.dims[a],)
            if p.shape != expect:
                raise ValueError(f"permutation for axis {a} has shape {p.shape}, expected {expect}")
            if not np.all(np.sort(p, axis=-1) == np.arange(s.dims[a])):
                raise ValueError(f"axis {a}: not a bijection")


def permute(op: PermOperator, z: np.ndarray, s: PermStructure) -> np.ndarray:
    """Apply ``op`` to the trailing ``J`` axes of ``z``."""
    op.validate(s)
    z = np.asarray(z)
    off = z.ndim - s.J
    out = z
    for a, p in enumerate(op.perms):
        if p is None:
            continue
        ax = off + a
        if s.kinds[a] == "inner":
            # index [d_outer, d_inner] broadcast over the remaining axes
            shape = [1] * out.ndim
            shape[ax - 1], shape[ax] = p.shape
            idx = np.broadcast_to(np.asarray(p).reshape(shape),
                                  out.shape[:ax - 1] + p.shape + out.shape[ax + 1:])
            out = np.take_along_axis(out, idx, axis=ax)
        else:
            out = np.take(out, np.asarray(p), axis=ax)
    return out


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

WEIGHT_MAGIC = b"MDGW"


def save_weight(weight: StructuredWeight, path) -> None:
    """JSON header (structure) followed by little-endian float64 payload."""
    header = json.dumps({"structure": weight.structure.to_dict(), "n": int(weight.n_free)}).encode()
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(weight.free_params.astype("<f8").tobytes())


def load_weight(path) -> StructuredWeight:
    with open(path, "rb") as fh:
        if fh.read(4) != WEIGHT_MAGIC:
            raise ValueError("not a structured-weight file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        payload = np.frombuffer(fh.read(), dtype="<f8")
    if payload.size != header["n"]:
        raise ValueError("truncated weight payload")
    return StructuredWeight(PermStructure.from_dict(header["structure"]), payload.astype(np.float64))


# ---------------------------------------------------------------------------
# problem modelling: which channel axes become edge dimensions
# ---------------------------------------------------------------------------

# canonical channel axes: M (APs, "L"), K (UEs, "K"), N (antennas, "U")
AXIS_OF_LETTER = {"L": "M", "K": "K", "U": "N"}
CANONICAL_AXES = ("M", "K", "N")

ROWS = ("1D-GNN-L", "1D-GNN-K", "1D-GNN-U", "2D-GNN-L-K", "2D-GNN-L-U", "2D-GNN-K-U",
        "3D-GNN-L-K-U")


@dataclass(frozen=True)
class GraphSpec:
    """Edge-graph description produced by :func:`build_graph`.

    ``edge_axes`` name the channel axes kept as permutable edge dimensions
    (in structure order); ``fold_axes`` are flattened into input features.
    """
    task: str
    row: str
    nested: bool
    structure: PermStructure
    edge_axes: tuple
    fold_axes: tuple

    @property
    def neighbor_types(self) -> tuple:
        """Structure axes along which a single-axis neighbour may differ."""
        return self.structure.agg_axes

    def constraint(self, e_i, e_j):
        """Neighbour type of ``e_j`` relative to ``e_i``, or ``None``.

        Two edges are neighbours of type ``t`` when they differ along
        exactly one aggregating axis ``t`` and agree everywhere else.
        """
        diff = [a for a, (x, y) in enumerate(zip(e_i, e_j)) if x != y]
        if len(diff) != 1 or diff[0] not in self.structure.agg_axes:
            return None
        return diff[0]

    def neighbors(self, e_i, t) -> list:
        """Edges of type ``t`` around ``e_i``."""
        if t not in self.structure.agg_axes:
            raise ValueError(f"axis {t} is not a neighbour type")
        out = []
        for x in range(self.structure.dims[t]):
            if x != e_i[t]:
                e = list(e_i)
                e[t] = x
                out.append(tuple(e))
        return out


def build_graph(task: str, M: int, K: int, N: int, row: str | None = None,
                nested: bool = False) -> GraphSpec:
    """Map a problem to its edge-graph structure.

    ``task`` is ``"precoding"`` (edges over subsets of (M, K, N)) or
    ``"power"`` (edges over (M, K) with antennas folded into features).
    With ``nested`` the AP axis becomes a non-permutable outer index and an
    antenna axis, if present, is permutable only within each AP.
    """
    sizes = {"M": M, "K": K, "N": N}
    if task == "power":
        row = row or "2D-GNN-L-K"
        if row != "2D-GNN-L-K" or nested:
            raise ValueError("power control uses the non-nested 2D-GNN-L-K structure")
    elif task != "precoding":
        raise ValueError(f"unknown task {task!r}")
    row = row or "3D-GNN-L-K-U"
    if row not in ROWS:
        raise ValueError(f"unknown structure row {row!r}; expected one of {ROWS}")
    axes = [AXIS_OF_LETTER[c] for c in row.split("-")[2:]]
    if nested and "M" in axes:
        # AP outer, its antennas inner, everything else plain sets
        order = ["M"] + (["N"] if "N" in axes else []) + [a for a in axes if a not in ("M", "N")]
        kinds = ["outer"] + (["inner"] if "N" in axes else []) + ["set"] * (len(axes) - 1 - ("N" in axes))
    else:
        order, kinds = axes, ["set"] * len(axes)
    fold = tuple(a for a in CANONICAL_AXES if a not in order)
    s = PermStructure(tuple(sizes[a] for a in order), tuple(kinds))
    return GraphSpec(task, row, bool(nested and "M" in axes), s, tuple(order), fold)
