"""Experiment harness: sweeps, comparison tables and transferability runs.

Every (grid point, family, trial) job derives its own seeds from the root
seed, so results are identical for any worker count.
"""

from __future__ import annotations

import dataclasses
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import io as mio
from .baselines import lmmse_basis, wmmse_power, wmmse_precoding, zf_basis
from .channel_env import (
    PowerSolution,
    SystemConfig,
    sample_channels,
    sum_se_power,
    sum_se_precoding,
)
from .gib_objectives import GibConfig
from .mdgnn_core import FAMILIES, ModelConfig, Model, init_model
from .train_engine import TrainConfig, basis_for, evaluate, train

SCHEMA_VERSION = 1
TASKS = ("precoding", "power-zf", "power-lmmse")
AXES = ("sigma_i_sq", "beta", "M", "K", "N")
BASELINES = ("wmmse", "upper-bound", "uniform")
DEFAULT_SIGMA_GRID = (1e-2, 1e-1, 1e0, 10 ** 0.5, 1e1)
TRANSFER_TEST_K = (4, 5, 6, 7, 8)
WORKERS_ENV = "MDGNN_WORKERS"
RESULT_FIELDS = ("schema_version", "task", "family", "structure", "axis", "value", "trials",
                 "mean_se", "std_se", "a_term", "e_term", "n_params", "train_seconds")


@dataclass(frozen=True)
class ExperimentSpec:
    task: str = "precoding"
    families: tuple = ("wmmse", "edge-mdgnn", "eib-mdgnn", "egib-bern", "vertex-gnn")
    structure: str = "2D-GNN-L-K"
    nested: bool = False
    axis: str = "sigma_i_sq"
    grid: tuple = DEFAULT_SIGMA_GRID
    trials: int = 3
    seed: int = 0
    # base operating point; the swept axis overrides one of these
    M: int = 10
    K: int = 4
    N: int = 4
    sigma_i_sq: float = 0.1
    beta: float = 1e-4
    # model
    hidden: int = 32
    layers: int = 3
    compress: str = "log"
    # training
    steps: int = 1500
    batch_size: int = 32
    lr: float = 3e-3
    pool_size: int | None = 500
    test_draws: int = 200
    max_seconds: float | None = None
    # transferability: train at these overrides, test along the grid
    train_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.axis not in AXES:
            raise ValueError(f"unknown axis {self.axis!r}; expected one of {AXES}")
        fams = tuple(self.families)
        for f in fams:
            if f not in FAMILIES + BASELINES:
                raise ValueError(f"unknown family {f!r}")
        object.__setattr__(self, "families", fams)
        grid = tuple(float(g) for g in self.grid)
        if not grid:
            raise ValueError("grid must be nonempty")
        if self.axis in ("M", "K", "N") and any(g != int(g) or g < 1 for g in grid):
            raise ValueError(f"grid for axis {self.axis} must hold positive integers")
        object.__setattr__(self, "grid", grid)
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.test_draws < 1:
            raise ValueError("test_draws must be >= 1")
        for k in self.train_overrides:
            if k not in AXES:
                raise ValueError(f"cannot override {k!r} for training")

    def replace(self, **kw) -> "ExperimentSpec":
        return dataclasses.replace(self, **kw)

    def point(self, value: float, training: bool = False) -> dict:
        """Operating point for one grid value."""
        pt = {"M": self.M, "K": self.K, "N": self.N, "sigma_i_sq": self.sigma_i_sq, "beta": self.beta}
        pt[self.axis] = int(value) if self.axis in ("M", "K", "N") else float(value)
        if training:
            pt.update(self.train_overrides)
        return pt


@dataclass
class ResultRow:
    task: str
    family: str
    structure: str
    axis: str
    value: float
    trials: int
    mean_se: float
    std_se: float
    a_term: float = 0.0
    e_term: float = 0.0
    n_params: int = 0
    train_seconds: float = 0.0

    def __post_init__(self):
        if self.std_se < 0:
            raise ValueError("std must be >= 0")

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d


# ---------------------------------------------------------------------------
# single job
# ---------------------------------------------------------------------------

def _seed(spec: ExperimentSpec, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([spec.seed] + [int(k) for k in keys])


def _system(pt) -> SystemConfig:
    return SystemConfig(M=pt["M"], K=pt["K"], N=pt["N"])


def _model_config(spec, family, pt) -> ModelConfig:
    head = "precoding" if spec.task == "precoding" else "power"
    gib = GibConfig(beta=pt["beta"]) if family in ("eib-mdgnn", "egib-bern", "vib-gnn", "vgib-bern") else None
    return ModelConfig(family=family, head=head, M=pt["M"], K=pt["K"], N=pt["N"],
                       row=spec.structure if head == "precoding" else "2D-GNN-L-K",
                       nested=spec.nested if head == "precoding" else False,
                       L=spec.layers, hidden=spec.hidden, compress=spec.compress, gib=gib)


def _test_set(spec, pt, i_point, trial):
    rng = np.random.default_rng(_seed(spec, i_point, trial, 1))
    return sample_channels(_system(pt), pt["sigma_i_sq"], rng, batch=spec.test_draws)


def _baseline_se(spec, family, pt, test) -> np.ndarray:
    cfg = _system(pt)
    if spec.task == "precoding":
        if family == "uniform":
            raise ValueError("'uniform' applies to power-control tasks only")
        h = test.h_true if family == "upper-bound" else test.h_observed
        return sum_se_precoding(test.h_true, wmmse_precoding(h, cfg), cfg)
    h = test.h_true if family == "upper-bound" else test.h_observed
    basis = basis_for(spec.task, h, cfg)
    if family == "uniform":
        sol = PowerSolution(np.broadcast_to(cfg.p_max[:, None] / cfg.K, basis.shape[:-1]).copy(), basis)
    else:
        sol = wmmse_power(h, basis, cfg)
    return sum_se_power(test.h_true, sol, cfg)


def run_job(spec: ExperimentSpec, family: str, i_point: int, trial: int) -> dict:
    """Train (if learned) and evaluate one family at one grid point for one trial."""
    value = spec.grid[i_point]
    pt = spec.point(value)
    test = _test_set(spec, pt, i_point, trial)
    if family in BASELINES:
        se = _baseline_se(spec, family, pt, test)
        return {"se": float(se.mean()), "a_term": 0.0, "e_term": 0.0, "n_params": 0, "seconds": 0.0}
    tpt = spec.point(value, training=True)
    mcfg = _model_config(spec, family, tpt)
    job = _seed(spec, i_point, trial, FAMILIES.index(family), 2)
    init_ss, train_ss, eval_ss = job.spawn(3)
    model = init_model(mcfg, np.random.default_rng(init_ss))
    tcfg = TrainConfig(steps=spec.steps, batch_size=spec.batch_size, lr=spec.lr,
                       seed=int(train_ss.generate_state(1)[0]), pool_size=spec.pool_size,
                       max_seconds=spec.max_seconds)
    t0 = time.perf_counter()
    model, hist = train(model, _system(tpt), tpt["sigma_i_sq"], tcfg, spec.task)
    secs = time.perf_counter() - t0
    if tpt != pt:
        model = Model(dataclasses.replace(mcfg, M=pt["M"], K=pt["K"], N=pt["N"]), model.params)
    se = evaluate(model, _system(pt), test, spec.task, seed=int(eval_ss.generate_state(1)[0]))
    tail = hist[-max(1, len(hist) // 10):]
    return {"se": float(se.mean()), "a_term": float(np.mean([h["a_term"] for h in tail])),
            "e_term": float(np.mean([h["e_term"] for h in tail])), "n_params": model.n_params(),
            "seconds": secs}


def _job_star(args):
    return run_job(*args)


def workers_from_env(default: int = 1) -> int:
    raw = os.environ.get(WORKERS_ENV, "")
    try:
        return max(1, int(raw)) if raw.strip() else default
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}")


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

def run(spec: ExperimentSpec, out_dir=None, workers: int | None = None, name: str = "results"):
    """Run the full grid; returns ResultRows (one per family and grid point).

    When ``out_dir`` is given a CSV and a plot script are written there.
    """
    workers = workers or workers_from_env()
    jobs = [(spec, f, i, t) for i in range(len(spec.grid)) for f in spec.families
            for t in range(spec.trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            outs = list(ex.map(_job_star, jobs))
    else:
        outs = [_job_star(j) for j in jobs]
    by_key = {}
    for (s, f, i, t), o in zip(jobs, outs):
        by_key.setdefault((i, f), []).append(o)
    rows = []
    for i, value in enumerate(spec.grid):
        for f in spec.families:
            res = by_key[(i, f)]
            se = np.array([r["se"] for r in res])
            rows.append(ResultRow(
                task=spec.task, family=f, structure=spec.structure if f in FAMILIES else "-",
                axis=spec.axis, value=value, trials=len(res), mean_se=float(se.mean()),
                std_se=float(se.std(ddof=1)) if len(se) > 1 else 0.0,
                a_term=float(np.mean([r["a_term"] for r in res])),
                e_term=float(np.mean([r["e_term"] for r in res])),
                n_params=int(res[0]["n_params"]),
                train_seconds=float(np.mean([r["seconds"] for r in res]))))
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_results(os.path.join(out_dir, f"{name}.csv"), rows)
        write_plot_script(os.path.join(out_dir, f"{name}.plot"), rows, spec)
    return rows


def write_results(path, rows) -> None:
    mio.write_rows(path, [r.as_dict() for r in rows], RESULT_FIELDS)


def read_results(path) -> list:
    out = []
    for r in mio.read_rows(path):
        if int(r["schema_version"]) != SCHEMA_VERSION:
            raise ValueError(f"unsupported result schema {r['schema_version']}")
        out.append(ResultRow(task=r["task"], family=r["family"], structure=r["structure"],
                             axis=r["axis"], value=float(r["value"]), trials=int(r["trials"]),
                             mean_se=float(r["mean_se"]), std_se=float(r["std_se"]),
                             a_term=float(r["a_term"]), e_term=float(r["e_term"]),
                             n_params=int(r["n_params"]), train_seconds=float(r["train_seconds"])))
    return out


def write_plot_script(path, rows, spec: ExperimentSpec) -> None:
    """Declarative plot description: one ``series`` line per family."""
    log_x = spec.axis in ("sigma_i_sq", "beta")
    lines = ["# mdgnn plot script v1",
             f'figure xlabel="{spec.axis}" ylabel="sum SE (bps/Hz)" xscale={"log" if log_x else "linear"} '
             f'title="{spec.task}, {spec.structure}"']
    for f in spec.families:
        pts = sorted((r.value, r.mean_se, r.std_se) for r in rows if r.family == f)
        xs = ",".join(f"{p[0]:.6g}" for p in pts)
        ys = ",".join(f"{p[1]:.6g}" for p in pts)
        es = ",".join(f"{p[2]:.6g}" for p in pts)
        lines.append(f"series label={f} x=[{xs}] y=[{ys}] err=[{es}]")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

def percent_delta(se: float, reference: float) -> float:
    """Signed percentage of ``se`` relative to ``reference``, two decimals."""
    if reference == 0:
        raise ZeroDivisionError("reference SE is zero")
    return round((se - reference) / reference * 100.0, 2)


def format_delta(se: float, reference: float) -> str:
    d = percent_delta(se, reference)
    return f"{d:+.2f}%" if d != 0 else "0.00%"


def compare_table(rows, reference: str = "wmmse") -> str:
    """Rows = families, columns = sweep values; cells ``mean (delta vs reference)``."""
    values = sorted({r.value for r in rows})
    fams = list(dict.fromkeys(r.family for r in rows))
    ref = {r.value: r.mean_se for r in rows if r.family == reference}
    axis = rows[0].axis if rows else "value"
    head = [f"{'family':<14}"] + [f"{axis}={v:<.4g}".rjust(22) for v in values]
    lines = [" ".join(head)]
    for f in fams:
        cells = [f"{f:<14}"]
        for v in values:
            hit = [r for r in rows if r.family == f and r.value == v]
            if not hit:
                cells.append(" " * 22)
                continue
            se = hit[0].mean_se
            cell = f"{se:.2f}" + (f" ({format_delta(se, ref[v])})" if v in ref else "")
            cells.append(cell.rjust(22))
        lines.append(" ".join(cells))
    return "\n".join(lines)


def transfer_spec(base: ExperimentSpec | None = None, train_K: int = 3,
                  test_K=TRANSFER_TEST_K) -> ExperimentSpec:
    base = base or ExperimentSpec(families=("wmmse", "edge-mdgnn", "egib-bern"))
    return base.replace(axis="K", grid=tuple(test_K), train_overrides={"K": train_K})


def pooled_std(rows) -> float:
    """Root-mean-square of the per-row standard deviations."""
    s = [r.std_se for r in rows]
    return math.sqrt(sum(x * x for x in s) / len(s)) if s else 0.0
