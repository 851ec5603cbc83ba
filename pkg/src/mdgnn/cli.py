"""Command-line entry point: ``mdgnn {sweep,table,transfer,selftest}``.

A JSON file passed with ``--config`` may set any flag (keys are the long
option names, dashes or underscores); its values take precedence over the
command line.  ``MDGNN_WORKERS`` sets the number of worker processes.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import experiments as ex

log = logging.getLogger("mdgnn")


def _floats(s):
    return tuple(float(x) for x in s.split(",") if x.strip())


def _names(s):
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _add_common(p):
    p.add_argument("--task", default="precoding", choices=ex.TASKS)
    p.add_argument("--families", type=_names, default=None,
                   help="comma list of model families and baselines (wmmse, upper-bound, uniform)")
    p.add_argument("--structure", default="2D-GNN-L-K")
    p.add_argument("--nested", action="store_true")
    p.add_argument("--axis", default="sigma_i_sq", choices=ex.AXES)
    p.add_argument("--grid", type=_floats, default=None)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="results")
    p.add_argument("--config", default=None, help="JSON file overriding any flag")
    for name, typ in (("M", int), ("K", int), ("N", int), ("sigma_i_sq", float), ("beta", float),
                      ("steps", int), ("batch_size", int), ("lr", float), ("pool_size", int),
                      ("test_draws", int), ("hidden", int), ("layers", int),
                      ("max_seconds", float)):
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdgnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("sweep", help="sweep one axis for several families"))
    t = sub.add_parser("table", help="comparison table with percent deltas vs WMMSE")
    _add_common(t)
    t.add_argument("--input", default=None, help="format an existing results CSV instead of running")
    tr = sub.add_parser("transfer", help="train at one K, test across a K grid")
    _add_common(tr)
    tr.add_argument("--train-K", dest="train_K", type=int, default=3)
    sub.add_parser("selftest", help="fast built-in consistency checks")
    return parser


def _apply_config(args):
    if not getattr(args, "config", None):
        return args
    with open(args.config) as fh:
        cfg = json.load(fh)
    for k, v in cfg.items():
        key = k.replace("-", "_")
        if not hasattr(args, key):
            raise SystemExit(f"config key {k!r} is not a known flag")
        if key in ("families", "grid") and isinstance(v, str):
            v = _names(v) if key == "families" else _floats(v)
        setattr(args, key, tuple(v) if isinstance(v, list) else v)
    return args


def spec_from_args(args, **defaults) -> ex.ExperimentSpec:
    kw = dict(defaults)
    for f in ("task", "structure", "nested", "axis", "trials", "seed", "M", "K", "N", "sigma_i_sq",
              "beta", "steps", "batch_size", "lr", "pool_size", "test_draws", "hidden", "layers",
              "max_seconds"):
        v = getattr(args, f, None)
        if v is not None:
            kw[f] = v
    if args.families is not None:
        kw["families"] = args.families
    elif args.task != "precoding":
        kw.setdefault("families", ("uniform", "wmmse", "edge-mdgnn", "egib-bern"))
    if args.grid is not None:
        kw["grid"] = args.grid
    return ex.ExperimentSpec(**kw)


def cmd_sweep(args):
    spec = spec_from_args(args)
    rows = ex.run(spec, args.out, name="sweep")
    print(ex.compare_table(rows) if "wmmse" in spec.families else _plain(rows))
    return 0


def cmd_table(args):
    if args.input:
        rows = ex.read_results(args.input)
    else:
        spec = spec_from_args(args, grid=(0.1,),
                              families=("upper-bound", "wmmse", "vertex-gnn", "vib-gnn", "vgib-bern",
                                        "edge-mdgnn", "eib-mdgnn", "egib-bern"))
        rows = ex.run(spec, args.out, name="table")
    text = ex.compare_table(rows)
    print(text)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "table.txt"), "w") as fh:
            fh.write(text + "\n")
    return 0


def cmd_transfer(args):
    base = spec_from_args(args, families=("wmmse", "edge-mdgnn", "egib-bern"))
    grid = tuple(int(g) for g in args.grid) if args.grid else ex.TRANSFER_TEST_K
    spec = ex.transfer_spec(base, args.train_K, grid)
    rows = ex.run(spec, args.out, name="transfer")
    print(ex.compare_table(rows))
    return 0


def _plain(rows):
    return "\n".join(f"{r.family:<14} {r.axis}={r.value:<8.4g} {r.mean_se:8.3f} +- {r.std_se:.3f}"
                     for r in rows)


def cmd_selftest(args):
    from .selftest import run_selftest
    ok = run_selftest(print)
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "selftest":
        args = _apply_config(args)
    handlers = {"sweep": cmd_sweep, "table": cmd_table, "transfer": cmd_transfer,
                "selftest": cmd_selftest}
    try:
        return handlers[args.command](args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
