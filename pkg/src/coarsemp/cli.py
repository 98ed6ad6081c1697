"""Command-line experiments: ``coarsemp {gen,coarsen,mp-error,train,replay}``.

Every command writes ``manifest.json`` next to its outputs. The manifest holds
the fully resolved arguments and the library version, and
``coarsemp replay <manifest>`` reruns the command from it. Outputs contain no
timestamps, so a replay reproduces them byte for byte.

Exit codes: 0 on success, 1 when a hard contract fails (a message-passing
error above its certified bound), 2 on invalid input.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from ._validation import is_symmetric
from .coarsening import LoukasConfig, from_partition, identity_coarsening, loukas_coarsen, rsa_constant
from .datasets import (
    GeometricConfig,
    PlantedPartitionConfig,
    load_directory,
    planted_partition_graph,
    principal_connected_component,
    quadrant_labels,
    random_geometric_graph,
    random_smooth_signals,
    save_dataset,
    stratified_masks,
)
from .gnn import GcnModel, SgcModel, TrainConfig, train_coarse, train_full
from .graph import (
    Graph,
    build_laplacian,
    build_propagation,
    make_context,
    parse_laplacian,
    parse_propagation,
    spectral_subspace,
)
from .operators import OPERATOR_KINDS, bound_constants, coarse_operator, k_step_bound, mp_error

logger = logging.getLogger("coarsemp")

HARD_RTOL = 1e-8
MANIFEST = "manifest.json"


class ContractViolation(Exception):
    pass


# -- argument parsing ---------------------------------------------------------


def _kv(text):
    """``name:key=val,key=val`` -> (name, {key: val})."""
    name, _, rest = text.partition(":")
    params = {}
    for item in filter(None, rest.split(",")):
        key, eq, val = item.partition("=")
        if not eq:
            raise argparse.ArgumentTypeError(f"expected key=value in {text!r}, got {item!r}")
        params[key.strip()] = val.strip()
    return name.strip(), params


_GEN_KEYS = {
    "geometric": {"n": int, "t": float, "threshold": float, "seed": int},
    "planted": {
        "n": int,
        "classes": int,
        "p_in": float,
        "p_out": float,
        "feature_dim": int,
        "noise_sigma": float,
        "seed": int,
    },
}


def gen_spec(text):
    name, raw = _kv(text)
    if name not in _GEN_KEYS:
        raise argparse.ArgumentTypeError(f"unknown generator {name!r}, expected geometric or planted")
    keys = _GEN_KEYS[name]
    params = {}
    for key, val in raw.items():
        if key not in keys:
            raise argparse.ArgumentTypeError(f"unknown {name} parameter {key!r}")
        params["threshold" if key == "t" else key] = keys[key](val)
    return {"generator": name, **params}


def float_list(text):
    return [float(v) for v in text.split(",") if v.strip()]


def int_list(text):
    """``0,1,2`` or a range ``0-9``."""
    out = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        lo, dash, hi = part.partition("-")
        out.extend(range(int(lo), int(hi) + 1) if dash and lo else [int(part)])
    return out


def model_spec(text):
    name, _, arg = text.partition(":")
    if name not in ("sgc", "gcn"):
        raise argparse.ArgumentTypeError(f"unknown model {text!r}, expected sgc:<k> or gcn:<hidden>")
    return {"name": name, "param": int(arg) if arg else (2 if name == "sgc" else 16)}


def _add_graph_args(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--graph", help="directory written by 'gen' (edges.tsv, features.csv, ...)")
    src.add_argument("--gen", type=gen_spec, help="generator, e.g. geometric:n=1000,t=0.05,seed=0")
    p.add_argument("--pcc", action="store_true", help="restrict to the principal connected component")


def _add_coarsen_args(p):
    p.add_argument("--laplacian", default="shifted:0.001", help="comb, norm or shifted:<delta>")
    p.add_argument("--prop", default="gcn", help="adj, mean or gcn")
    p.add_argument("--ratios", type=float_list, default=[0.5])
    p.add_argument("--K", type=int, default=None, help="preserved subspace dimension (default ceil(N/10))")
    p.add_argument("--ne", default="0.05", help="nodes merged per sweep: an integer, a fraction of N, or 'none'")
    p.add_argument("--uniform", action=argparse.BooleanOptionalAction, default=True)


def build_parser():
    parser = argparse.ArgumentParser(prog="coarsemp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic graph in the text formats")
    p.add_argument("--gen", type=gen_spec, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("coarsen", help="coarsen a graph and certify the message-passing bound")
    _add_graph_args(p)
    _add_coarsen_args(p)
    p.add_argument("--k", type=int, default=6, help="propagation depth of the certified bound")
    p.add_argument("--assignment", help="JSON list or coarsening document overriding the greedy algorithm")
    p.add_argument("--show", action="store_true", help="print Q, Q+ and Pi densely (small graphs)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("mp-error", help="message-passing errors of coarse operators against the bound")
    _add_graph_args(p)
    _add_coarsen_args(p)
    p.add_argument("--operators", default="mp,naive,diag,diff,sym")
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--signals", type=int, default=100)
    p.add_argument("--seeds", type=int_list, default=[0])
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train GNNs on coarsened graphs and on the full graph")
    _add_graph_args(p)
    _add_coarsen_args(p)
    p.add_argument("--operators", default="mp")
    p.add_argument("--model", type=model_spec, default=model_spec("sgc:6"))
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--wd", type=float, default=0.01)
    p.add_argument("--seeds", type=int_list, default=list(range(10)))
    p.add_argument("--out", required=True)

    p = sub.add_parser("replay", help="rerun a command from its manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out", help="output directory (default: the manifest's directory)")
    return parser


# -- shared plumbing ------------------------------------------------------------


def _workers():
    env = os.environ.get("COARSEMP_THREADS")
    if env:
        return max(1, int(env))
    return max(1, min(4, os.cpu_count() or 1))


def _map(fn, items):
    """Ordered parallel map over independent, deterministic cells."""
    items = list(items)
    n = min(_workers(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def _resolved(args):
    # the output location is not part of the experiment, so identical runs give identical manifests
    return {k: v for k, v in vars(args).items() if k not in ("verbose", "out")}


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _write_manifest(out, args, extra=None):
    doc = {"version": __version__, "args": _resolved(args)}
    if extra:
        doc.update(extra)
    _write_json(Path(out) / MANIFEST, doc)


def _generate(spec):
    spec = dict(spec)
    name = spec.pop("generator")
    if name == "geometric":
        g = random_geometric_graph(GeometricConfig(**spec))
        rng = np.random.default_rng(GeometricConfig(**spec).seed)
        labels = quadrant_labels(g.features)
        train, val, test = stratified_masks(labels, rng)
        return Graph(g.adjacency, g.features, labels, train, val, test)
    return planted_partition_graph(PlantedPartitionConfig(**spec))


def _load_graph(args):
    g = _generate(args.gen) if args.gen else load_directory(args.graph)
    if args.pcc:
        g = principal_connected_component(g)
    return g


def _max_merge(text, N):
    if text.lower() in ("none", "inf", "unbounded"):
        return None
    v = float(text)
    if 0 < v < 1:
        return max(1, math.ceil(v * N))
    if v < 1 or v != int(v):
        raise ValueError(f"--ne must be a positive integer, a fraction in (0, 1) or 'none', got {text!r}")
    return int(v)


class Setup:
    """Laplacian context, preserved subspace and propagation matrix of one graph."""

    def __init__(self, g, args):
        self.g = g
        self.N = g.num_nodes
        self.lap_kind, self.delta = parse_laplacian(args.laplacian)
        self.prop = parse_propagation(args.prop)
        self.ctx = make_context(build_laplacian(g, self.lap_kind, self.delta))
        self.K = args.K or math.ceil(self.N / 10)
        # the RSA constant needs V^T L V invertible, so skip ker(L) when it exists
        self.basis = spectral_subspace(self.ctx, self.K, exclude_kernel=self.ctx.kernel_basis.shape[1] > 0)
        self.S = build_propagation(g, self.prop)
        self.symmetric = is_symmetric(self.S, tol=1e-10)
        self.max_merge = _max_merge(args.ne, self.N)
        self.uniform = args.uniform

    def coarsen(self, ratio):
        if ratio == 0:
            return identity_coarsening(self.N), False
        cfg = LoukasConfig(ratio=ratio, K=self.K, max_merge=self.max_merge, force_uniform=self.uniform)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            res = loukas_coarsen(self.g.adjacency, self.ctx, self.basis, cfg, laplacian=self.lap_kind, delta=self.delta)
        if res.exhausted:
            logger.warning("ratio %s: graph ran out of edges at n=%d", ratio, res.coarsening.n)
        return res.coarsening, res.exhausted

    def certificate(self, c, k):
        eps = rsa_constant(c, self.basis, self.ctx).epsilon
        if not self.symmetric:
            return eps, None
        return eps, bound_constants(self.S, c, self.ctx, self.basis, eps)


def _coarsenings(setup, ratios):
    return dict(zip(ratios, _map(setup.coarsen, ratios)))


def _check_ratios(ratios):
    bad = [r for r in ratios if not 0 <= r < 1]
    if bad or not ratios:
        raise ValueError(f"ratios must lie in [0, 1), got {ratios}")
    return sorted(set(ratios))


def _operators(text):
    ops = [o.strip().lower() for o in text.split(",") if o.strip()]
    bad = [o for o in ops if o not in OPERATOR_KINDS]
    if bad or not ops:
        raise ValueError(f"unknown operators {bad}, expected a subset of {OPERATOR_KINDS}")
    return ops


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


# -- commands -------------------------------------------------------------------


def cmd_gen(args):
    out = Path(args.out)
    g = _generate(args.gen)
    save_dataset(g, out)
    _write_manifest(out, args, {"num_nodes": g.num_nodes, "num_edges": g.num_edges})
    print(f"wrote {g.num_nodes} nodes, {g.num_edges // 2} edges to {out}")
    return 0


def _parse_assignment(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(doc, dict):
        return doc["assignment"], None if doc.get("uniform", True) else doc.get("weights")
    return doc, None


def cmd_coarsen(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    g = _load_graph(args)
    setup = Setup(g, args)
    if args.assignment:
        assignment, weights = _parse_assignment(args.assignment)
        if len(assignment) != setup.N:
            raise ValueError(f"assignment has {len(assignment)} entries for {setup.N} nodes")
        c = from_partition(assignment, weights)
        cells = {round(c.ratio, 12): (c, False)}
    else:
        cells = _coarsenings(setup, _check_ratios(args.ratios))

    def report(item):
        ratio, (c, exhausted) = item
        eps, consts = setup.certificate(c, args.k)
        doc = {"ratio": ratio, "n": c.n, "N": c.N, "exhausted": exhausted, "rsa": {"epsilon": eps, "K": setup.K}}
        doc["rsa"]["finite_bound"] = setup.ctx.condition_ratio if setup.ctx.lambda_min > 0 else None
        if consts is not None:
            bound = k_step_bound(consts, args.k)
            doc["certificate"] = {
                "epsilon": eps,
                "C_S": consts.C_S,
                "C_Pi": consts.C_Pi,
                "C_Pi_bar": consts.C_Pi_bar,
                "k": args.k,
                "bound": bound,
                "assumption_flags": consts.assumption_flags,
                "leakages": {k: float(v) for k, v in consts.leakages.items()},
                "C_Pi_over_condition": (
                    consts.C_Pi / setup.ctx.condition_ratio if setup.ctx.lambda_min > 0 else None
                ),
            }
        else:
            doc["certificate"] = None
        return doc

    reports = _map(report, sorted(cells.items()))
    warn = []
    for doc in reports:
        ratio = doc["ratio"]
        c = cells[ratio][0]
        tag = f"r{ratio:g}"
        (out / f"coarsening_{tag}.json").write_text(c.to_json(indent=None) + "\n", encoding="utf-8")
        smp = coarse_operator(setup.S, c, "mp").tocoo()
        order = np.lexsort((smp.col, smp.row))
        with open(out / f"smp_{tag}.tsv", "w", encoding="utf-8") as fh:
            fh.write(f"# {c.n}x{c.n}\n")
            for i, j, v in zip(smp.row[order], smp.col[order], smp.data[order]):
                fh.write(f"{i}\t{j}\t{float(v)!r}\n")
        _write_json(out / f"report_{tag}.json", doc)
        if doc["exhausted"]:
            warn.append(f"ratio {ratio}: graph ran out of edges at n={c.n}")
        print(f"r={ratio:g} n={c.n} epsilon={doc['rsa']['epsilon']:.6g}")
        if args.show:
            np.set_printoptions(precision=4, suppress=True, linewidth=160)
            print("Q =\n", c.Q.toarray(), "\nQ+ =\n", c.Q_plus.toarray(), "\nPi =\n", c.Pi.toarray(), sep="")
    eps_seq = [d["rsa"]["epsilon"] for d in reports]
    if any(b < a - 1e-12 for a, b in zip(eps_seq, eps_seq[1:])):
        logger.info("epsilon is not monotone in the coarsening ratio: %s", eps_seq)
    _write_manifest(out, args, {"warnings": warn})
    return 0


def cmd_mp_error(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    g = _load_graph(args)
    setup = Setup(g, args)
    ops = _operators(args.operators)
    if not setup.symmetric and any(o in ("diff", "sym") for o in ops):
        raise ValueError(f"operators diff and sym need a symmetric propagation matrix, not {setup.prop!r}")
    if args.k < 1 or args.signals < 1 or not args.seeds:
        raise ValueError("need k >= 1, at least one signal and at least one seed")
    cells = _coarsenings(setup, _check_ratios(args.ratios))
    certs = dict(zip(cells, _map(lambda r: setup.certificate(cells[r][0], args.k), cells)))
    signals = {s: random_smooth_signals(setup.basis, setup.ctx, args.signals, s) for s in args.seeds}

    def cell(key):
        ratio, seed, op = key
        c = cells[ratio][0]
        eps, consts = certs[ratio]
        S_c = coarse_operator(setup.S, c, op, A=g.adjacency, propagation=setup.prop)
        err = mp_error(setup.S, S_c, c, signals[seed], args.k, setup.ctx)
        bound = k_step_bound(consts, args.k) if consts is not None else math.nan
        return (ratio, seed, op, args.k, float(err.mean()), float(err.max()), eps, bound)

    keys = sorted((r, s, o) for r in cells for s in args.seeds for o in ops)
    rows = sorted(_map(cell, keys))
    _write_csv(
        out / "mp_error.csv",
        ["ratio", "seed", "operator", "k", "error_mean", "error_max", "epsilon", "bound"],
        [[_fmt(v) for v in row] for row in rows],
    )
    violations = []
    for ratio, seed, op, _, _, emax, _, bound in rows:
        consts = certs[ratio][1]
        if op == "mp" and consts is not None and consts.assumptions_hold:
            if emax > bound * (1 + HARD_RTOL) + 1e-12:
                violations.append(f"ratio {ratio} seed {seed}: MP error {emax} exceeds bound {bound}")
    warn = [f"ratio {r}: graph ran out of edges" for r, (_, ex) in cells.items() if ex]
    _write_manifest(out, args, {"warnings": warn, "violations": violations})
    for v in violations:
        logger.error(v)
    if violations:
        raise ContractViolation(f"{len(violations)} message-passing bound violation(s)")
    print(f"wrote {len(rows)} rows to {out / 'mp_error.csv'}")
    return 0


def _new_model(spec, d, classes, seed):
    if spec["name"] == "sgc":
        return SgcModel.init(spec["param"], d, classes, seed)
    return GcnModel.init(d, spec["param"], classes, seed)


def cmd_train(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    g = _load_graph(args)
    if g.labels is None or g.features is None or g.train_mask is None:
        raise ValueError("training needs features, labels and a split file")
    if not args.seeds:
        raise ValueError("need at least one seed")
    setup = Setup(g, args)
    ops = _operators(args.operators)
    cfg_kw = dict(epochs=args.epochs, learning_rate=args.lr, weight_decay=args.wd)
    if args.model["name"] == "gcn":
        cfg_kw["hidden"] = args.model["param"]
    classes = int(g.labels.max()) + 1
    d = g.features.shape[1]
    cells = _coarsenings(setup, _check_ratios(args.ratios))
    operators = {
        (r, o): coarse_operator(setup.S, cells[r][0], o, A=g.adjacency, propagation=setup.prop)
        for r in cells
        for o in ops
    }
    masks = (g.train_mask, g.val_mask, g.test_mask)

    def run(key):
        ratio, op, seed = key
        model = _new_model(args.model, d, classes, seed)
        cfg = TrainConfig(seed=seed, **cfg_kw)
        if op == "full":
            res = train_full(model, setup.S, g.features, g.labels, *masks, cfg)
        else:
            res = train_coarse(model, operators[(ratio, op)], cells[ratio][0], g.features, g.labels, *masks, cfg)
        last = res.history[res.best_epoch if res.best_epoch is not None else -1] if res.history else None
        test_acc = last["test_acc"] if last else math.nan
        return (ratio, op, seed, test_acc, res.best_epoch if res.best_epoch is not None else -1, res.seconds_per_epoch)

    keys = [(0.0, "full", s) for s in args.seeds]
    keys += [(r, o, s) for r in cells for o in ops for s in args.seeds]
    rows = sorted(_map(run, sorted(keys)))
    _write_csv(out / "train.csv", ["ratio", "operator", "seed", "test_acc", "best_epoch"], [[_fmt(v) for v in r[:5]] for r in rows])
    summary = []
    for ratio, op in sorted({(r[0], r[1]) for r in rows}):
        acc = np.array([r[3] for r in rows if r[0] == ratio and r[1] == op])
        summary.append(
            {"ratio": ratio, "operator": op, "runs": int(acc.size), "mean": float(acc.mean()), "std": float(acc.std())}
        )
        print(f"r={ratio:g} {op:5s} acc={100 * acc.mean():.1f} +- {100 * acc.std():.1f}")
    _write_json(out / "summary.json", {"cells": summary})
    timing = {f"{r[0]:g}/{r[1]}": r[5] for r in rows}
    logger.info("seconds per epoch: %s", timing)
    _write_manifest(out, args, {"warnings": [f"ratio {r}: graph ran out of edges" for r, (_, ex) in cells.items() if ex]})
    return 0


def cmd_replay(args):
    doc = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    if doc.get("version") != __version__:
        logger.warning("manifest written by version %s, running %s", doc.get("version"), __version__)
    recorded = argparse.Namespace(**doc["args"])
    recorded.verbose = args.verbose
    recorded.out = args.out or str(Path(args.manifest).parent)
    return COMMANDS[recorded.command](recorded)


COMMANDS = {"gen": cmd_gen, "coarsen": cmd_coarsen, "mp-error": cmd_mp_error, "train": cmd_train}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "replay":
            return cmd_replay(args)
        return COMMANDS[args.command](args)
    except ContractViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
