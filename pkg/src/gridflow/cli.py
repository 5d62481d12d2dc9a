"""Command-line pipeline: gen-data, solve, train, infer, project-dispatch, eval, pca, bench.

Every command works inside a dataset directory (``--data``). Outputs default
to fixed names in that directory so the stages chain without extra flags.
Settings come from command-line flags, then a JSON config file (``--config``
or the ``GRIDFLOW_CONFIG`` environment variable), then built-in defaults.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 solver
or training failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_SOLVER = 0, 1, 2, 3
CONFIG_ENV = "GRIDFLOW_CONFIG"

DEFAULT_FILES = {
    "solutions": "solutions.csv",
    "checkpoint": "model.npz",
    "train_log": "train_log.csv",
    "predictions": "predictions.npz",
    "dispatch": "dispatch.csv",
    "report_dir": "report",
    "pca_out": "pca.json",
    "bench_out": "bench.json",
}

log = logging.getLogger("gridflow")


class UsageError(Exception):
    pass


class MissingInputError(Exception):
    pass


class SolveFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv_ints(text: str) -> tuple:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# (flag, dest, type, default, help); type "on"/"off" marks a switch that sets True/False
_COMMON = [
    ("--seed", "seed", int, 0, "seed for every random choice"),
    ("--threads", "threads", int, 1, "BLAS threads"),
]
_DATA = [("--data", "data", str, None, "dataset directory")]
_MODES = [
    ("--no-link-cost", "link_cost", "off", True, "drop link marginal costs from the LP"),
    ("--strict-efficiency", "strict_efficiency", "on", False, "apply link efficiency in the nodal balance"),
]
_TRAIN = [
    ("--epochs", "epochs", int, 1000, "maximum epochs"),
    ("--batch-size", "batch_size", int, 32, "mini-batch size"),
    ("--patience", "patience", int, 100, "early stopping patience in epochs"),
    ("--lr-max", "lr_max", float, 1e-3, "initial learning rate"),
    ("--lr-min", "lr_min", float, 1e-4, "final learning rate"),
    ("--decay-steps", "decay_steps", int, 100, "optimizer steps of polynomial decay"),
    ("--power", "power", float, 1.5, "decay exponent"),
    ("--alpha", "alpha", float, 1e-7, "weight of the nodal balance penalty (per MW^2)"),
    ("--no-early-stop", "early_stop", "off", True, "run every epoch"),
    ("--m", "m", int, None, "positional encoding length (default: 8 up to 50 nodes, else 16)"),
    ("--hops", "hops", _csv_ints, (1, 3, 5), "attention window hop radii, e.g. 1,3,5"),
    ("--latent", "latent", int, 64, "per-window node latent size"),
    ("--qk-dim", "qk_dim", int, 64, "query/key size of node-link attention"),
    ("--link-dim", "link_dim", int, 128, "per-link latent size"),
    ("--mlp-hidden", "mlp_hidden", _csv_ints, (32, 32), "MLP hidden widths, e.g. 32,32"),
    ("--resume", "resume", str, None, "checkpoint to continue training from"),
]

COMMANDS = {
    "gen-data": (
        "generate a synthetic network and snapshot series",
        _COMMON + [
            ("--out", "out", str, None, "existing output directory"),
            ("--nodes", "nodes", int, 10, "number of nodes"),
            ("--steps", "steps", int, 2000, "number of hourly snapshots"),
            ("--avg-degree", "avg_degree", float, 2.0, "average node degree"),
            ("--test-fraction", "test_fraction", float, 0.05, "share of snapshots held out for testing"),
        ],
    ),
    "solve": (
        "run the DCOPF oracle on every snapshot",
        _COMMON + _DATA + _MODES + [("--out", "solutions", str, None, "solutions file")],
    ),
    "train": (
        "train the attention model on oracle flows",
        _COMMON + _DATA + _TRAIN + [
            ("--solutions", "solutions", str, None, "oracle solutions file"),
            ("--out", "checkpoint", str, None, "checkpoint file to write"),
            ("--log", "train_log", str, None, "training log file"),
        ],
    ),
    "infer": (
        "predict normalized flows and attention matrices",
        _COMMON + _DATA + [
            ("--checkpoint", "checkpoint", str, None, "trained checkpoint"),
            ("--split", "split", str, "test", "snapshots to predict: test or all"),
            ("--out", "predictions", str, None, "predictions file"),
        ],
    ),
    "project-dispatch": (
        "project predicted flows onto the feasible set and dispatch generators",
        _COMMON + _DATA + _MODES + [
            ("--predictions", "predictions", str, None, "predictions file from infer"),
            ("--strict-merit", "strict_merit", "on", False, "rank generators by their own marginal cost"),
            ("--out", "dispatch", str, None, "dispatch file"),
        ],
    ),
    "eval": (
        "compare predictions and dispatch against the oracle",
        _COMMON + _DATA + [
            ("--solutions", "solutions", str, None, "oracle solutions file"),
            ("--predictions", "predictions", str, None, "predictions file from infer"),
            ("--dispatch", "dispatch", str, None, "dispatch file from project-dispatch"),
            ("--out", "report_dir", str, None, "existing or creatable report directory"),
            ("--no-plots", "plots", "off", True, "skip the PNG figures"),
        ],
    ),
    "pca": (
        "principal components of the node attention matrices per window",
        _COMMON + _DATA + [
            ("--predictions", "predictions", str, None, "predictions file from infer"),
            ("--components", "components", int, 2, "components to keep per window"),
            ("--out", "pca_out", str, None, "output JSON"),
        ],
    ),
    "bench": (
        "time model inference, inference plus projection, and the oracle",
        _COMMON + _DATA + _MODES + [
            ("--checkpoint", "checkpoint", str, None, "trained checkpoint"),
            ("--repeats", "repeats", int, 5, "timed repetitions (median is reported)"),
            ("--n-snapshots", "n_snapshots", int, 100, "snapshots per timed run"),
            ("--out", "bench_out", str, None, "output JSON"),
        ],
    ),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gridflow", description=__doc__.split("\n\n")[0])
    parser.add_argument("--config", help=f"JSON config file (also ${CONFIG_ENV})")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (help_text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        for flag, dest, kind, default, text in opts:
            shown = f"{text} (default: {default})" if default is not None else text
            if kind == "on":
                p.add_argument(flag, dest=dest, action="store_const", const=True, default=None, help=shown)
            elif kind == "off":
                p.add_argument(flag, dest=dest, action="store_const", const=False, default=None, help=text)
            else:
                p.add_argument(flag, dest=dest, type=kind, default=None, help=shown)
    return parser


def load_config(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path}: top level must be an object")
    return doc


def resolve(command: str, args: argparse.Namespace, config: dict) -> argparse.Namespace:
    """Merge flag > config (command section over top level) > default."""
    opts = COMMANDS[command][1]
    dests = {dest: (kind, default) for _, dest, kind, default, _ in opts}
    known = {d for _, o in COMMANDS.values() for _, d, _, _, _ in o} | set(COMMANDS)
    norm = lambda k: k.replace("-", "_")
    top = {norm(k): v for k, v in config.items() if k not in COMMANDS}
    unknown = sorted(set(top) - known)
    section = config.get(command, {})
    if not isinstance(section, dict):
        raise UsageError(f"config section {command!r} must be an object")
    section = {norm(k): v for k, v in section.items()}
    unknown += sorted(set(section) - set(dests))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    out = {}
    for dest, (kind, default) in dests.items():
        value = getattr(args, dest, None)
        if value is None:
            value = section.get(dest, top.get(dest, default))
            if value is not None and callable(kind) and kind in (int, float):
                value = kind(value)
            elif value is not None and kind is _csv_ints:
                value = tuple(int(v) for v in (value.split(",") if isinstance(value, str) else value))
        out[dest] = value
    ns = argparse.Namespace(command=command, **out)
    if getattr(ns, "threads", 1) < 1:
        raise UsageError("--threads must be >= 1")
    return ns


def _limit_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    if "numpy" in sys.modules:
        try:
            from threadpoolctl import threadpool_limits
        except ImportError:
            return
        threadpool_limits(n)


# -- helpers -------------------------------------------------------------------


def _data_dir(a) -> Path:
    if a.data is None:
        raise UsageError("--data is required")
    return Path(a.data)


def _path(a, key: str) -> Path:
    value = getattr(a, key)
    return Path(value) if value is not None else _data_dir(a) / DEFAULT_FILES[key]


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingInputError(f"missing input {path}: run `gridflow {stage}` first")
    return path


def _dataset(a):
    from .datagen import load_dataset

    return load_dataset(_need(_data_dir(a) / "manifest.json", "gen-data"))


def _solutions(a, network, key="solutions", stage="solve"):
    from .oracle import load_solutions

    return load_solutions(network, _need(_path(a, key), stage))


def _predictions(path: Path) -> dict:
    import numpy as np

    with np.load(_need(path, "infer"), allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


def _rows_for(steps, dataset) -> list:
    pos = {s.step: i for i, s in enumerate(dataset.snapshots)}
    try:
        return [pos[int(t)] for t in steps]
    except KeyError as exc:
        raise MissingInputError(f"step {exc.args[0]} is not in the dataset") from None


def _aligned_solutions(sol, dataset):
    """Oracle rows reordered to the dataset's snapshot order."""
    import numpy as np

    pos = {int(t): i for i, t in enumerate(sol.steps)}
    try:
        idx = np.array([pos[s.step] for s in dataset.snapshots])
    except KeyError as exc:
        raise MissingInputError(f"solutions lack step {exc.args[0]}; rerun `gridflow solve`") from None
    return sol.flows[idx], sol.gen_output[idx]


# -- commands ------------------------------------------------------------------


def cmd_gen_data(a) -> int:
    from .datagen import make_dataset, save_dataset, synth_network, synth_series

    if a.out is None:
        raise UsageError("--out is required")
    out = Path(a.out)
    if not out.is_dir():
        raise MissingInputError(f"output directory {out} does not exist")
    net = synth_network(a.seed, a.nodes, a.avg_degree)
    snaps = synth_series(a.seed, net, a.steps)
    ds = make_dataset(net, snaps, a.seed, a.test_fraction)
    save_dataset(ds, out)
    print(f"wrote {len(snaps)} snapshots on {net.n_nodes} nodes / {net.n_links} links to {out}")
    return EXIT_OK


def cmd_solve(a) -> int:
    import numpy as np

    from .oracle import SolutionSet, Status, save_solutions, solve_dcopf

    ds = _dataset(a)
    sols, bad = [], []
    for s in ds.snapshots:
        sol = solve_dcopf(ds.network, s, link_cost=a.link_cost, strict_efficiency=a.strict_efficiency)
        if sol.status is not Status.OPTIMAL:
            bad.append(s.step)
        sols.append(sol)
    if bad:
        raise SolveFailure(f"{len(bad)} infeasible snapshot(s), steps: {', '.join(map(str, bad))}")
    out = _path(a, "solutions")
    save_solutions(ds.network, SolutionSet(
        np.array([s.step for s in ds.snapshots]),
        np.array([s.flows for s in sols]),
        np.array([s.gen_output for s in sols]),
        np.array([s.objective for s in sols]),
        "oracle",
    ), out)
    print(f"solved {len(sols)} snapshots -> {out}")
    return EXIT_OK


def cmd_train(a) -> int:
    from .encoding import default_m
    from .nn import ModelConfig
    from .train import TrainConfig, train

    ds = _dataset(a)
    flows, _ = _aligned_solutions(_solutions(a, ds.network), ds)
    cfg = TrainConfig(epochs=a.epochs, batch_size=a.batch_size, patience=a.patience, lr_max=a.lr_max,
                      lr_min=a.lr_min, decay_steps=a.decay_steps, power=a.power, alpha=a.alpha,
                      seed=a.seed, early_stop=a.early_stop)
    m = a.m if a.m is not None else default_m(ds.network.n_nodes)
    mcfg = ModelConfig(m=m, hops=a.hops, latent=a.latent, qk_dim=a.qk_dim, link_dim=a.link_dim,
                       mlp_hidden=a.mlp_hidden)
    resume = _need(Path(a.resume), "train") if a.resume else None
    out = _path(a, "checkpoint")
    res = train(ds, flows, cfg, mcfg, resume=resume, log_path=_path(a, "train_log"), checkpoint_path=out)
    if res.diverged:
        raise SolveFailure(f"training diverged after {res.state.epoch} epochs; last good parameters saved to {out}")
    best = res.state.best_val
    print(f"trained {res.state.epoch} epochs (best val loss {best:.6g}) -> {out}")
    return EXIT_OK


def cmd_infer(a) -> int:
    import numpy as np

    from .encoding import build_feature_batch
    from .nn import load_checkpoint, write_npz

    ds = _dataset(a)
    ckpt = load_checkpoint(_need(_path(a, "checkpoint"), "train"), ds.network)
    if a.split not in ("test", "all"):
        raise UsageError("--split must be 'test' or 'all'")
    idx = ds.test if a.split == "test" else np.arange(len(ds.snapshots))
    snaps = ds.subset(idx)
    model = ckpt.model
    h = build_feature_batch(snaps, ckpt.demand_max, model.encoding, ds.network)
    f_hat, node_att, link_att = [], [], []
    for i in range(0, len(h), 256):
        f, rec = model.forward(h[i : i + 256])
        f_hat.append(f)
        node_att.append(np.stack(rec.node_att, axis=1))
        link_att.append(rec.link_att)
    out = _path(a, "predictions")
    write_npz(out, {
        "steps": np.array([s.step for s in snaps], dtype=np.int64),
        "f_hat": np.concatenate(f_hat),
        "node_att": np.concatenate(node_att),
        "link_att": np.concatenate(link_att),
        "hops": np.array(model.config.hops, dtype=np.int64),
    })
    print(f"predicted {len(snaps)} snapshots -> {out}")
    return EXIT_OK


def cmd_project_dispatch(a) -> int:
    import numpy as np

    from .dispatch import merit_order_dispatch, node_totals
    from .oracle import SolutionSet, project_feasible, save_solutions

    ds = _dataset(a)
    pred = _predictions(_path(a, "predictions"))
    net = ds.network
    lcost = np.array([l.marginal_cost for l in net.links]) if a.link_cost else np.zeros(net.n_links)
    flows, gens, obj = [], [], []
    for r, f_hat in zip(_rows_for(pred["steps"], ds), pred["f_hat"]):
        snap = ds.snapshots[r]
        f = project_feasible(net, snap, f_hat)
        g = merit_order_dispatch(net, snap, node_totals(net, snap, f), strict=a.strict_merit)
        flows.append(f)
        gens.append(g)
        obj.append(float(net.gen_cost @ g + lcost @ np.abs(f)))
    out = _path(a, "dispatch")
    save_solutions(net, SolutionSet(pred["steps"], np.array(flows), np.array(gens), np.array(obj), "dispatch"), out)
    print(f"projected and dispatched {len(flows)} snapshots -> {out}")
    return EXIT_OK


def cmd_eval(a) -> int:
    import numpy as np

    from . import evaluate as ev
    from .oracle import check_feasible

    ds = _dataset(a)
    net = ds.network
    oracle = _solutions(a, net)
    pred = _predictions(_path(a, "predictions"))
    disp = _solutions(a, net, key="dispatch", stage="project-dispatch")
    flows_all, gen_all = _aligned_solutions(oracle, ds)
    rows = _rows_for(pred["steps"], ds)
    if not np.array_equal(disp.steps, pred["steps"]):
        raise MissingInputError("dispatch file does not match the predictions; rerun `gridflow project-dispatch`")
    snaps = [ds.snapshots[r] for r in rows]
    labels = flows_all[rows] / net.f_nom
    projected = disp.flows / net.f_nom

    imb = ev.imbalance_report(net, snaps, pred["f_hat"] * net.f_nom, disp.flows)
    resid = max(check_feasible(net, s, f, g).max_balance_residual for s, f, g in zip(snaps, disp.flows, disp.gen_output))

    train_labels = flows_all[ds.train] / net.f_nom
    x_tr = ev.flat_features(net, ds.subset(ds.train), ds.demand_max)
    x_te = ev.flat_features(net, snaps, ds.demand_max)
    baselines = {
        "mean": ev.maape(labels, ev.baseline_mean(train_labels, len(snaps))),
        "lr": ev.maape(labels, ev.baseline_lr(x_tr, train_labels, x_te)),
        "knn": ev.maape(labels, ev.baseline_knn(x_tr, train_labels, x_te)),
    }
    report = ev.EvalReport(
        maape_flows=ev.maape(labels, projected),
        maape_generation=ev.generation_maape(net, gen_all[rows], disp.gen_output),
        imbalance_before=vars(imb["before"]),
        imbalance_after=vars(imb["after"]),
        dispatch_balance_residual=float(resid),
        baselines=baselines,
        n_test=len(snaps),
        maape_flows_raw=ev.maape(labels, pred["f_hat"]),
    )
    out = Path(a.report_dir) if a.report_dir else _data_dir(a) / DEFAULT_FILES["report_dir"]
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    if a.plots:
        per_sample = [ev.maape(y, p) for y, p in zip(labels, projected)]
        ev.plot_report(out, per_sample, imb["before"].per_node, imb["after"].per_node, [n.id for n in net.nodes])
    print(f"flow MAAPE raw {report.maape_flows_raw:.4f}, projected {report.maape_flows:.4f}; "
          f"imbalance {imb['before'].grand_mean:.4g} MW -> {imb['after'].grand_mean:.3g} MW; report in {out}")
    return EXIT_OK


def cmd_pca(a) -> int:
    from .evaluate import pca_attention

    pred = _predictions(_path(a, "predictions"))
    windows = []
    for k, hop in enumerate(pred["hops"]):
        res = pca_attention(pred["node_att"][:, k])
        keep = min(a.components, len(res.components))
        windows.append({
            "hops": int(hop),
            "explained_variance_ratio": res.explained_variance_ratio.tolist(),
            "components": res.components[:keep].tolist(),
            "mean": res.mean.tolist(),
        })
    out = _path(a, "pca_out")
    out.write_text(json.dumps({"windows": windows}, indent=1) + "\n")
    print("first-component variance share per window: "
          + ", ".join(f"{w['hops']}-hop {w['explained_variance_ratio'][0]:.3f}" if w["explained_variance_ratio"]
                      else f"{w['hops']}-hop 0" for w in windows))
    return EXIT_OK


def cmd_bench(a) -> int:
    from .encoding import build_feature_batch
    from .evaluate import runtime_bench
    from .nn import load_checkpoint
    from .oracle import project_feasible, solve_dcopf

    ds = _dataset(a)
    net = ds.network
    ckpt = load_checkpoint(_need(_path(a, "checkpoint"), "train"), net)
    model = ckpt.model
    snaps = [ds.snapshots[i % len(ds.snapshots)] for i in range(a.n_snapshots)]

    def infer(batch):
        return model.predict(build_feature_batch(batch, ckpt.demand_max, model.encoding, net))

    def infer_project(batch):
        return [project_feasible(net, s, f) for s, f in zip(batch, infer(batch))]

    def oracle(batch):
        return [solve_dcopf(net, s, link_cost=a.link_cost, strict_efficiency=a.strict_efficiency) for s in batch]

    times = {
        "model": runtime_bench(infer, snaps, a.repeats),
        "model_projection": runtime_bench(infer_project, snaps, a.repeats),
        "oracle": runtime_bench(oracle, snaps, a.repeats),
    }
    out = _path(a, "bench_out")
    out.write_text(json.dumps({"seconds_per_100": times, "threads": a.threads, "repeats": a.repeats},
                              indent=1) + "\n")
    print("s / 100 snapshots: " + ", ".join(f"{k} {v:.4f}" for k, v in times.items()))
    return EXIT_OK


HANDLERS = {
    "gen-data": cmd_gen_data,
    "solve": cmd_solve,
    "train": cmd_train,
    "infer": cmd_infer,
    "project-dispatch": cmd_project_dispatch,
    "eval": cmd_eval,
    "pca": cmd_pca,
    "bench": cmd_bench,
}


def _exit_code(exc: BaseException) -> int | None:
    from .dispatch import CapacityExceededError
    from .oracle import InfeasibleError, SolverError
    from .train import DivergenceError

    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (SolveFailure, SolverError, InfeasibleError, CapacityExceededError, DivergenceError)):
        return EXIT_SOLVER
    if isinstance(exc, (MissingInputError, FileNotFoundError, ValueError, KeyError, OSError)):
        return EXIT_DATA
    return None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 1 on unknown flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config or os.environ.get(CONFIG_ENV))
        resolved = resolve(args.command, args, config)
        _limit_threads(resolved.threads)
        return HANDLERS[args.command](resolved)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"gridflow {args.command}: error: {exc}", file=sys.stderr)
        return code


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
