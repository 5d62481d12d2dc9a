"""Synthetic grids, weather/demand series and dataset files.

Everything is a pure function of the seed and configuration. The snapshot file
keeps the column layout a real ENTSO-E/ERA5 derived series would use, so real
data can be dropped in later.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import oracle
from .grid import (
    DEFAULT_LINK_COST,
    DEFAULT_MARGINAL_COST,
    Carrier,
    Generator,
    Link,
    Network,
    NetworkError,
    Node,
    load_network,
    require_valid,
    save_network,
)

log = logging.getLogger(__name__)

DATASET_SCHEMA = "gridflow-data/1"
SNAPSHOT_COLUMNS = ("step", "node_id", "demand_MW", "eta_wind", "eta_solar")


class DataError(ValueError):
    pass


class InfeasibleSnapshotError(DataError):
    pass


@dataclass(frozen=True)
class Snapshot:
    step: int
    demand: np.ndarray  # MW per node
    eta_wind: np.ndarray  # per node, in [0, 1]
    eta_solar: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, Snapshot):
            return NotImplemented
        return (
            self.step == other.step
            and np.array_equal(self.demand, other.demand)
            and np.array_equal(self.eta_wind, other.eta_wind)
            and np.array_equal(self.eta_solar, other.eta_solar)
        )

    def check(self) -> None:
        if np.any(self.demand < 0) or not np.all(np.isfinite(self.demand)):
            raise DataError(f"snapshot {self.step}: demand must be finite and >= 0")
        for name in ("eta_wind", "eta_solar"):
            eta = getattr(self, name)
            if not np.all((eta >= 0) & (eta <= 1)):
                raise DataError(f"snapshot {self.step}: {name} outside [0, 1]")


@dataclass
class Dataset:
    network: Network
    snapshots: list[Snapshot]
    train: np.ndarray
    test: np.ndarray
    demand_max: np.ndarray
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.network == other.network
            and self.snapshots == other.snapshots
            and np.array_equal(self.train, other.train)
            and np.array_equal(self.test, other.test)
            and np.array_equal(self.demand_max, other.demand_max)
        )

    def subset(self, idx) -> list[Snapshot]:
        return [self.snapshots[i] for i in idx]


@dataclass(frozen=True)
class CapacityProfile:
    """Generator size ranges (MW) per carrier and how generators are placed.

    Conventional plants sit at a fixed share of "hub" nodes; every other node
    draws renewables independently with probability ``renewable_presence``.
    """

    ranges: dict = field(
        default_factory=lambda: {
            Carrier.SOLAR: (500.0, 2200.0),
            Carrier.WIND: (500.0, 2200.0),
            Carrier.OCGT: (6000.0, 12000.0),
            Carrier.COAL: (6000.0, 12000.0),
        }
    )
    renewable_presence: float = 0.8
    conventional_share: float = 0.25
    # share of links built as 10 GW transmission corridors, the rest are 5 GW
    strong_link_share: float = 0.5
    # conventional fleet / system peak demand
    reserve_margin: float = 1.5


def synth_network(seed: int, n_nodes: int, avg_degree: float = 2.0,
                  capacity_profile: CapacityProfile | None = None) -> Network:
    """Random connected grid: a random spanning tree plus extra edges."""
    if n_nodes < 2:
        raise ValueError("n_nodes must be >= 2")
    if avg_degree < 1:
        raise ValueError("avg_degree must be >= 1")
    prof = capacity_profile or CapacityProfile()
    rng = np.random.default_rng(seed)

    nodes = tuple(Node(f"n{i}", f"node {i}") for i in range(n_nodes))
    order = rng.permutation(n_nodes)
    edges = set()
    for k in range(1, n_nodes):
        a, b = int(order[k]), int(order[rng.integers(0, k)])
        edges.add((min(a, b), max(a, b)))
    target = min(int(round(avg_degree * n_nodes / 2)), n_nodes * (n_nodes - 1) // 2)
    while len(edges) < target:
        a, b = rng.choice(n_nodes, size=2, replace=False)
        edges.add((int(min(a, b)), int(max(a, b))))
    links = []
    for k, (a, b) in enumerate(sorted(edges)):
        if rng.random() < 0.5:
            a, b = b, a
        f_nom = 10000.0 if rng.random() < prof.strong_link_share else 5000.0
        links.append(Link(f"l{k}", f"n{a}", f"n{b}", f_nom, 1.0, DEFAULT_LINK_COST))

    n_hubs = max(1, int(round(prof.conventional_share * n_nodes)))
    hubs = set(rng.choice(n_nodes, size=n_hubs, replace=False).tolist())
    gens = []

    def add(i, car):
        lo, hi = prof.ranges[car]
        p = float(np.round(rng.uniform(lo, hi), 3))
        gens.append(Generator(f"g{len(gens)}", f"n{i}", car, p, DEFAULT_MARGINAL_COST[car]))

    for i in range(n_nodes):
        for car in (Carrier.SOLAR, Carrier.WIND):
            if rng.random() < prof.renewable_presence:
                add(i, car)
        if i in hubs:
            add(i, Carrier.OCGT if rng.random() < 0.5 else Carrier.COAL)
    return require_valid(Network(nodes, tuple(links), tuple(gens)))


@dataclass(frozen=True)
class SeriesConfig:
    daily_swing: float = 0.2
    weekly_swing: float = 0.08
    demand_noise: float = 0.03
    wind_mean: float = 0.4
    wind_persistence: float = 0.9
    wind_sigma: float = 0.12
    wind_shared: float = 0.6  # weight of the system-wide wind component
    max_repairs: int = 30
    repair_factor: float = 0.9


def peak_demand(network: Network, seed: int, reserve_margin: float = CapacityProfile.reserve_margin) -> np.ndarray:
    """Per-node peak demand so that conventional capacity covers ``reserve_margin`` x total peak."""
    rng = np.random.default_rng([seed, 1])
    conv = sum(g.p_nom for g in network.generators if not g.carrier.renewable)
    share = rng.gamma(4.0, size=network.n_nodes)
    share /= share.sum()
    return share * conv / reserve_margin


def synth_series(seed: int, network: Network, n_steps: int, config: SeriesConfig | None = None,
                 *, verify: bool = True, **solve_kw) -> list[Snapshot]:
    """Hourly snapshots of demand and renewable capacity coefficients.

    Solar follows a clipped diurnal sine with daily cloudiness, wind a clipped
    AR(1) process mixing a system-wide and a local component, demand a daily and
    weekly profile with noise. Each snapshot is checked with the DCOPF oracle
    and its demand scaled down until it is solvable.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    cfg = config or SeriesConfig()
    n = network.n_nodes
    rng = np.random.default_rng([seed, 0])
    peak = peak_demand(network, seed)

    hours = np.arange(n_steps)
    phase = rng.uniform(-1.0, 1.0, size=n)  # hours of longitude offset
    n_days = n_steps // 24 + 2
    cloud = rng.uniform(0.45, 1.0, size=(n_days, n))
    season = 0.75 + 0.25 * np.cos(2 * np.pi * hours / 8760.0)
    sun = np.sin(2 * np.pi * (hours[:, None] + phase[None, :] - 6.0) / 24.0)
    eta_solar = np.clip(sun, 0.0, 1.0) * cloud[hours // 24] * season[:, None]
    eta_solar = np.clip(eta_solar, 0.0, 1.0)

    eps_shared = rng.normal(size=n_steps)
    eps_local = rng.normal(size=(n_steps, n))
    eta_wind = np.empty((n_steps, n))
    state = np.full(n, cfg.wind_mean)
    shared = 0.0
    for t in range(n_steps):
        shared = cfg.wind_persistence * shared + cfg.wind_sigma * eps_shared[t]
        local = cfg.wind_persistence * (state - cfg.wind_mean) + cfg.wind_sigma * eps_local[t]
        state = cfg.wind_mean + (1 - cfg.wind_shared) * local + cfg.wind_shared * shared
        state = np.clip(state, 0.0, 1.0)
        eta_wind[t] = state

    daily = 1.0 + cfg.daily_swing * np.sin(2 * np.pi * (hours - 9.0) / 24.0)
    weekly = 1.0 - cfg.weekly_swing * ((hours // 24) % 7 >= 5)
    noise = 1.0 + cfg.demand_noise * rng.normal(size=(n_steps, n))
    base = (daily * weekly)[:, None] / (1.0 + cfg.daily_swing)
    demand = np.maximum(peak[None, :] * base * noise, 0.0)

    snaps = []
    for t in range(n_steps):
        snap = Snapshot(int(t), demand[t], eta_wind[t], eta_solar[t])
        if verify:
            snap = _repair(network, snap, cfg, **solve_kw)
        snaps.append(snap)
    return snaps


def _repair(network, snap, cfg, **solve_kw) -> Snapshot:
    for _ in range(cfg.max_repairs + 1):
        sol = oracle.solve_dcopf(network, snap, **solve_kw)
        if sol.status is oracle.Status.OPTIMAL:
            return snap
        snap = Snapshot(snap.step, snap.demand * cfg.repair_factor, snap.eta_wind, snap.eta_solar)
    raise InfeasibleSnapshotError(f"infeasible snapshot at step {snap.step} after {cfg.max_repairs} repairs")


def split_indices(n: int, seed: int, test_fraction: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    perm = np.random.default_rng([seed, 2]).permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def compute_demand_max(snapshots, idx) -> np.ndarray:
    d = np.array([snapshots[i].demand for i in idx])
    dmax = d.max(axis=0)
    # keep the normalizer strictly positive for nodes with no recorded load
    return np.where(dmax > 0, dmax, 1.0)


def make_dataset(network: Network, snapshots, seed: int, test_fraction: float = 0.05,
                 demand_max_from: str = "train") -> Dataset:
    train, test = split_indices(len(snapshots), seed, test_fraction)
    if demand_max_from == "train":
        dmax = compute_demand_max(snapshots, train)
    elif demand_max_from == "all":
        dmax = compute_demand_max(snapshots, range(len(snapshots)))
    else:
        raise ValueError("demand_max_from must be 'train' or 'all'")
    return Dataset(network, list(snapshots), train, test, dmax, {"seed": seed, "demand_max_from": demand_max_from})


# -- files --------------------------------------------------------------------


def save_snapshots(network: Network, snapshots, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SNAPSHOT_COLUMNS)
        for s in snapshots:
            for j, node in enumerate(network.nodes):
                w.writerow([s.step, node.id, repr(float(s.demand[j])), repr(float(s.eta_wind[j])),
                            repr(float(s.eta_solar[j]))])


def load_snapshots(network: Network, path) -> list[Snapshot]:
    idx = network.node_index
    rows: dict[int, dict] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != SNAPSHOT_COLUMNS:
            raise DataError(f"{path}: line 1: expected header {','.join(SNAPSHOT_COLUMNS)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(SNAPSHOT_COLUMNS):
                raise DataError(f"{path}: line {lineno}: malformed row, expected {len(SNAPSHOT_COLUMNS)} "
                                f"columns, got {len(row)}")
            try:
                step = int(row[0])
                d, ew, es = float(row[2]), float(row[3]), float(row[4])
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: malformed row: {exc}") from exc
            if row[1] not in idx:
                raise DataError(f"{path}: line {lineno}: unknown node {row[1]!r}")
            if not (np.isfinite(d) and d >= 0):
                raise DataError(f"{path}: line {lineno}: demand_MW must be finite and >= 0, got {d}")
            for name, v in (("eta_wind", ew), ("eta_solar", es)):
                if not 0.0 <= v <= 1.0:
                    raise DataError(f"{path}: line {lineno}: {name}={v} outside [0, 1]")
            rec = rows.setdefault(step, {})
            if row[1] in rec:
                raise DataError(f"{path}: line {lineno}: duplicate row for step {step}, node {row[1]}")
            rec[row[1]] = (d, ew, es)

    snaps = []
    n = network.n_nodes
    for step in sorted(rows):
        rec = rows[step]
        if len(rec) != n:
            missing = sorted(set(idx) - set(rec))
            raise DataError(f"{path}: step {step}: missing rows for nodes {missing}")
        arr = np.zeros((3, n))
        for nid, vals in rec.items():
            arr[:, idx[nid]] = vals
        snaps.append(Snapshot(step, arr[0], arr[1], arr[2]))
    return snaps


def save_dataset(dataset: Dataset, directory) -> Path:
    """Write ``network.json``, ``snapshots.csv`` and ``manifest.json`` into ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"output directory {directory} does not exist")
    save_network(dataset.network, directory / "network.json")
    save_snapshots(dataset.network, dataset.snapshots, directory / "snapshots.csv")
    manifest = {
        "version": DATASET_SCHEMA,
        "network": "network.json",
        "snapshots": "snapshots.csv",
        "steps": [s.step for s in dataset.snapshots],
        "train": [int(i) for i in dataset.train],
        "test": [int(i) for i in dataset.test],
        "demand_max": {n.id: float(v) for n, v in zip(dataset.network.nodes, dataset.demand_max)},
        "meta": dataset.meta,
    }
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def load_dataset(path) -> Dataset:
    """Load a dataset from its manifest file (or the directory holding it)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if doc.get("version") != DATASET_SCHEMA:
        raise DataError(f"{path}: schema version {doc.get('version')!r}, expected {DATASET_SCHEMA!r}")
    root = path.parent
    try:
        network = load_network(root / doc["network"])
    except NetworkError as exc:
        raise DataError(f"{path}: invalid network: {exc}") from exc
    snaps = load_snapshots(network, root / doc["snapshots"])
    if [s.step for s in snaps] != list(doc["steps"]):
        raise DataError(f"{path}: snapshot steps in file do not match manifest")
    n = len(snaps)
    train = np.array(doc["train"], dtype=np.int64)
    test = np.array(doc["test"], dtype=np.int64)
    if np.intersect1d(train, test).size:
        raise DataError(f"{path}: train and test splits overlap")
    if train.size and (train.min() < 0 or train.max() >= n) or test.size and (test.min() < 0 or test.max() >= n):
        raise DataError(f"{path}: split index out of range")
    try:
        dmax = np.array([float(doc["demand_max"][node.id]) for node in network.nodes])
    except KeyError as exc:
        raise DataError(f"{path}: demand_max missing for node {exc}") from exc
    if np.any(dmax <= 0):
        raise DataError(f"{path}: demand_max must be strictly positive")
    return Dataset(network, snaps, train, test, dmax, doc.get("meta", {}))
