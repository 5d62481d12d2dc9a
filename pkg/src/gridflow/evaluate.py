"""Accuracy metrics, nodal imbalance, attention PCA, baselines and timing."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoding import eta_features
from .grid import Carrier, Network
from .oracle import net_export, node_caps


def maape_terms(actual, forecast) -> np.ndarray:
    """Per-point arctan(|A - F| / |A|), with 0/0 -> 0 and x/0 -> pi/2."""
    a = np.asarray(actual, dtype=float).ravel()
    f = np.asarray(forecast, dtype=float).ravel()
    if a.shape != f.shape:
        raise ValueError(f"actual and forecast differ in length: {a.size} vs {f.size}")
    err = np.abs(a - f)
    out = np.full(a.shape, np.pi / 2)
    nz = a != 0
    out[nz] = np.arctan2(err[nz], np.abs(a[nz]))
    out[~nz & (err == 0)] = 0.0
    return out


def maape(actual, forecast) -> float:
    """Mean arctangent absolute percentage error."""
    terms = maape_terms(actual, forecast)
    if terms.size == 0:
        raise ValueError("maape of empty input")
    # summation can round one ulp past the bound
    return min(float(terms.mean()), np.pi / 2)


def nodal_imbalance(network: Network, snapshot, flows_mw) -> np.ndarray:
    """Per-node MW by which demand + net export falls outside [0, available generation]."""
    totals = np.asarray(snapshot.demand, dtype=float) + net_export(network, flows_mw)
    caps = node_caps(network, snapshot)
    return np.abs(np.clip(totals, 0.0, caps) - totals)


@dataclass
class ImbalanceStats:
    per_node: list  # mean absolute imbalance per node, MW
    grand_mean: float
    max_per_snapshot: list  # worst node per snapshot, MW


def imbalance_report(network: Network, snapshots, flows_before, flows_after) -> dict:
    """Mean absolute nodal imbalance before and after projection."""

    def stats(flows) -> ImbalanceStats:
        imb = np.array([nodal_imbalance(network, s, f) for s, f in zip(snapshots, flows)])
        return ImbalanceStats(imb.mean(axis=0).tolist(), float(imb.mean()), imb.max(axis=1).tolist())

    return {"before": stats(flows_before), "after": stats(flows_after)}


@dataclass
class PcaResult:
    components: np.ndarray  # (k, N*N), rows are unit principal axes
    explained_variance_ratio: np.ndarray
    mean: np.ndarray
    singular_values: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x.reshape(len(x), -1) - self.mean) @ self.components.T


def pca_attention(matrices, tol: float = 1e-12) -> PcaResult:
    """PCA of flattened attention matrices via SVD of the centered data.

    Axes with singular value at or below ``tol`` are dropped. Each axis is
    sign-fixed so its first significant entry is positive.
    """
    x = np.asarray(matrices, dtype=float)
    if len(x) < 2:
        raise ValueError("PCA needs at least two samples")
    x = x.reshape(len(x), -1)
    mu = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mu, full_matrices=False)
    keep = s > tol
    s, vt = s[keep], vt[keep]
    for i in range(len(vt)):
        nz = np.flatnonzero(np.abs(vt[i]) > 1e-10)
        if nz.size and vt[i, nz[0]] < 0:
            vt[i] = -vt[i]
    var = s**2
    total = var.sum()
    ratio = var / total if total > 0 else np.zeros_like(var)
    return PcaResult(vt, ratio, mu, s)


# -- baselines -----------------------------------------------------------------


def flat_features(network: Network, snapshots, demand_max) -> np.ndarray:
    """Per-snapshot vector [demand / demand_max, eta_wind, eta_solar] without positional encoding."""
    rows = []
    for s in snapshots:
        wind, solar = eta_features(network, s.eta_wind, s.eta_solar)
        rows.append(np.concatenate([np.asarray(s.demand) / demand_max, wind, solar]))
    return np.array(rows)


def baseline_lr(x_train, y_train, x_test, ridge: float = 1e-8) -> np.ndarray:
    """Least squares with intercept, solved through the ridge-regularized normal equations."""
    xa = np.hstack([x_train, np.ones((len(x_train), 1))])
    xt = np.hstack([x_test, np.ones((len(x_test), 1))])
    gram = xa.T @ xa + ridge * np.eye(xa.shape[1])
    w = np.linalg.solve(gram, xa.T @ y_train)
    return np.clip(xt @ w, -1.0, 1.0)


def baseline_knn(x_train, y_train, x_test, k: int = 5) -> np.ndarray:
    """Mean label of the ``k`` nearest training points (Euclidean, ties by index)."""
    x_train, x_test = np.asarray(x_train, float), np.asarray(x_test, float)
    d2 = ((x_test[:, None, :] - x_train[None, :, :]) ** 2).sum(axis=-1)
    k = min(k, len(x_train))
    nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return np.clip(np.asarray(y_train)[nearest].mean(axis=1), -1.0, 1.0)


def baseline_mean(y_train, n_test: int) -> np.ndarray:
    return np.repeat(np.asarray(y_train).mean(axis=0, keepdims=True), n_test, axis=0)


# -- timing --------------------------------------------------------------------


def runtime_bench(predictor, snapshots, repeats: int = 5) -> float:
    """Median wall-clock seconds per 100 snapshots after one warm-up call."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    snapshots = list(snapshots)
    predictor(snapshots)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        predictor(snapshots)
        times.append(time.perf_counter() - t0)
    return float(np.median(times)) * 100.0 / len(snapshots)


# -- report --------------------------------------------------------------------


@dataclass
class EvalReport:
    maape_flows: float
    maape_generation: dict  # carrier -> MAAPE
    imbalance_before: dict
    imbalance_after: dict
    dispatch_balance_residual: float  # MW, worst node over the test set
    baselines: dict = field(default_factory=dict)  # name -> flow MAAPE
    runtime: dict = field(default_factory=dict)  # column -> s / 100 snapshots
    n_test: int = 0
    maape_flows_raw: float | None = None  # before projection

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def generation_maape(network: Network, gen_actual, gen_pred) -> dict:
    gen_actual, gen_pred = np.asarray(gen_actual), np.asarray(gen_pred)
    out = {}
    for car in Carrier:
        cols = [k for k, g in enumerate(network.generators) if g.carrier is car]
        if cols:
            out[car.value] = maape(gen_actual[:, cols], gen_pred[:, cols])
    return out


def plot_report(report_dir, per_sample_maape, imbalance_before, imbalance_after, node_names) -> list:
    """Cumulative MAAPE curve and per-node imbalance bars as PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    report_dir = Path(report_dir)
    paths = []
    vals = np.sort(np.asarray(per_sample_maape))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(vals, np.arange(1, len(vals) + 1) / len(vals))
    ax.set_xlabel("MAAPE per test snapshot")
    ax.set_ylabel("cumulative share")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    p = report_dir / "maape_cdf.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(max(5, 0.4 * len(node_names)), 3.5))
    x = np.arange(len(node_names))
    ax.bar(x - 0.2, imbalance_before, width=0.4, label="raw prediction")
    ax.bar(x + 0.2, imbalance_after, width=0.4, label="after projection")
    ax.set_xticks(x, node_names, rotation=90)
    ax.set_ylabel("mean |imbalance| (MW)")
    ax.legend()
    fig.tight_layout()
    p = report_dir / "imbalance.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    paths.append(p)
    return paths
