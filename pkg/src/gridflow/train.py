"""Imitation learning of oracle flows: loss, schedule, Adam and the epoch loop."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .encoding import build_feature_batch
from .grid import Network, incidence
from .nn import AttentionModel, ModelConfig, load_checkpoint, save_checkpoint
from .oracle import node_caps

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "lr", "wall_ms")


class DataLabelError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 32
    patience: int = 100
    lr_max: float = 1e-3
    lr_min: float = 1e-4
    decay_steps: int = 100
    power: float = 1.5
    alpha: float = 1e-7
    val_fraction: float = 0.1
    seed: int = 0
    early_stop: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        for name in ("epochs", "batch_size", "patience", "lr_max", "lr_min", "decay_steps", "power"):
            if not getattr(self, name) > 0:
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.alpha < 0:
            raise ValueError("TrainConfig.alpha must be >= 0")
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")


def lr_schedule(step: int, config: TrainConfig = TrainConfig()) -> float:
    """Polynomial decay from ``lr_max`` to ``lr_min`` over ``decay_steps`` optimizer steps."""
    if step < 0:
        raise ValueError("step must be >= 0")
    d = config.decay_steps
    frac = 1.0 - min(step, d) / d
    return (config.lr_max - config.lr_min) * frac**config.power + config.lr_min


# -- labels and loss -----------------------------------------------------------


def normalize_labels(network: Network, flows_mw, tol: float = 1e-6) -> np.ndarray:
    """Divide MW flows by link capacity. ``flows_mw``: (S, L) or list of solutions."""
    flows = np.array([getattr(f, "flows", f) for f in flows_mw], dtype=float)
    over = np.abs(flows) - network.f_nom
    if np.any(over > tol):
        s, l = np.unravel_index(np.argmax(over), over.shape)
        raise DataLabelError(f"label for snapshot {s}, link {network.links[l].id} exceeds f_nom by {over[s, l]:.3g} MW")
    return np.clip(flows / network.f_nom, -1.0, 1.0)


@dataclass
class LossContext:
    """Per-network constants of the loss: incidence scaled to MW."""

    b_mw: np.ndarray  # N x L, incidence * f_nom

    @classmethod
    def for_network(cls, network: Network) -> "LossContext":
        return cls(incidence(network) * network.f_nom[None, :])


def loss_diff(f_hat: ad.DiffArray, f_tilde, demand, caps, ctx: LossContext, alpha: float) -> ad.DiffArray:
    """Batched differentiable loss; every argument carries a leading batch axis.

    residual: mean log-cosh between predicted and label flows (normalized);
    penalty: mean squared violation (MW^2) of each node's implied generation
    total, demand plus net export, against the interval [0, available capacity].
    """
    resid = ad.mean(ad.logcosh(f_hat - np.asarray(f_tilde)))
    totals = ad.matmul(f_hat, ad.DiffArray(ctx.b_mw.T)) + np.asarray(demand)
    below = ad.relu(-totals)
    above = ad.relu(totals - np.asarray(caps))
    penalty = ad.mean(ad.square(below) + ad.square(above))
    return resid + penalty * alpha


def loss(f_hat, f_tilde, snapshot, network: Network, alpha: float = TrainConfig.alpha) -> float:
    """Loss of a single prediction (numpy in, float out)."""
    ctx = LossContext.for_network(network)
    caps = node_caps(network, snapshot)
    val = loss_diff(ad.DiffArray(np.asarray(f_hat, dtype=float)[None]), np.asarray(f_tilde)[None],
                    np.asarray(snapshot.demand)[None], caps[None], ctx, alpha)
    return float(val.value)


# -- optimizer -----------------------------------------------------------------


@dataclass
class TrainState:
    params: dict
    m: dict
    v: dict
    step: int = 0
    epoch: int = 0
    best_val: float = float("inf")
    since_best: int = 0
    best_params: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, params: dict) -> "TrainState":
        return cls(
            params={k: v.copy() for k, v in params.items()},
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            best_params={k: v.copy() for k, v in params.items()},
        )


def adam_step(state: TrainState, grads: dict, lr: float, config: TrainConfig = TrainConfig()) -> TrainState:
    """One bias-corrected Adam update, in place; returns ``state``."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {k}")
    t = state.step + 1
    b1, b2 = config.beta1, config.beta2
    for k, g in grads.items():
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = state.m[k] / (1 - b1**t)
        v_hat = state.v[k] / (1 - b2**t)
        state.params[k] = state.params[k] - lr * m_hat / (np.sqrt(v_hat) + config.eps)
    state.step = t
    return state


# -- training loop -------------------------------------------------------------


@dataclass
class TrainingData:
    features: np.ndarray  # (S, F, N)
    labels: np.ndarray  # (S, L) normalized
    demand: np.ndarray  # (S, N) MW
    caps: np.ndarray  # (S, N) MW

    def take(self, idx) -> "TrainingData":
        return TrainingData(self.features[idx], self.labels[idx], self.demand[idx], self.caps[idx])

    def __len__(self):
        return len(self.labels)


def prepare(model: AttentionModel, snapshots, demand_max, flows_mw=None) -> TrainingData:
    net = model.network
    feats = build_feature_batch(snapshots, demand_max, model.encoding, net)
    labels = normalize_labels(net, flows_mw) if flows_mw is not None else np.zeros((len(snapshots), net.n_links))
    demand = np.array([s.demand for s in snapshots], dtype=float)
    caps = np.array([node_caps(net, s) for s in snapshots])
    return TrainingData(feats, labels, demand, caps)


def batch_loss(model: AttentionModel, params: dict, data: TrainingData, ctx: LossContext, alpha: float):
    f_hat, _, _ = model.forward_diff(data.features, params)
    return loss_diff(f_hat, data.labels, data.demand, data.caps, ctx, alpha)


def evaluate_loss(model: AttentionModel, params: dict, data: TrainingData, ctx: LossContext, alpha: float,
                  batch_size: int = 256) -> float:
    wrapped = {k: ad.DiffArray(v) for k, v in params.items()}
    tot = 0.0
    for i in range(0, len(data), batch_size):
        part = data.take(slice(i, i + batch_size))
        tot += float(batch_loss(model, wrapped, part, ctx, alpha).value) * len(part)
    return tot / max(len(data), 1)


def split_validation(train_idx, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Hold out the last ``fraction`` of the training indices for early stopping."""
    train_idx = np.asarray(train_idx)
    n_val = max(1, int(round(len(train_idx) * fraction))) if fraction > 0 else 0
    if n_val >= len(train_idx):
        raise ValueError("validation split would leave no training data")
    return train_idx[: len(train_idx) - n_val], train_idx[len(train_idx) - n_val :]


@dataclass
class TrainResult:
    model: AttentionModel  # best-validation parameters
    log: list
    state: TrainState
    stopped_early: bool = False
    diverged: bool = False


def train(dataset, flows_mw, config: TrainConfig = TrainConfig(), model_config: ModelConfig = ModelConfig(), *,
          resume=None, log_path=None, checkpoint_path=None, max_epochs: int | None = None) -> TrainResult:
    """Mini-batch Adam on the training split with early stopping on a held-out tail.

    ``flows_mw`` holds oracle flows (MW) for every snapshot of ``dataset``.
    ``resume`` is a checkpoint path written by a previous call; training
    continues from its saved optimizer state. ``max_epochs`` bounds the epochs
    run in this call (the configured total still governs the schedule).
    """
    network = dataset.network
    if resume is not None:
        ckpt = load_checkpoint(resume, network)
        model = ckpt.model
        state = _state_from_checkpoint(ckpt)
    else:
        model = AttentionModel(network, model_config, seed=config.seed)
        state = TrainState.fresh(model.params)

    flows_mw = np.array([getattr(f, "flows", f) for f in flows_mw], dtype=float)
    tr_idx, val_idx = split_validation(dataset.train, config.val_fraction)
    all_data = prepare(model, dataset.snapshots, dataset.demand_max, flows_mw)
    tr, val = all_data.take(tr_idx), all_data.take(val_idx)
    ctx = LossContext.for_network(network)

    rows: list[dict] = []
    stopped = diverged = False
    end_epoch = config.epochs if max_epochs is None else min(config.epochs, state.epoch + max_epochs)
    while state.epoch < end_epoch:
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, state.epoch]).permutation(len(tr))
        tot, lr = 0.0, lr_schedule(state.step, config)
        try:
            snapshot_params = {k: v.copy() for k, v in state.params.items()}
            for i in range(0, len(order), config.batch_size):
                part = tr.take(order[i : i + config.batch_size])
                dp = {k: ad.DiffArray(v, requires_grad=True) for k, v in state.params.items()}
                value = batch_loss(model, dp, part, ctx, config.alpha)
                grads = ad.gradients(value, dp)
                lr = lr_schedule(state.step, config)
                adam_step(state, grads, lr, config)
                tot += float(value.value) * len(part)
            val_loss = evaluate_loss(model, state.params, val, ctx, config.alpha)
            if not np.isfinite(val_loss):
                raise DivergenceError("validation loss is not finite")
        except FloatingPointError as exc:
            log.error("training diverged in epoch %d: %s; keeping last good parameters", state.epoch, exc)
            state.params = snapshot_params
            diverged = True
            break
        state.epoch += 1
        row = {
            "epoch": state.epoch,
            "train_loss": tot / len(tr),
            "val_loss": val_loss,
            "lr": lr,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }
        rows.append(row)
        if val_loss < state.best_val:
            state.best_val = val_loss
            state.since_best = 0
            state.best_params = {k: v.copy() for k, v in state.params.items()}
        else:
            state.since_best += 1
        log.info("epoch %d train %.6g val %.6g lr %.2e", state.epoch, row["train_loss"], val_loss, lr)
        if config.early_stop and state.since_best >= config.patience:
            stopped = True
            break

    best = AttentionModel(network, model.config, params=state.best_params, encoding=model.encoding)
    if log_path is not None:
        write_log(rows, log_path, append=resume is not None)
    if checkpoint_path is not None:
        save_training_checkpoint(checkpoint_path, best, state, dataset.demand_max, config)
    return TrainResult(best, rows, state, stopped, diverged)


def write_log(rows, path, append: bool = False) -> None:
    path = Path(path)
    header = not (append and path.exists() and path.stat().st_size > 0)
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], repr(r["train_loss"]), repr(r["val_loss"]), repr(r["lr"]), f"{r['wall_ms']:.3f}"])


def save_training_checkpoint(path, best: AttentionModel, state: TrainState, demand_max, config: TrainConfig):
    arrays = {}
    for k in state.params:
        arrays[f"current/{k}"] = state.params[k]
        arrays[f"adam_m/{k}"] = state.m[k]
        arrays[f"adam_v/{k}"] = state.v[k]
    extra = {
        "train_config": asdict(config),
        "step": state.step,
        "epoch": state.epoch,
        "best_val": state.best_val if np.isfinite(state.best_val) else None,
        "since_best": state.since_best,
    }
    save_checkpoint(path, best, demand_max=demand_max, seed=config.seed, extra=extra, arrays=arrays)


def _state_from_checkpoint(ckpt) -> TrainState:
    arr, extra = ckpt.arrays, ckpt.extra
    names = list(ckpt.model.params)
    if not all(f"current/{k}" in arr for k in names):
        raise ValueError("checkpoint carries no optimizer state; cannot resume")
    best_val = extra.get("best_val")
    return TrainState(
        params={k: arr[f"current/{k}"].copy() for k in names},
        m={k: arr[f"adam_m/{k}"].copy() for k in names},
        v={k: arr[f"adam_v/{k}"].copy() for k in names},
        step=int(extra["step"]),
        epoch=int(extra["epoch"]),
        best_val=float("inf") if best_val is None else float(best_val),
        since_best=int(extra["since_best"]),
        best_params={k: v.copy() for k, v in ckpt.model.params.items()},
    )
