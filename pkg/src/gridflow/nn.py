"""Attention model mapping demand and weather to normalized link flows.

Pipeline: per-node input features -> multi-window masked graph self-attention
(each window restricted to a t-hop neighborhood, node-specific transforms)
-> node-link attention where per-link positional queries attend over node
states -> a shared MLP with a Tanh head, one output per link.

Internally everything is batched: feature tensors are (B, F, N), node states
(B, N, K*F'), link states (B, L, U). The ``*_forward`` helpers accept single
samples in the column layout (F x N) for inspection and testing.
"""
from __future__ import annotations

import dataclasses
import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .encoding import N_NODE_FEATURES, NodeEncoding, link_pe, node_lpe
from .grid import Network, t_hop_mask

CHECKPOINT_SCHEMA = "gridflow-ckpt/1"


@dataclass(frozen=True)
class ModelConfig:
    m: int = 8  # positional encoding length
    hops: tuple = (1, 3, 5)  # one attention window per entry
    latent: int = 64  # F'
    qk_dim: int = 64  # V
    link_dim: int = 128  # U
    mlp_hidden: tuple = (32, 32)
    slope: float = 0.2  # LeakyReLU negative slope

    def __post_init__(self):
        object.__setattr__(self, "hops", tuple(int(h) for h in self.hops))
        object.__setattr__(self, "mlp_hidden", tuple(int(h) for h in self.mlp_hidden))
        if not self.hops or any(b <= a for a, b in zip(self.hops, self.hops[1:])) or self.hops[0] < 0:
            raise ValueError(f"window hops must be non-negative and strictly increasing, got {self.hops}")
        if min(self.m, self.latent, self.qk_dim, self.link_dim) <= 0:
            raise ValueError("model dimensions must be positive")

    @property
    def n_features(self) -> int:
        return N_NODE_FEATURES + self.m

    @property
    def windows(self) -> int:
        return len(self.hops)

    def for_network(self, network: Network) -> "ModelConfig":
        """Clamp ``m`` to the N-1 non-trivial eigenvectors a small grid has."""
        return dataclasses.replace(self, m=min(self.m, network.n_nodes - 1))


@dataclass
class AttentionRecord:
    node_att: list  # per window, (B, N, N) or (N, N)
    link_att: np.ndarray  # (B, L, N) or (L, N)


def param_shapes(config: ModelConfig, n_nodes: int, n_links: int) -> dict:
    f, fl, k = config.n_features, config.latent, config.windows
    shapes = {}
    for w in range(k):
        shapes[f"gsat.W.{w}"] = (n_nodes, f, fl)
        shapes[f"gsat.a.{w}"] = (2 * fl,)
    shapes["nlat.WQ"] = (n_links, 2 * config.m, config.qk_dim)
    shapes["nlat.WK"] = (n_nodes, k * fl, config.qk_dim)
    shapes["nlat.WV"] = (n_nodes, k * fl, config.link_dim)
    dims = (config.link_dim,) + config.mlp_hidden
    for r in range(len(config.mlp_hidden)):
        shapes[f"mlp.W.{r}"] = (dims[r], dims[r + 1])
        shapes[f"mlp.b.{r}"] = (dims[r + 1],)
    shapes["mlp.W_out"] = (dims[-1], 1)
    shapes["mlp.b_out"] = (1,)
    return shapes


def _fans(name: str, shape) -> tuple[int, int]:
    if name.startswith("gsat.a"):
        return shape[0], 1
    return shape[-2], shape[-1]


def init_params(seed: int, shapes: dict) -> dict:
    """Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name in sorted(shapes):
        shape = shapes[name]
        if ".b" in name:
            params[name] = np.zeros(shape)
            continue
        fan_in, fan_out = _fans(name, shape)
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-limit, limit, size=shape)
    return params


# -- layers (batched, differentiable) -----------------------------------------


def gsat(h, params: dict, masks: np.ndarray, slope: float = 0.2):
    """Multi-window graph self-attention.

    ``h``: (B, F, N). ``masks``: (K, N, N) boolean. Returns node states
    (B, N, K*F') and the per-window attention tensors (B, N, N).
    """
    h_nodes = ad.transpose(ad.as_diff(h), (2, 0, 1))  # (N, B, F)
    outs, atts = [], []
    for k in range(masks.shape[0]):
        w, a = params[f"gsat.W.{k}"], params[f"gsat.a.{k}"]
        fl = w.shape[-1]
        # W_i^T h_i with a separate matrix per node
        z = ad.transpose(ad.matmul(h_nodes, w), (1, 0, 2))  # (B, N, F')
        s_src = ad.matmul(z, ad.reshape(ad.take(a, slice(0, fl)), (fl, 1)))  # (B, N, 1)
        s_dst = ad.matmul(z, ad.reshape(ad.take(a, slice(fl, 2 * fl)), (fl, 1)))
        e = ad.leaky_relu(s_src + ad.transpose(s_dst, (0, 2, 1)), slope)
        alpha = ad.masked_softmax(e, masks[k][None, :, :], axis=-1)
        outs.append(ad.matmul(alpha, z))
        atts.append(alpha)
    return ad.concat(outs, axis=-1), atts


def nlat(h2, p_link: np.ndarray, params: dict):
    """Node-link attention. ``h2``: (B, N, K*F'); ``p_link``: (2m, L). Returns (B, L, U), (B, L, N)."""
    wq, wk, wv = params["nlat.WQ"], params["nlat.WK"], params["nlat.WV"]
    n_links, _, qk = wq.shape
    q = ad.matmul(ad.DiffArray(p_link.T[:, None, :]), wq)  # (L, 1, V)
    q = ad.reshape(q, (n_links, qk))
    h_nodes = ad.transpose(ad.as_diff(h2), (1, 0, 2))  # (N, B, K*F')
    keys = ad.transpose(ad.matmul(h_nodes, wk), (1, 2, 0))  # (B, V, N)
    e = ad.matmul(q, keys) * (1.0 / np.sqrt(qk))  # (B, L, N)
    alpha = ad.masked_softmax(e, None, axis=-1)
    vals = ad.transpose(ad.matmul(h_nodes, wv), (1, 0, 2))  # (B, N, U)
    return ad.matmul(alpha, vals), alpha


def mlp(r, params: dict, slope: float = 0.2):
    """Shared per-link MLP with LeakyReLU hidden layers and a Tanh output. Returns (B, L)."""
    x = r
    layer = 0
    while f"mlp.W.{layer}" in params:
        x = ad.leaky_relu(ad.matmul(x, params[f"mlp.W.{layer}"]) + params[f"mlp.b.{layer}"], slope)
        layer += 1
    out = ad.tanh(ad.matmul(x, params["mlp.W_out"]) + params["mlp.b_out"])
    b, l, _ = out.shape
    return ad.reshape(out, (b, l))


# -- single-sample helpers in the column layout --------------------------------


def _wrap(params: dict) -> dict:
    return {k: ad.DiffArray(v) for k, v in params.items()}


def gsat_forward(h: np.ndarray, params: dict, masks: np.ndarray, slope: float = 0.2):
    """``h``: F x N. Returns H'' as (K*F') x N and a list of K attention matrices N x N."""
    out, atts = gsat(np.asarray(h)[None], _wrap(params), np.asarray(masks, dtype=bool), slope)
    return out.value[0].T, [a.value[0] for a in atts]


def nlat_forward(h2: np.ndarray, p_link: np.ndarray, params: dict):
    """``h2``: (K*F') x N. Returns R as U x L and the L x N link attention."""
    r, alpha = nlat(ad.DiffArray(np.asarray(h2).T[None]), np.asarray(p_link), _wrap(params))
    return r.value[0].T, alpha.value[0]


def mlp_forward(r: np.ndarray, params: dict, slope: float = 0.2) -> np.ndarray:
    """``r``: U x L. Returns the L normalized flows."""
    return mlp(ad.DiffArray(np.asarray(r).T[None]), _wrap(params), slope).value[0]


# -- full model ----------------------------------------------------------------


class AttentionModel:
    """Network-bound model: static encodings and masks plus a parameter dict."""

    def __init__(self, network: Network, config: ModelConfig = ModelConfig(), params: dict | None = None,
                 encoding: NodeEncoding | None = None, seed: int = 0):
        self.network = network
        self.config = config.for_network(network)
        self.encoding = encoding if encoding is not None else node_lpe(network, self.config.m)
        if self.encoding.m != self.config.m:
            raise ValueError("node encoding length does not match config.m")
        self.masks = np.stack([t_hop_mask(network, t) for t in self.config.hops])
        self.p_link = link_pe(self.encoding, network)
        shapes = self.shapes
        if params is None:
            params = init_params(seed, shapes)
        for k, shape in shapes.items():
            if k not in params or params[k].shape != tuple(shape):
                raise ValueError(f"parameter {k!r} missing or has wrong shape (want {shape})")
        self.params = {k: np.array(params[k], dtype=np.float64) for k in shapes}

    @property
    def shapes(self) -> dict:
        return param_shapes(self.config, self.network.n_nodes, self.network.n_links)

    def forward_diff(self, h, params: dict):
        """Differentiable forward on a (B, F, N) batch with DiffArray params."""
        h2, node_att = gsat(h, params, self.masks, self.config.slope)
        r, link_att = nlat(h2, self.p_link, params)
        return mlp(r, params, self.config.slope), node_att, link_att

    def forward(self, h: np.ndarray):
        """Numpy forward. ``h``: (B, F, N) or (F, N). Returns (f_hat, AttentionRecord)."""
        h = np.asarray(h, dtype=float)
        single = h.ndim == 2
        if single:
            h = h[None]
        f_hat, node_att, link_att = self.forward_diff(h, _wrap(self.params))
        if single:
            return f_hat.value[0], AttentionRecord([a.value[0] for a in node_att], link_att.value[0])
        return f_hat.value, AttentionRecord([a.value for a in node_att], link_att.value)

    def predict(self, h: np.ndarray, batch_size: int = 256) -> np.ndarray:
        h = np.asarray(h, dtype=float)
        outs = [self.forward(h[i : i + batch_size])[0] for i in range(0, len(h), batch_size)]
        return np.concatenate(outs, axis=0)


def model_forward(model: AttentionModel, h):
    return model.forward(h)


# -- checkpoints ---------------------------------------------------------------


def write_npz(path, arrays: dict) -> None:
    """Like ``np.savez`` but byte-reproducible: fixed member order and timestamps."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def save_checkpoint(path, model: AttentionModel, *, demand_max, seed: int, extra: dict | None = None,
                    arrays: dict | None = None) -> None:
    """Write an ``.npz`` container with a JSON header and float64 row-major tensors."""
    cfg = dataclasses.asdict(model.config)
    header = {
        "version": CHECKPOINT_SCHEMA,
        "config": cfg,
        "seed": int(seed),
        "n_nodes": model.network.n_nodes,
        "n_links": model.network.n_links,
        "extra": extra or {},
    }
    payload = {f"param/{k}": np.ascontiguousarray(v, dtype=np.float64) for k, v in model.params.items()}
    payload["encoding/matrix"] = np.ascontiguousarray(model.encoding.matrix)
    payload["encoding/eigenvalues"] = np.ascontiguousarray(model.encoding.eigenvalues)
    payload["norm/demand_max"] = np.ascontiguousarray(demand_max, dtype=np.float64)
    payload["norm/f_nom"] = np.ascontiguousarray(model.network.f_nom)
    for k, v in (arrays or {}).items():
        payload[f"extra/{k}"] = np.ascontiguousarray(v, dtype=np.float64)
    payload["header"] = np.array(json.dumps(header, sort_keys=True))
    write_npz(path, payload)


@dataclass
class Checkpoint:
    model: AttentionModel
    demand_max: np.ndarray
    seed: int
    extra: dict = field(default_factory=dict)
    arrays: dict = field(default_factory=dict)


def load_checkpoint(path, network: Network) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("version") != CHECKPOINT_SCHEMA:
            raise ValueError(f"{path}: checkpoint version {header.get('version')!r}, expected {CHECKPOINT_SCHEMA!r}")
        if header["n_nodes"] != network.n_nodes or header["n_links"] != network.n_links:
            raise ValueError(f"{path}: checkpoint was trained on a different network")
        if not np.array_equal(z["norm/f_nom"], network.f_nom):
            raise ValueError(f"{path}: link capacities differ from the checkpoint's network")
        params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        arrays = {k[len("extra/"):]: z[k] for k in z.files if k.startswith("extra/")}
        enc = NodeEncoding(z["encoding/matrix"], z["encoding/eigenvalues"])
        demand_max = z["norm/demand_max"]
    config = ModelConfig(**header["config"])
    model = AttentionModel(network, config, params=params, encoding=enc)
    return Checkpoint(model, demand_max, header["seed"], header.get("extra", {}), arrays)
