"""Laplacian positional encodings and the model's input feature matrix."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Carrier, Network, adjacency

N_NODE_FEATURES = 3  # normalized demand, eta_wind, eta_solar
EIG_TOL = 1e-8


@dataclass(frozen=True)
class NodeEncoding:
    matrix: np.ndarray  # N x m
    eigenvalues: np.ndarray  # m

    @property
    def m(self) -> int:
        return self.matrix.shape[1]


def normalized_laplacian(network: Network) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2`` of the binary adjacency."""
    a = adjacency(network).astype(float)
    deg = a.sum(axis=1)
    if np.any(deg == 0):
        raise ValueError("normalized Laplacian undefined: network has an isolated node")
    d = 1.0 / np.sqrt(deg)
    lap = np.eye(len(a)) - d[:, None] * a * d[None, :]
    return 0.5 * (lap + lap.T)


def _sign_fix(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-10)
    if nz.size and v[nz[0]] < 0:
        return -v
    return v


def _canonical_basis(q: np.ndarray) -> np.ndarray:
    """Basis-independent orthonormal basis of span(q).

    Projects the standard basis vectors onto the subspace and runs Gram-Schmidt
    over them in index order, so any orthonormal ``q`` of the same eigenspace
    gives the same result.
    """
    proj = q @ q.T
    k = q.shape[1]
    basis: list[np.ndarray] = []
    for i in range(proj.shape[0]):
        v = proj[:, i].copy()
        for b in basis:
            v -= (b @ v) * b
        # second pass for numerical orthogonality
        for b in basis:
            v -= (b @ v) * b
        nrm = np.linalg.norm(v)
        if nrm > 1e-6:
            basis.append(v / nrm)
        if len(basis) == k:
            break
    return np.column_stack([_sign_fix(b) for b in basis])


def default_m(n_nodes: int) -> int:
    """Encoding length: 8 for grids up to 50 nodes, 16 for larger ones."""
    return 8 if n_nodes <= 50 else 16


def node_lpe(network: Network, m: int) -> NodeEncoding:
    """Eigenvectors for the ``m`` smallest non-trivial Laplacian eigenvalues.

    Columns are sign-fixed so the first significant entry is positive. Within
    a repeated eigenvalue the basis is made canonical and its columns are
    sorted lexicographically.
    """
    n = network.n_nodes
    if m < 1 or m >= n:
        raise ValueError(f"encoding length m={m} must satisfy 1 <= m <= N-1 = {n - 1}")
    vals, vecs = np.linalg.eigh(normalized_laplacian(network))
    keep = vals > EIG_TOL
    vals, vecs = vals[keep], vecs[:, keep]
    if len(vals) < m:
        raise ValueError(f"only {len(vals)} non-trivial eigenvectors available, m={m} requested")

    cols, lams = [], []
    start = 0
    while start < len(vals) and len(cols) < m:
        stop = start + 1
        while stop < len(vals) and vals[stop] - vals[start] <= 1e-8:
            stop += 1
        group = _canonical_basis(vecs[:, start:stop])
        order = sorted(range(group.shape[1]), key=lambda c: tuple(group[:, c]))
        lam = float(np.mean(vals[start:stop]))
        for c in order:
            cols.append(group[:, c])
            lams.append(lam)
        start = stop
    mat = np.column_stack(cols[:m])
    return NodeEncoding(mat, np.array(lams[:m]))


def link_pe(encoding: NodeEncoding, network: Network) -> np.ndarray:
    """2m x L matrix: sending-end encoding stacked over receiving-end encoding."""
    src, dst = network.link_ends
    p = encoding.matrix
    return np.vstack([p[src].T, p[dst].T])


def eta_features(network: Network, eta_wind, eta_solar) -> tuple[np.ndarray, np.ndarray]:
    """Weather rows with zeros at nodes that host no generator of that carrier."""
    wind = np.where(network.has_carrier(Carrier.WIND), eta_wind, 0.0)
    solar = np.where(network.has_carrier(Carrier.SOLAR), eta_solar, 0.0)
    return wind, solar


def build_features(snapshot, demand_max, encoding: NodeEncoding, network: Network) -> np.ndarray:
    """F x N input matrix ``[demand/demand_max; eta_wind; eta_solar; P_node^T]``."""
    if demand_max is None:
        raise ValueError("demand_max is required to normalize demand")
    demand_max = np.asarray(getattr(demand_max, "demand_max", demand_max), dtype=float)
    wind, solar = eta_features(network, snapshot.eta_wind, snapshot.eta_solar)
    s = np.vstack([np.asarray(snapshot.demand) / demand_max, wind, solar])
    return np.vstack([s, encoding.matrix.T])


def build_feature_batch(snapshots, demand_max, encoding: NodeEncoding, network: Network) -> np.ndarray:
    """Stack of feature matrices, shape (B, F, N)."""
    return np.stack([build_features(s, demand_max, encoding, network) for s in snapshots])
