"""Power-grid data model: nodes, directed-capacity links and generator fleets.

The network is a transport model. A link carries a signed flow; positive flow
is withdrawn at ``from_node`` and delivered at ``to_node``.
"""
from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

NETWORK_SCHEMA = "gridflow-net/1"

# generators smaller than this are ignored at load time (1 kW, in MW)
MIN_P_NOM = 1e-3


class Carrier(enum.Enum):
    SOLAR = "solar"
    WIND = "wind"
    OCGT = "ocgt"
    COAL = "coal"

    @property
    def merit_rank(self) -> int:
        return _MERIT_RANK[self]

    @property
    def renewable(self) -> bool:
        return self in (Carrier.SOLAR, Carrier.WIND)


# ascending actual marginal cost
_MERIT_RANK = {Carrier.SOLAR: 0, Carrier.WIND: 1, Carrier.OCGT: 2, Carrier.COAL: 3}

# currency/MWh, including the CO2 component
DEFAULT_MARGINAL_COST = {
    Carrier.SOLAR: 0.010,
    Carrier.WIND: 0.015,
    Carrier.OCGT: 121.89,
    Carrier.COAL: 125.00,
}
DEFAULT_LINK_COST = 3.642
DEFAULT_LINK_EFFICIENCY = 0.9


class NetworkError(ValueError):
    """Raised when a network fails validation or cannot be parsed."""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues) or "invalid network")


@dataclass(frozen=True)
class Node:
    id: str
    name: str = ""


@dataclass(frozen=True)
class Link:
    id: str
    from_node: str
    to_node: str
    f_nom: float
    efficiency: float = 1.0
    marginal_cost: float = 0.0


@dataclass(frozen=True)
class Generator:
    id: str
    node_id: str
    carrier: Carrier
    p_nom: float
    marginal_cost: float


@dataclass(frozen=True)
class Issue:
    code: str
    message: str

    def __str__(self):
        return f"{self.code}: {self.message}"


@dataclass(frozen=True)
class Network:
    nodes: tuple[Node, ...]
    links: tuple[Link, ...]
    generators: tuple[Generator, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "links", tuple(self.links))
        object.__setattr__(self, "generators", tuple(self.generators))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @cached_property
    def node_index(self) -> dict[str, int]:
        return {n.id: i for i, n in enumerate(self.nodes)}

    @cached_property
    def link_ends(self) -> tuple[np.ndarray, np.ndarray]:
        """Index arrays ``(from, to)`` of every link."""
        idx = self.node_index
        src = np.array([idx[l.from_node] for l in self.links], dtype=np.int64)
        dst = np.array([idx[l.to_node] for l in self.links], dtype=np.int64)
        return src, dst

    @cached_property
    def f_nom(self) -> np.ndarray:
        return np.array([l.f_nom for l in self.links], dtype=float)

    @cached_property
    def gen_node(self) -> np.ndarray:
        idx = self.node_index
        return np.array([idx[g.node_id] for g in self.generators], dtype=np.int64)

    @cached_property
    def gen_p_nom(self) -> np.ndarray:
        return np.array([g.p_nom for g in self.generators], dtype=float)

    @cached_property
    def gen_cost(self) -> np.ndarray:
        return np.array([g.marginal_cost for g in self.generators], dtype=float)

    def has_carrier(self, carrier: Carrier) -> np.ndarray:
        """Boolean per node: does the node host a generator of ``carrier``."""
        out = np.zeros(self.n_nodes, dtype=bool)
        for g in self.generators:
            if g.carrier is carrier:
                out[self.node_index[g.node_id]] = True
        return out

    def generators_at(self, node: int) -> list[int]:
        return [k for k, j in enumerate(self.gen_node) if j == node]

    def with_generators(self, generators: Iterable[Generator]) -> "Network":
        return Network(self.nodes, self.links, tuple(generators))


def adjacency(network: Network) -> np.ndarray:
    """Binary symmetric N×N adjacency; direction and multiplicity are ignored."""
    n = network.n_nodes
    a = np.zeros((n, n), dtype=np.int64)
    src, dst = network.link_ends
    a[src, dst] = 1
    a[dst, src] = 1
    np.fill_diagonal(a, 0)
    return a


def t_hop_mask(network: Network, hops: int) -> np.ndarray:
    """Boolean N×N matrix; row i marks nodes reachable from i within ``hops`` links."""
    if hops < 0:
        raise ValueError("hops must be >= 0")
    n = network.n_nodes
    step = (adjacency(network) + np.eye(n, dtype=np.int64)) > 0
    reach = np.eye(n, dtype=bool)
    for _ in range(hops):
        nxt = (reach.astype(np.int64) @ step.astype(np.int64)) > 0
        if np.array_equal(nxt, reach):
            break
        reach = nxt
    return reach


def t_hop_neighborhood(network: Network, i: int, hops: int) -> set[int]:
    """Node indices with a positive entry in row ``i`` of ``(A + I)^hops``."""
    return set(np.flatnonzero(t_hop_mask(network, hops)[i]).tolist())


def incidence(network: Network) -> np.ndarray:
    """N×L signed incidence: +1 at the sending end, -1 at the receiving end."""
    b = np.zeros((network.n_nodes, network.n_links))
    src, dst = network.link_ends
    cols = np.arange(network.n_links)
    b[src, cols] += 1.0
    b[dst, cols] -= 1.0
    return b


def _connected(n: int, edges: Iterable[tuple[int, int]]) -> bool:
    if n == 0:
        return False
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for i, j in edges:
        nbrs[i].append(j)
        nbrs[j].append(i)
    seen = {0}
    queue = deque([0])
    while queue:
        for j in nbrs[queue.popleft()]:
            if j not in seen:
                seen.add(j)
                queue.append(j)
    return len(seen) == n


def validate(network: Network) -> list[Issue]:
    """Return every problem found; an empty list means the network is usable."""
    issues: list[Issue] = []

    def dupes(kind, ids):
        seen = set()
        for x in ids:
            if x in seen:
                issues.append(Issue("duplicate id", f"{kind} id {x!r} appears more than once"))
            seen.add(x)

    dupes("node", [n.id for n in network.nodes])
    dupes("link", [l.id for l in network.links])
    dupes("generator", [g.id for g in network.generators])
    if not network.nodes:
        issues.append(Issue("empty network", "network has no nodes"))
        return issues

    known = {n.id for n in network.nodes}
    idx = {n.id: i for i, n in enumerate(network.nodes)}
    edges = []
    for l in network.links:
        ok = True
        for end in (l.from_node, l.to_node):
            if end not in known:
                issues.append(Issue("unknown node", f"link {l.id!r} references unknown node {end!r}"))
                ok = False
        if l.from_node == l.to_node:
            issues.append(Issue("self loop", f"link {l.id!r} starts and ends at {l.from_node!r}"))
        if not (np.isfinite(l.f_nom) and l.f_nom > 0):
            issues.append(Issue("nonpositive capacity", f"link {l.id!r} has f_nom={l.f_nom}"))
        if not (0 < l.efficiency <= 1):
            issues.append(Issue("bad efficiency", f"link {l.id!r} has efficiency={l.efficiency}"))
        if not (np.isfinite(l.marginal_cost) and l.marginal_cost >= 0):
            issues.append(Issue("bad cost", f"link {l.id!r} has marginal_cost={l.marginal_cost}"))
        if ok:
            edges.append((idx[l.from_node], idx[l.to_node]))
    for g in network.generators:
        if g.node_id not in known:
            issues.append(Issue("unknown node", f"generator {g.id!r} references unknown node {g.node_id!r}"))
        if not (np.isfinite(g.p_nom) and g.p_nom >= 0):
            issues.append(Issue("nonpositive capacity", f"generator {g.id!r} has p_nom={g.p_nom}"))
        if not (np.isfinite(g.marginal_cost) and g.marginal_cost >= 0):
            issues.append(Issue("bad cost", f"generator {g.id!r} has marginal_cost={g.marginal_cost}"))
    if not _connected(len(network.nodes), edges):
        issues.append(Issue("graph not connected", "network has more than one connected component"))
    return issues


def require_valid(network: Network) -> Network:
    issues = validate(network)
    if issues:
        raise NetworkError(issues)
    return network


# -- file I/O -----------------------------------------------------------------


def network_to_dict(network: Network) -> dict:
    return {
        "version": NETWORK_SCHEMA,
        "nodes": [{"id": n.id, "name": n.name} for n in network.nodes],
        "links": [
            {
                "id": l.id,
                "from_node": l.from_node,
                "to_node": l.to_node,
                "f_nom": l.f_nom,
                "efficiency": l.efficiency,
                "marginal_cost": l.marginal_cost,
            }
            for l in network.links
        ],
        "generators": [
            {
                "id": g.id,
                "node_id": g.node_id,
                "carrier": g.carrier.value,
                "p_nom": g.p_nom,
                "marginal_cost": g.marginal_cost,
            }
            for g in network.generators
        ],
    }


def network_from_dict(doc: dict) -> Network:
    if doc.get("version") != NETWORK_SCHEMA:
        raise NetworkError([Issue("schema", f"expected version {NETWORK_SCHEMA!r}, got {doc.get('version')!r}")])
    try:
        nodes = [Node(str(n["id"]), str(n.get("name", ""))) for n in doc["nodes"]]
        links = [
            Link(
                str(l["id"]),
                str(l["from_node"]),
                str(l["to_node"]),
                float(l["f_nom"]),
                float(l.get("efficiency", 1.0)),
                float(l.get("marginal_cost", 0.0)),
            )
            for l in doc["links"]
        ]
        gens = [
            Generator(
                str(g["id"]),
                str(g["node_id"]),
                Carrier(g["carrier"]),
                float(g["p_nom"]),
                float(g["marginal_cost"]),
            )
            for g in doc.get("generators", [])
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkError([Issue("malformed", f"cannot parse network document: {exc!r}")]) from exc
    gens = [g for g in gens if not g.p_nom < MIN_P_NOM]
    return Network(tuple(nodes), tuple(links), tuple(gens))


def save_network(network: Network, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(network), indent=1) + "\n")


def load_network(path) -> Network:
    """Read and validate a network file; raises :class:`NetworkError`."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise NetworkError([Issue("malformed", f"{path}: {exc}")]) from exc
    return require_valid(network_from_dict(doc))
