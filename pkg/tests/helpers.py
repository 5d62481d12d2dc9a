"""Small random grids and snapshots shared by the tests."""
from __future__ import annotations

import numpy as np

from gridflow.datagen import Snapshot
from gridflow.grid import Carrier, DEFAULT_MARGINAL_COST, Generator, Link, Network, Node

CARRIERS = list(Carrier)


def random_grid(rng, n_nodes, n_links, *, gens_per_node=(1, 2), link_cost=3.642, cost_jitter=True):
    """Connected grid: a random spanning tree plus extra links (parallel allowed)."""
    ids = [f"n{j}" for j in range(n_nodes)]
    perm = rng.permutation(n_nodes)
    edges = [(int(perm[i]), int(perm[rng.integers(0, i)])) for i in range(1, n_nodes)]
    while len(edges) < n_links:
        u, v = rng.choice(n_nodes, size=2, replace=False)
        edges.append((int(u), int(v)))
    links = [Link(f"l{l}", ids[u], ids[v], float(rng.choice([50.0, 100.0, 150.0])), 1.0, link_cost)
             for l, (u, v) in enumerate(edges)]
    gens = []
    for j in range(n_nodes):
        for _ in range(int(rng.integers(gens_per_node[0], gens_per_node[1] + 1))):
            car = CARRIERS[int(rng.integers(len(CARRIERS)))]
            cost = DEFAULT_MARGINAL_COST[car] * (1 + 0.1 * rng.random() if cost_jitter else 1.0)
            gens.append(Generator(f"g{len(gens)}", ids[j], car, float(rng.uniform(20, 200)), cost))
    return Network([Node(i) for i in ids], links, gens)


def random_snapshot(rng, network, step=0, load=0.5):
    n = network.n_nodes
    caps = np.bincount(network.gen_node, weights=network.gen_p_nom, minlength=n)
    return Snapshot(step, rng.uniform(0, load * 2, n) * caps.mean(), rng.random(n), rng.random(n))


def node_gen_table(network, snapshot):
    """Per node, a list of (available MW, marginal cost), computed by plain loops."""
    pos = {n.id: j for j, n in enumerate(network.nodes)}
    table = [[] for _ in network.nodes]
    for g in network.generators:
        j = pos[g.node_id]
        eta = {Carrier.WIND: snapshot.eta_wind[j], Carrier.SOLAR: snapshot.eta_solar[j]}.get(g.carrier, 1.0)
        table[j].append((g.p_nom * eta, g.marginal_cost))
    return table
