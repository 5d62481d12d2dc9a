"""From projected flows to node generation totals and per-generator set points."""
from __future__ import annotations

import numpy as np

from .grid import Network
from .oracle import availability, net_export

DELTA = 1e-3  # MW; remaining power below this counts as served


class CapacityExceededError(ValueError):
    pass


def node_totals(network: Network, snapshot, flows_mw, *, strict_efficiency: bool = False) -> np.ndarray:
    """Generation each node must supply: its demand plus its net export."""
    return np.asarray(snapshot.demand, dtype=float) + net_export(network, flows_mw, strict_efficiency)


def merit_rank(network: Network, *, strict: bool = False) -> list:
    """Generator indices ordered for dispatch.

    Default ranks by carrier (solar, wind, OCGT, coal); ``strict`` ranks by
    each generator's own marginal cost. Generator id breaks ties.
    """
    gens = network.generators
    if strict:
        key = lambda k: (gens[k].marginal_cost, gens[k].id)
    else:
        key = lambda k: (gens[k].carrier.merit_rank, gens[k].id)
    return sorted(range(len(gens)), key=key)


def merit_order_dispatch(network: Network, snapshot, totals, *, strict: bool = False,
                         delta: float = DELTA) -> np.ndarray:
    """Fill each node's total cheapest-first up to every generator's available output."""
    totals = np.asarray(totals, dtype=float)
    avail = availability(network, snapshot) * network.gen_p_nom
    out = np.zeros(len(network.generators))
    order = merit_rank(network, strict=strict)
    by_node: dict[int, list[int]] = {}
    for k in order:
        by_node.setdefault(int(network.gen_node[k]), []).append(k)
    for j in range(network.n_nodes):
        left = totals[j]
        for k in by_node.get(j, []):
            if left <= delta:
                break
            if left > avail[k]:
                out[k] = avail[k]
                left -= avail[k]
            else:
                out[k] = left
                left = 0.0
        if left > delta:
            node = network.nodes[j].id
            raise CapacityExceededError(f"node {node}: {left:.6g} MW left after all generators are at capacity")
    return out
