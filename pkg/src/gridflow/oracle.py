"""Convex-optimization core: the DCOPF linear program and the flow projection QP.

``solve_dcopf`` produces the training labels. ``project_feasible`` maps a
predicted flow vector onto the feasible polytope with a primal active-set
method, which is exact for the small dense problems this toolkit handles.
"""
from __future__ import annotations

import csv
import enum
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linprog

from .grid import Network, incidence

log = logging.getLogger(__name__)

FEAS_TOL = 1e-6  # MW
KKT_TOL = 1e-7  # relative
SOLUTIONS_SCHEMA = "gridflow-sol/1"
SOLUTION_COLUMNS = ("step", "kind", "id", "MW")


class Status(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"


class SolverError(RuntimeError):
    """The solver returned something it should not have (unbounded, uncertified)."""


class InfeasibleError(ValueError):
    pass


@dataclass
class DispatchSolution:
    flows: np.ndarray  # per link, signed MW
    gen_output: np.ndarray  # per generator, MW
    node_total: np.ndarray  # per node, MW
    objective: float
    status: Status = Status.OPTIMAL


@dataclass(frozen=True)
class FeasibilityReport:
    max_flow_violation: float
    max_gen_violation: float
    max_balance_residual: float
    tol: float = FEAS_TOL

    @property
    def feasible(self) -> bool:
        return max(self.max_flow_violation, self.max_gen_violation, self.max_balance_residual) <= self.tol


def availability(network: Network, snapshot) -> np.ndarray:
    """Per-generator capacity coefficient: eta for renewables, 1 otherwise."""
    c = np.ones(len(network.generators))
    for k, g in enumerate(network.generators):
        j = network.gen_node[k]
        if g.carrier.value == "wind":
            c[k] = snapshot.eta_wind[j]
        elif g.carrier.value == "solar":
            c[k] = snapshot.eta_solar[j]
    return c


def gen_caps(network: Network, snapshot) -> np.ndarray:
    return availability(network, snapshot) * network.gen_p_nom


def node_caps(network: Network, snapshot) -> np.ndarray:
    """Available generation per node, sum of c * p_nom."""
    return np.bincount(network.gen_node, weights=gen_caps(network, snapshot), minlength=network.n_nodes)


def net_export(network: Network, flows, strict_efficiency: bool = False) -> np.ndarray:
    """Power leaving each node through its links (MW), negative for net import."""
    flows = np.asarray(flows, dtype=float)
    if not strict_efficiency:
        return incidence(network) @ flows
    src, dst = network.link_ends
    eff = np.array([l.efficiency for l in network.links])
    pos = np.maximum(flows, 0.0)
    neg = np.maximum(-flows, 0.0)
    out = np.zeros(network.n_nodes)
    np.add.at(out, src, pos - eff * neg)
    np.add.at(out, dst, neg - eff * pos)
    return out


def _fill_cheapest(caps: np.ndarray, order: list[int], total: float) -> np.ndarray:
    out = np.zeros(len(caps))
    left = total
    for k in order:
        take = min(max(left, 0.0), caps[k])
        out[k] = take
        left -= take
    return out


def solve_dcopf(
    network: Network,
    snapshot,
    *,
    link_cost: bool = True,
    strict_efficiency: bool = False,
) -> DispatchSolution:
    """Least-cost dispatch for one snapshot.

    Variables are generator outputs and link flows. With link costs or strict
    efficiency each flow is split into two nonnegative directed parts so the
    objective stays linear. The HiGHS dual simplex solves the LP; the result is
    then checked against the KKT conditions before it is accepted.
    """
    n, nl, ng = network.n_nodes, network.n_links, len(network.generators)
    demand = np.asarray(snapshot.demand, dtype=float)
    caps = gen_caps(network, snapshot)
    src, dst = network.link_ends
    f_nom = network.f_nom
    lcost = np.array([l.marginal_cost for l in network.links]) if link_cost else np.zeros(nl)
    eff = np.array([l.efficiency for l in network.links]) if strict_efficiency else np.ones(nl)
    split = link_cost and bool(np.any(lcost > 0)) or strict_efficiency

    a_gen = np.zeros((n, ng))
    a_gen[network.gen_node, np.arange(ng)] = 1.0
    cols = np.arange(nl)
    if split:
        a_pos = np.zeros((n, nl))
        a_neg = np.zeros((n, nl))
        a_pos[src, cols] -= 1.0
        a_pos[dst, cols] += eff
        a_neg[dst, cols] -= 1.0
        a_neg[src, cols] += eff
        a_eq = np.hstack([a_gen, a_pos, a_neg])
        cost = np.concatenate([network.gen_cost, lcost, lcost])
        lo = np.zeros(ng + 2 * nl)
        hi = np.concatenate([caps, f_nom, f_nom])
    else:
        a_eq = np.hstack([a_gen, -incidence(network)])
        cost = np.concatenate([network.gen_cost, np.zeros(nl)])
        lo = np.concatenate([np.zeros(ng), -f_nom])
        hi = np.concatenate([caps, f_nom])

    res = linprog(cost, A_eq=a_eq, b_eq=demand, bounds=np.column_stack([lo, hi]), method="highs-ds")
    if res.status == 2:
        return DispatchSolution(np.zeros(nl), np.zeros(ng), np.zeros(n), float("nan"), Status.INFEASIBLE)
    if res.status != 0:
        raise SolverError(f"LP solver failed with status {res.status}: {res.message}")

    x = res.x
    _certify_lp(cost, a_eq, demand, lo, hi, x, res)
    flows = x[ng : ng + nl] - x[ng + nl :] if split else x[ng:].copy()
    flows = np.clip(flows, -f_nom, f_nom)

    # canonical generator split: at fixed node totals, cheapest-first with id ties
    export = net_export(network, flows, strict_efficiency)
    totals = demand + export
    gen = np.zeros(ng)
    for j in range(n):
        ks = network.generators_at(j)
        if not ks:
            continue
        order = sorted(ks, key=lambda k: (network.gen_cost[k], network.generators[k].id))
        gen[ks] = _fill_cheapest(caps, order, totals[j])[ks]
    objective = float(network.gen_cost @ gen + lcost @ np.abs(flows))
    return DispatchSolution(flows, gen, totals, objective, Status.OPTIMAL)


def _certify_lp(c, a_eq, b, lo, hi, x, res) -> None:
    """Raise :class:`SolverError` unless (x, duals) satisfy KKT to ``KKT_TOL``."""
    y = res.eqlin.marginals
    z_lo = res.lower.marginals
    z_hi = res.upper.marginals
    scale_c = max(1.0, np.abs(c).max(initial=0.0))
    scale_b = max(1.0, np.abs(b).max(initial=0.0), np.abs(hi).max(initial=0.0))
    primal = max(
        np.abs(a_eq @ x - b).max(initial=0.0),
        np.maximum(lo - x, 0).max(initial=0.0),
        np.maximum(x - hi, 0).max(initial=0.0),
    ) / scale_b
    stationarity = np.abs(c - a_eq.T @ y - z_lo - z_hi).max(initial=0.0) / scale_c
    sign = max(np.maximum(-z_lo, 0).max(initial=0.0), np.maximum(z_hi, 0).max(initial=0.0)) / scale_c
    comp = max(
        np.abs(z_lo * (x - lo)).max(initial=0.0),
        np.abs(z_hi * (hi - x)).max(initial=0.0),
    ) / (scale_b * scale_c)
    worst = max(primal, stationarity, sign, comp)
    if worst > KKT_TOL:
        raise SolverError(
            f"KKT certificate failed: primal={primal:.2e} dual={stationarity:.2e} sign={sign:.2e} comp={comp:.2e}"
        )


def check_feasible(network: Network, snapshot, flows, gen_output, *, strict_efficiency: bool = False,
                   tol: float = FEAS_TOL) -> FeasibilityReport:
    flows = np.asarray(flows, dtype=float)
    gen = np.asarray(gen_output, dtype=float)
    if flows.shape != (network.n_links,) or gen.shape != (len(network.generators),):
        raise ValueError("flow/generator vector dimensions do not match the network")
    flow_v = np.maximum(np.abs(flows) - network.f_nom, 0.0).max(initial=0.0)
    caps = gen_caps(network, snapshot)
    gen_v = max(np.maximum(gen - caps, 0.0).max(initial=0.0), np.maximum(-gen, 0.0).max(initial=0.0))
    supplied = np.bincount(network.gen_node, weights=gen, minlength=network.n_nodes)
    needed = np.asarray(snapshot.demand, dtype=float) + net_export(network, flows, strict_efficiency)
    bal = np.abs(supplied - needed).max(initial=0.0)
    return FeasibilityReport(float(flow_v), float(gen_v), float(bal), tol)


# -- projection ---------------------------------------------------------------


def flow_polytope(network: Network, snapshot) -> tuple[np.ndarray, np.ndarray]:
    """Inequalities ``G F <= h`` for flow limits and node totals in [0, available]."""
    b = incidence(network)
    demand = np.asarray(snapshot.demand, dtype=float)
    caps = node_caps(network, snapshot)
    eye = np.eye(network.n_links)
    g = np.vstack([eye, -eye, b, -b])
    h = np.concatenate([network.f_nom, network.f_nom, caps - demand, demand])
    return g, h


def project_feasible(network: Network, snapshot, f_hat) -> np.ndarray:
    """Euclidean projection of ``f_hat * f_nom`` (MW) onto the feasible flow set."""
    f_hat = np.asarray(f_hat, dtype=float)
    if f_hat.shape != (network.n_links,):
        raise ValueError(f"expected {network.n_links} normalized flows, got shape {f_hat.shape}")
    g, h = flow_polytope(network, snapshot)
    return project_polytope(f_hat * network.f_nom, g, h)


def project_polytope(y, g, h, *, tol: float = 1e-9, max_iter: int | None = None) -> np.ndarray:
    """argmin ||x - y||^2 subject to ``g @ x <= h``.

    Primal active-set method started from a feasible vertex. Ties in the
    choice of dropped constraint go to the lowest index, which keeps results
    reproducible.
    """
    y = np.asarray(y, dtype=float)
    scale = max(1.0, np.abs(h).max(initial=0.0), np.abs(y).max(initial=0.0))
    ftol = tol * scale
    if np.all(g @ y - h <= ftol):
        return y.copy()

    x = _feasible_point(g, h)
    m, n = g.shape
    work: list[int] = []
    max_iter = max_iter or 50 * (m + n)
    for _ in range(max_iter):
        gw = g[work]
        if work:
            # multipliers of the equality-constrained subproblem
            lam, *_ = np.linalg.lstsq(gw.T, y - x, rcond=None)
            p = (y - x) - gw.T @ lam
        else:
            lam = np.zeros(0)
            p = y - x
        if np.linalg.norm(p) <= ftol:
            x = x + p
            if work and lam.min() < -tol:
                work.pop(int(np.argmin(lam)))
                continue
            _certify_projection(y, x, g, h, work, lam, ftol)
            return x
        gp = g @ p
        slack = h - g @ x
        step, block = 1.0, -1
        inactive = np.setdiff1d(np.arange(m), work)
        for i in inactive:
            if gp[i] > ftol * 1e-3:
                t = max(slack[i], 0.0) / gp[i]
                if t < step:
                    step, block = t, int(i)
        x = x + step * p
        if block >= 0:
            work.append(block)
    raise SolverError("projection active-set iteration limit reached")


def _feasible_point(g, h) -> np.ndarray:
    res = linprog(np.zeros(g.shape[1]), A_ub=g, b_ub=h, bounds=(None, None), method="highs-ds")
    if res.status == 2:
        raise InfeasibleError("feasible flow polytope is empty")
    if res.status != 0:
        raise SolverError(f"phase-1 LP failed: {res.message}")
    return res.x


def _certify_projection(y, x, g, h, work, lam, ftol) -> None:
    scale = max(1.0, np.abs(y).max(initial=0.0))
    full = np.zeros(g.shape[0])
    if work:
        full[work] = lam
    stationarity = np.abs(x - y + g.T @ full).max(initial=0.0) / scale
    primal = np.maximum(g @ x - h, 0).max(initial=0.0) / scale
    dual = np.maximum(-full, 0).max(initial=0.0) / scale
    comp = np.abs(full * (h - g @ x)).max(initial=0.0) / scale**2
    worst = max(stationarity, primal, dual, comp)
    if worst > KKT_TOL:
        raise SolverError(f"projection KKT residual {worst:.2e} exceeds {KKT_TOL}")


# -- solutions files -----------------------------------------------------------


class SolutionsFileError(ValueError):
    pass


@dataclass
class SolutionSet:
    """Flows and generator outputs for a sequence of snapshots."""

    steps: np.ndarray
    flows: np.ndarray  # (S, L) MW
    gen_output: np.ndarray  # (S, G) MW
    objective: np.ndarray  # (S,)
    source: str = "oracle"


def manifest_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_solutions(network: Network, sol: SolutionSet, path) -> None:
    """Long-format CSV, one row per (step, link) then per (step, generator), plus a JSON manifest."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SOLUTION_COLUMNS)
        for s, step in enumerate(sol.steps):
            for l, link in enumerate(network.links):
                w.writerow([int(step), "link", link.id, repr(float(sol.flows[s, l]))])
            for k, gen in enumerate(network.generators):
                w.writerow([int(step), "generator", gen.id, repr(float(sol.gen_output[s, k]))])
    doc = {
        "version": SOLUTIONS_SCHEMA,
        "source": sol.source,
        "table": path.name,
        "steps": [int(t) for t in sol.steps],
        "objective": [float(v) for v in sol.objective],
    }
    manifest_path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_solutions(network: Network, path) -> SolutionSet:
    path = Path(path)
    mpath = manifest_path(path)
    if not path.exists() or not mpath.exists():
        raise FileNotFoundError(f"solutions file {path} or its manifest {mpath.name} not found")
    doc = json.loads(mpath.read_text())
    if doc.get("version") != SOLUTIONS_SCHEMA:
        raise SolutionsFileError(f"{mpath}: version {doc.get('version')!r}, expected {SOLUTIONS_SCHEMA!r}")
    steps = np.array(doc["steps"], dtype=int)
    pos = {int(t): i for i, t in enumerate(steps)}
    lidx = {l.id: i for i, l in enumerate(network.links)}
    gidx = {g.id: i for i, g in enumerate(network.generators)}
    flows = np.full((len(steps), network.n_links), np.nan)
    gen = np.full((len(steps), len(network.generators)), np.nan)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if tuple(next(reader, ())) != SOLUTION_COLUMNS:
            raise SolutionsFileError(f"{path}: line 1: expected header {','.join(SOLUTION_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(SOLUTION_COLUMNS):
                raise SolutionsFileError(f"{path}: line {lineno}: malformed row")
            step, kind, eid, value = row
            try:
                s, v = pos[int(step)], float(value)
                if kind == "link":
                    flows[s, lidx[eid]] = v
                elif kind == "generator":
                    gen[s, gidx[eid]] = v
                else:
                    raise SolutionsFileError(f"{path}: line {lineno}: unknown kind {kind!r}")
            except (KeyError, ValueError) as exc:
                if isinstance(exc, SolutionsFileError):
                    raise
                raise SolutionsFileError(f"{path}: line {lineno}: bad entry {row}") from None
    if np.isnan(flows).any() or np.isnan(gen).any():
        raise SolutionsFileError(f"{path}: some (step, element) entries are missing")
    return SolutionSet(steps, flows, gen, np.array(doc["objective"], dtype=float), doc.get("source", "oracle"))
