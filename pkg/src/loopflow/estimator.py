"""Least-squares state estimation on loop corrective flows and demand variations.

State ``x = [dd, dq]``: ``dd`` (one entry per node label) shifts predicted
demands, ``dq`` (one per loop) circulates flow round the loops.  Column flows
are

    Q = Q0 - [Tinv * mask; 0] dd + M_pl dq

so continuity holds for the adjusted demands ``d - mask * dd`` at every
iterate.  The residual stacks loop head-loss sums, a ``-dd`` block pulling the
demand shifts toward zero, and one row per head or flow meter.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.linalg import lstsq

from .network import HEAD_KNOWN, INFLOW_KNOWN, Network, NetworkError
from .simulator import (
    SimulationOptions,
    _enhanced_derivatives,
    base_flows,
    boundary_data,
    column_derivatives,
    column_head_losses,
    recover_heads,
    seed_loops,
    solve_cotree,
)
from .topology import LoopSystem, SpanningTree, trace_loops


class ConfigurationError(ValueError):
    """Measurement configuration inconsistent with the network."""


class UnobservableError(RuntimeError):
    """Normal equations are rank deficient."""


# ---------------------------------------------------------------------------
# measurements


@dataclass(frozen=True)
class HeadMeasurement:
    node: int
    value: float
    accuracy: float = 0.1


@dataclass(frozen=True)
class FlowMeasurement:
    pipe: int
    value: float
    accuracy: float = 0.001


@dataclass(frozen=True)
class FixedHeadMode:
    """Boundary treatment of one fixed-head node.

    ``kind="head"``: value is the head (m), accuracy in metres.
    ``kind="inflow"``: value is the inflow (m3/s), accuracy a fraction.
    """

    kind: str
    value: float
    accuracy: float = 0.0


@dataclass(frozen=True)
class MeasurementSet:
    demands: Mapping[int, float]
    variability: float = 0.2
    head_meas: tuple[HeadMeasurement, ...] = ()
    flow_meas: tuple[FlowMeasurement, ...] = ()
    fixed: Mapping[int, FixedHeadMode] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "head_meas", tuple(self.head_meas))
        object.__setattr__(self, "flow_meas", tuple(self.flow_meas))
        if self.variability < 0:
            raise ConfigurationError("variability must be >= 0")
        for m in self.head_meas + self.flow_meas:
            if m.accuracy < 0:
                raise ConfigurationError("accuracies must be >= 0")
        for nid, mode in self.fixed.items():
            if mode.kind not in (HEAD_KNOWN, INFLOW_KNOWN):
                raise ConfigurationError(f"fixed-head node {nid}: unknown mode {mode.kind!r}")
            if mode.accuracy < 0:
                raise ConfigurationError("accuracies must be >= 0")

    @classmethod
    def from_network(
        cls,
        net: Network,
        head_meas: Iterable[HeadMeasurement] = (),
        flow_meas: Iterable[FlowMeasurement] = (),
        variability: float = 0.2,
        fixed_head_accuracy: float = 0.01,
        inflow_accuracy: float = 0.01,
    ) -> "MeasurementSet":
        """Demands, fixed heads and fixed inflows read off ``net``."""
        fixed = {}
        for nd in net.nodes:
            if not nd.is_fixed:
                continue
            if nd.boundary == INFLOW_KNOWN:
                fixed[nd.id] = FixedHeadMode(INFLOW_KNOWN, nd.inflow, inflow_accuracy)
            else:
                fixed[nd.id] = FixedHeadMode(HEAD_KNOWN, nd.head, fixed_head_accuracy)
        return cls({nd.id: nd.demand for nd in net.nodes}, variability, tuple(head_meas), tuple(flow_meas), fixed)

    def apply(self, net: Network) -> Network:
        """Network carrying these demands and boundary values."""
        heads, inflows, modes = {}, {}, {}
        for nid, mode in self.fixed.items():
            modes[nid] = mode.kind
            if mode.kind == HEAD_KNOWN:
                heads[nid] = mode.value
            else:
                inflows[nid] = mode.value
        dem = {nid: v for nid, v in self.demands.items()}
        return net.with_values(demands=dem, heads=heads, inflows=inflows).with_boundary(modes)

    def with_head_meas(self, extra: Iterable[HeadMeasurement]) -> "MeasurementSet":
        return replace(self, head_meas=self.head_meas + tuple(extra))


# ---------------------------------------------------------------------------
# demand-variation mask


@dataclass(frozen=True)
class RegionMask:
    """Active flag per node label: inactive labels get a zeroed A* column."""

    order: tuple[int, ...]
    active: np.ndarray

    @classmethod
    def full(cls, tree: SpanningTree) -> "RegionMask":
        return cls(tree.order, np.ones(tree.n, dtype=bool))

    @property
    def active_nodes(self) -> set[int]:
        return {nid for nid, a in zip(self.order, self.active) if a}


def constrain_region(mask: RegionMask, active_nodes: Iterable[int]) -> RegionMask:
    """Keep only ``active_nodes`` active (intersected with the current mask)."""
    keep = set(active_nodes)
    act = np.array([a and (nid in keep) for nid, a in zip(mask.order, mask.active)], dtype=bool)
    return RegionMask(mask.order, act)


def region_nodes(tree: SpanningTree, meas: MeasurementSet, net: Network, radius: int = 3) -> set[int]:
    """Nodes within ``radius`` tree edges of any head meter or flow-meter end."""
    sources = [m.node for m in meas.head_meas]
    for m in meas.flow_meas:
        pp = net.pipe(m.pipe)
        sources += [pp.start, pp.end]
    if not sources:
        return set()
    dist = tree.tree_distances(sources)
    return {nid for nid, dd in dist.items() if dd <= radius}


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class EstimatorOptions:
    tol: float = 1e-6
    max_iter: int = 50
    pure_gn: bool = False
    enhancement: bool = True
    weighted: bool = False
    loop_accuracy: float = 1e-7
    seed_flow: float = 1e-4
    fallback: bool = True
    sim: SimulationOptions = SimulationOptions(tol=1e-8)


def _check_loops(net_m: Network, loops: LoopSystem) -> None:
    expect = sorted(
        nd.id for nd in net_m.nodes if nd.is_fixed and nd.boundary == HEAD_KNOWN and nd.id != loops.tree.root
    )
    if expect != sorted(loops.pseudo_nodes):
        raise ConfigurationError(
            f"pseudo-loops {sorted(loops.pseudo_nodes)} do not match head-known fixed-head nodes {expect}"
        )


class EstimatorModel:
    """Residual and Jacobian of the stacked least-squares problem.

    Rows: loops (l), demand variations (n), head meters, flow meters.
    Columns: ``dd`` (n) then ``dq`` (l).
    """

    def __init__(
        self,
        net: Network,
        tree: SpanningTree,
        loops: LoopSystem,
        meas: MeasurementSet,
        mask: RegionMask | None = None,
        weighted: bool = False,
        loop_accuracy: float = 1e-7,
    ):
        if loops.tree is not tree and (loops.tree.order != tree.order or loops.tree.root != tree.root):
            raise ConfigurationError("loop system was built on a different tree")
        self.net = meas.apply(net)
        _check_loops(self.net, loops)
        self.tree, self.loops, self.meas = tree, loops, meas
        self.mask = RegionMask.full(tree) if mask is None else mask
        if self.mask.order != tree.order:
            raise ConfigurationError("mask does not match the tree labels")
        n, l = tree.n, loops.l
        self.n, self.l = n, l
        self.expo = self.net.exponent
        self.bd = boundary_data(self.net, loops)
        self.Q0 = base_flows(loops, self.bd)
        self.M = loops.M_lp
        self.Astar = tree.T_inv * self.mask.active[None, :]
        self.T1 = tree.T_inv.T  # (T^T)^-1
        lab = tree.label
        self.head_rows = []
        for m in meas.head_meas:
            if m.node not in lab:
                raise ConfigurationError(f"head measurement at unknown node {m.node}")
            self.head_rows.append(lab[m.node])
        self.flow_cols, self.flow_sign = [], []
        col = tree.pipe_column
        for m in meas.flow_meas:
            pp = self.net.pipe(m.pipe) if m.pipe in self.net.pipe_ids else None
            if pp is None:
                raise ConfigurationError(f"flow measurement on unknown pipe {m.pipe}")
            if pp.fixed_flow is not None:
                raise ConfigurationError(f"flow measurement on constant-flow link {m.pipe}")
            c = col[m.pipe]
            self.flow_cols.append(c)
            self.flow_sign.append(float(tree.col_orient[c]))
        self.flow_cols = np.array(self.flow_cols, dtype=int)
        self.flow_sign = np.array(self.flow_sign)
        self.zH = np.array([m.value for m in meas.head_meas])
        self.zF = np.array([m.value for m in meas.flow_meas])
        self.weights = self._weights(weighted, loop_accuracy)

    # -- helpers ----------------------------------------------------------
    def _weights(self, weighted: bool, loop_accuracy: float) -> np.ndarray:
        rows = self.l + self.n + len(self.zH) + len(self.zF)
        if not weighted:
            return np.ones(rows)
        floor = 1e-6
        sig_d = np.full(self.n, floor)
        lab = self.tree.label
        for nd in self.net.nodes:
            j = lab[nd.id]
            if j == self.n:
                continue
            if nd.is_fixed and nd.boundary == INFLOW_KNOWN:
                acc = self.meas.fixed[nd.id].accuracy if nd.id in self.meas.fixed else 0.0
                sig_d[j] = max(acc * abs(nd.inflow), floor)
            else:
                sig_d[j] = max(self.meas.variability * abs(nd.demand), floor)
        sig = np.concatenate(
            [
                np.full(self.l, max(loop_accuracy, 1e-9)),
                sig_d,
                [max(m.accuracy, 1e-6) for m in self.meas.head_meas],
                [max(m.accuracy, 1e-9) for m in self.meas.flow_meas],
            ]
        )
        return 1.0 / sig

    def split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return x[: self.n], x[self.n :]

    def flows(self, x: np.ndarray) -> np.ndarray:
        dd, dq = self.split(x)
        Q = self.Q0 + self.M.T @ dq
        Q[: self.n] -= self.Astar @ dd
        return Q

    def heads(self, Q: np.ndarray) -> np.ndarray:
        h = column_head_losses(self.loops, Q, self.expo, self.bd.pseudo_head)
        return recover_heads(self.tree, h[: self.n], self.bd.H0)

    def _head_at(self, H_lab: np.ndarray) -> np.ndarray:
        Hx = np.append(H_lab, self.bd.H0)
        return Hx[self.head_rows] if self.head_rows else np.zeros(0)

    def residual(self, x: np.ndarray) -> np.ndarray:
        dd, _ = self.split(x)
        Q = self.flows(x)
        h = column_head_losses(self.loops, Q, self.expo, self.bd.pseudo_head)
        gL = self.M @ h
        parts = [gL, -dd]
        if self.head_rows:
            H = self.bd.H0 - self.T1 @ h[: self.n]
            parts.append(self._head_at(H) - self.zH)
        if len(self.flow_cols):
            parts.append(self.flow_sign * Q[self.flow_cols] - self.zF)
        return np.concatenate(parts)

    def jacobian(self, x: np.ndarray, enhanced: bool = False) -> np.ndarray:
        n, l = self.n, self.l
        Q = self.flows(x)
        a = column_derivatives(self.loops, Q, self.expo)
        aL = a
        if enhanced:
            h = column_head_losses(self.loops, Q, self.expo, self.bd.pseudo_head)
            aL = _enhanced_derivatives(self.loops, Q, a, h, self.expo, self.bd.H0)
        M = self.M
        Mn = M[:, :n]
        rows = []
        # loop rows
        JL = np.hstack([-(Mn * a[:n]) @ self.Astar, (M * aL) @ M.T])
        rows.append(JL)
        rows.append(np.hstack([-np.eye(n), np.zeros((n, l))]))
        if self.head_rows:
            Hx_rows = []
            dQT_dd = -self.Astar
            dQT_dq = Mn.T
            G = -(self.T1 * a[:n])  # dH/dQ_T
            G = np.vstack([G, np.zeros((1, n))])  # root head is constant
            Gm = G[self.head_rows]
            Hx_rows = np.hstack([Gm @ dQT_dd, Gm @ dQT_dq])
            rows.append(Hx_rows)
        if len(self.flow_cols):
            P = self.loops.P
            dQ_dd = np.zeros((P, n))
            dQ_dd[:n] = -self.Astar
            dQ = np.hstack([dQ_dd, M.T])
            rows.append(self.flow_sign[:, None] * dQ[self.flow_cols])
        return np.vstack(rows)

    def initial_state(self, seed_flow: float) -> np.ndarray:
        x = np.zeros(self.n + self.l)
        x[self.n :] = seed_loops(self.loops, self.Q0, seed_flow)
        return x


def assemble_model(net, tree, loops, meas, mask=None, weighted=False) -> EstimatorModel:
    return EstimatorModel(net, tree, loops, meas, mask, weighted)


# ---------------------------------------------------------------------------
# estimation


@dataclass
class StateEstimate:
    delta_d: np.ndarray  # network node order (root 0)
    loop_flows: np.ndarray
    flows: np.ndarray
    heads: np.ndarray
    inflows: dict[int, float]
    demands: np.ndarray  # estimated demands d_f, network node order
    iterations: int
    converged: bool
    fallback_applied: bool
    measurement_residuals: np.ndarray  # value - model, head meters then flow meters
    objective: list = field(default_factory=list, repr=False)
    flow_residual_history: list = field(default_factory=list, repr=False)
    loop_residual: float = 0.0
    message: str = ""

    def state_vector(self, net: Network) -> np.ndarray:
        """Heads (all nodes), fixed-head inflows, then demand variations."""
        infl = [self.inflows[nid] for nid in net.fixed_head_ids]
        return np.concatenate([self.heads, infl, self.delta_d])


def state_names(net: Network) -> list[str]:
    return (
        [f"head_{nid}" for nid in net.node_ids]
        + [f"inflow_{nid}" for nid in net.fixed_head_ids]
        + [f"dd_{nid}" for nid in net.node_ids]
    )


def estimate(
    net: Network,
    tree: SpanningTree,
    loops: LoopSystem,
    meas: MeasurementSet,
    mask: RegionMask | None = None,
    opts: EstimatorOptions | None = None,
) -> StateEstimate:
    """Gauss-Newton on the stacked residual, then the clamp-and-resimulate fallback."""
    opts = opts or EstimatorOptions()
    model = EstimatorModel(net, tree, loops, meas, mask, opts.weighted, opts.loop_accuracy)
    W = model.weights
    x = model.initial_state(opts.seed_flow)
    g = model.residual(x)
    f = float(np.sum((W * g) ** 2))
    history = [f]
    nH = len(model.zH)
    flow_hist = [float(np.max(np.abs(g[model.l + model.n + nH :]))) if len(model.zF) else 0.0]
    converged = False
    it = 0
    while it < opts.max_iter:
        J = model.jacobian(x, enhanced=opts.enhancement)
        WJ = J * W[:, None]
        step, _res, rank, sv = lstsq(WJ, -(W * g), lapack_driver="gelsd", check_finite=False)
        if rank < WJ.shape[1]:
            raise UnobservableError(_unobservable(WJ, model))
        t = 1.0
        x_new = x + step
        g_new = model.residual(x_new)
        f_new = float(np.sum((W * g_new) ** 2))
        if not opts.pure_gn:
            for _ in range(8):
                if f_new <= f:
                    break
                t *= 0.5
                x_new = x + t * step
                g_new = model.residual(x_new)
                f_new = float(np.sum((W * g_new) ** 2))
        it += 1
        x, g, f = x_new, g_new, f_new
        history.append(f)
        if len(model.zF):
            flow_hist.append(float(np.max(np.abs(g[model.l + model.n + nH :]))))
        if not np.isfinite(f):
            break
        if float(np.max(np.abs(t * step))) < opts.tol:
            converged = True
            break
    return _finish(model, x, g, it, converged, history, flow_hist, opts)


def _unobservable(WJ: np.ndarray, model: EstimatorModel) -> str:
    _u, s, vt = np.linalg.svd(WJ)
    null = vt[s.size - np.sum(s <= s[0] * 1e-12) :] if s.size else vt
    names = [f"dd@{nid}" for nid in model.tree.order] + [f"dq{i}" for i in range(model.l)]
    dirs = []
    for v in null[:3]:
        top = np.argsort(-np.abs(v))[:4]
        dirs.append("+".join(names[i] for i in top))
    return "rank-deficient normal equations; unobservable directions: " + "; ".join(dirs)


def _finish(model: EstimatorModel, x, g, it, converged, history, flow_hist, opts) -> StateEstimate:
    net = model.net
    tree, loops = model.tree, model.loops
    n = model.n
    dd_lab, dq = model.split(x)
    dd_lab = dd_lab * model.mask.active
    lab = tree.label
    N = len(net.nodes)
    dd = np.zeros(N)
    for pos, nd in enumerate(net.nodes):
        j = lab[nd.id]
        if j != n:
            dd[pos] = dd_lab[j]
    # estimated demands; an inflow-known node takes its shift as extra inflow
    demands = net.demands().copy()
    new_inflow = {}
    for pos, nd in enumerate(net.nodes):
        if nd.is_fixed and nd.boundary == INFLOW_KNOWN and nd.id != tree.root:
            new_inflow[nd.id] = nd.inflow + dd[pos]
        else:
            demands[pos] -= dd[pos]
    Q = model.flows(x)
    h = column_head_losses(loops, Q, model.expo, model.bd.pseudo_head)
    loop_res = model.M @ h
    loop_max = float(np.max(np.abs(loop_res))) if loop_res.size else 0.0
    tol_h = opts.sim.head_tolerance(h[~loops.is_pseudo])
    neg = np.any(demands[[i for i, nd in enumerate(net.nodes) if not nd.is_fixed]] < 0)
    fallback = opts.fallback and converged and (neg or loop_max > tol_h)
    if fallback:
        clamped = demands.copy()
        for pos, nd in enumerate(net.nodes):
            if not nd.is_fixed:
                clamped[pos] = max(clamped[pos], 0.0)
        net_f = net.with_values(demands=clamped, inflows=new_inflow) if new_inflow else net.with_values(demands=clamped)
        sim = solve_cotree(net_f, tree, loops, opts=opts.sim)
        flows, heads, inflows = sim.flows, sim.heads, sim.inflows
        dq = sim.loop_flows
        demands = clamped
        for pos, nd in enumerate(net.nodes):
            if not nd.is_fixed:
                dd[pos] = net.nodes[pos].demand - clamped[pos]
        loop_max = sim.residual
        ok = converged and sim.converged
    else:
        from .simulator import _to_network

        H_lab = recover_heads(tree, h[:n], model.bd.H0)
        net_f = net.with_values(inflows=new_inflow) if new_inflow else net
        bd = replace(model.bd, node_demand=demands)
        flows, heads, inflows = _to_network(net_f, loops, bd, Q, H_lab)
        ok = converged
    resid = []
    for m in model.meas.head_meas:
        resid.append(m.value - heads[net.node_pos(m.node)])
    for m in model.meas.flow_meas:
        resid.append(m.value - flows[net.pipe_pos(m.pipe)])
    msg = "converged" if converged else f"no convergence after {it} iterations"
    if fallback:
        msg += "; demands clamped and re-simulated"
    return StateEstimate(
        delta_d=dd,
        loop_flows=dq,
        flows=flows,
        heads=heads,
        inflows=inflows,
        demands=demands,
        iterations=it,
        converged=ok,
        fallback_applied=bool(fallback),
        measurement_residuals=np.array(resid),
        objective=history,
        flow_residual_history=flow_hist,
        loop_residual=loop_max,
        message=msg,
    )


def estimate_network(net: Network, meas: MeasurementSet, radius: int | None = None, opts=None, root=None):
    """Convenience wrapper: build the topology for ``meas`` and estimate."""
    from .topology import build_spanning_tree

    net_m = meas.apply(net)
    tree = build_spanning_tree(net_m, root)
    loops = trace_loops(tree, net_m)
    mask = RegionMask.full(tree)
    if radius is not None:
        mask = constrain_region(mask, region_nodes(tree, meas, net_m, radius))
    return estimate(net_m, tree, loops, meas, mask, opts), (tree, loops, mask)
