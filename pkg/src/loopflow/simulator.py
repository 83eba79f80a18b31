"""Steady-state solver on loop corrective flows, plus a nodal cross-check.

The co-tree solver keeps nodal continuity exact at every iterate: flows are
always ``Q0 + M_pl dq`` with ``A Q0 = d`` and ``A M_pl = 0``.  Newton's method
then only has to drive the loop head-loss sums to zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .network import INFLOW_KNOWN, Network, NetworkError, flow_from_head_loss
from .topology import LoopSystem, SpanningTree


class SingularLoopError(RuntimeError):
    """Loop Jacobian is singular even after seeding."""

    def __init__(self, loops: Sequence[int]):
        self.loops = list(loops)
        super().__init__(f"singular loop Jacobian; degenerate loops {self.loops}")


@dataclass(frozen=True)
class SimulationOptions:
    tol: float = 1e-4
    max_iter: int = 50
    seed_flow: float = 1e-4
    relaxation: float = 1.0
    enhancement: bool = True
    head_tol: float | None = None  # None: 1e-6 * max|h| + 1e-9

    def __post_init__(self) -> None:
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.seed_flow > 0:
            raise ValueError("seed_flow must be > 0")
        if not 0 < self.relaxation <= 1:
            raise ValueError("relaxation must lie in (0, 1]")

    def head_tolerance(self, h: np.ndarray) -> float:
        if self.head_tol is not None:
            return self.head_tol
        return 1e-6 * (float(np.max(np.abs(h))) if h.size else 0.0) + 1e-9


@dataclass
class SimulationResult:
    """Solution in network terms.

    ``flows`` follow network pipe order and direction, ``heads`` network node
    order.  ``column_flows`` keeps the solver's internal column vector.
    """

    flows: np.ndarray
    heads: np.ndarray
    inflows: dict[int, float]
    loop_flows: np.ndarray
    iterations: int
    residual: float
    converged: bool
    column_flows: np.ndarray = field(default=None, repr=False)
    history: list = field(default_factory=list, repr=False)
    message: str = ""


# ---------------------------------------------------------------------------
# boundary data


@dataclass(frozen=True)
class Boundary:
    """Label-ordered operating point for one loop system."""

    d: np.ndarray  # demand vector over node labels
    H0: float
    pseudo_head: np.ndarray  # head loss of each pseudo chord (H_f - H_root)
    pseudo_q0: np.ndarray  # initial pseudo chord flows (= -initial inflow)
    node_demand: np.ndarray  # network order, as used


def boundary_data(net: Network, loops: LoopSystem, demands: Sequence[float] | None = None) -> Boundary:
    tree = loops.tree
    lab = tree.label
    n = tree.n
    dem = net.demands() if demands is None else np.asarray(demands, dtype=float)
    if dem.shape != (len(net.nodes),):
        raise NetworkError(f"demand vector must have length {len(net.nodes)}")
    d = np.zeros(n)
    for pos, nd in enumerate(net.nodes):
        j = lab[nd.id]
        if j == n:
            continue
        d[j] += dem[pos]
        if nd.is_fixed and nd.boundary == INFLOW_KNOWN:
            d[j] -= nd.inflow
    for pp in net.pipes:
        if pp.fixed_flow is None:
            continue
        a, b = lab[pp.start], lab[pp.end]
        if a != n:
            d[a] += pp.fixed_flow
        if b != n:
            d[b] -= pp.fixed_flow
    root = net.node(tree.root)
    H0 = float(root.head)
    ph = np.array([net.node(v).head - H0 for v in loops.pseudo_nodes])
    pq = np.array([-net.node(v).inflow for v in loops.pseudo_nodes])
    return Boundary(d, H0, ph, pq, dem)


# ---------------------------------------------------------------------------
# building blocks


def initial_flows(tree: SpanningTree, d: np.ndarray) -> np.ndarray:
    """Tree flows with all chords idle: back-substitution on T."""
    d = np.asarray(d, dtype=float)
    if tree.n == 0:
        return np.zeros(0)
    return solve_triangular(tree.T, d, check_finite=False)


def base_flows(loops: LoopSystem, bd: Boundary) -> np.ndarray:
    """Column flows for dq = 0: pseudo chords at their initial value."""
    tree = loops.tree
    n, c = tree.n, tree.n_chords
    q_chord = np.concatenate([np.zeros(c), bd.pseudo_q0])
    rhs = bd.d - loops.A[:, n:] @ q_chord
    return np.concatenate([initial_flows(tree, rhs), q_chord])


def column_head_losses(loops: LoopSystem, Q: np.ndarray, exponent: float, pseudo_head: np.ndarray) -> np.ndarray:
    k = loops.col_k
    h = k * Q * np.abs(Q) ** (exponent - 1.0)
    if len(pseudo_head):
        h[-len(pseudo_head) :] = pseudo_head
    return h


def column_derivatives(loops: LoopSystem, Q: np.ndarray, exponent: float) -> np.ndarray:
    """Diagonal of A: n k |Q|^(n-1); zero on pseudo chords."""
    return exponent * loops.col_k * np.abs(Q) ** (exponent - 1.0)


def loop_jacobian(flows: np.ndarray, k: np.ndarray, n: float, loops: LoopSystem) -> np.ndarray:
    """J = M_lp diag(n k |Q|^(n-1)) M_pl for column flows ``flows``."""
    a = n * np.asarray(k) * np.abs(flows) ** (n - 1.0)
    M = loops.M_lp
    return (M * a) @ M.T


def recover_heads(tree: SpanningTree, h_T: np.ndarray, H_0: float) -> np.ndarray:
    """Label-ordered heads from tree head losses by walking down the tree."""
    n = tree.n
    H = np.empty(n + 1)
    H[n] = H_0
    sign = np.diag(tree.T)
    par = tree.parent
    for j in range(n):  # preorder: parent already known
        H[j] = H[par[j]] - sign[j] * h_T[j]
    return H[:n]


def _enhanced_derivatives(
    loops: LoopSystem, Q: np.ndarray, a: np.ndarray, h: np.ndarray, exponent: float, H0: float
) -> np.ndarray:
    """Swap chord entries of A for the averaged chord flow.

    The averaged flow mixes the current chord flow with the flow the chord
    would carry under the head difference implied by the tree.
    """
    tree = loops.tree
    n, c = tree.n, tree.n_chords
    if c == 0:
        return a
    H = np.append(recover_heads(tree, h[:n], H0), H0)
    cols = slice(n, n + c)
    k = tree.col_k[n:]
    dh = H[tree.col_start[n:]] - H[tree.col_end[n:]]
    q_head = flow_from_head_loss(k, dh, exponent)
    q_avg = 0.5 * (Q[cols] + q_head)
    out = a.copy()
    out[cols] = exponent * k * np.abs(q_avg) ** (exponent - 1.0)
    return out


def seed_loops(loops: LoopSystem, Q0: np.ndarray, seed_flow: float) -> np.ndarray:
    """Initial dq: seed loops whose real pipes all start below seed_flow."""
    dq = np.zeros(loops.l)
    real = ~loops.is_pseudo
    for i in range(loops.l):
        members = (loops.M_lp[i] != 0) & real
        if np.all(np.abs(Q0[members]) < seed_flow):
            dq[i] = seed_flow
    return dq


def _degenerate_loops(J: np.ndarray) -> list[int]:
    diag = np.diag(J)
    bad = [i for i in range(len(diag)) if not diag[i] > 0]
    if bad:
        return bad
    # rank test for linear dependence among non-zero rows
    s = np.linalg.svd(J, compute_uv=False)
    if s.size and s[-1] <= s[0] * 1e-14:
        return list(range(len(diag)))
    return []


# ---------------------------------------------------------------------------
# solver


def _to_network(net: Network, loops: LoopSystem, bd: Boundary, Q: np.ndarray, H_lab: np.ndarray):
    tree = loops.tree
    n, c = tree.n, tree.n_chords
    flows = np.zeros(net.p)
    for j in range(n + c):
        flows[net.pipe_pos(int(tree.col_pipe[j]))] = tree.col_orient[j] * Q[j]
    for pos, pp in enumerate(net.pipes):
        if pp.fixed_flow is not None:
            flows[pos] = pp.fixed_flow
    heads = np.zeros(len(net.nodes))
    lab = tree.label
    for pos, nd in enumerate(net.nodes):
        j = lab[nd.id]
        heads[pos] = bd.H0 if j == n else H_lab[j]
    inflows: dict[int, float] = {}
    pseudo_q = Q[n + c :]
    for v, q in zip(loops.pseudo_nodes, pseudo_q):
        inflows[v] = -float(q)
    for nd in net.nodes:
        if nd.is_fixed and nd.id != tree.root and nd.id not in inflows:
            inflows[nd.id] = nd.inflow
    inflows[tree.root] = float(bd.node_demand.sum() - sum(inflows.values()))
    return flows, heads, inflows


def solve_cotree(
    net: Network,
    tree: SpanningTree,
    loops: LoopSystem,
    d: Sequence[float] | None = None,
    opts: SimulationOptions | None = None,
) -> SimulationResult:
    """Newton iteration on loop corrective flows.

    ``d`` optionally overrides node demands (network node order).
    """
    opts = opts or SimulationOptions()
    bd = boundary_data(net, loops, d)
    expo = net.exponent
    M = loops.M_lp
    Q0 = base_flows(loops, bd)
    dq = seed_loops(loops, Q0, opts.seed_flow)
    head_fn = lambda Q: column_head_losses(loops, Q, expo, bd.pseudo_head)  # noqa: E731

    history = []
    converged = False
    last_step = np.inf
    it = 0
    while True:
        Q = Q0 + M.T @ dq
        h = head_fn(Q)
        dH = M @ h
        res = float(np.max(np.abs(dH))) if dH.size else 0.0
        history.append(res)
        if not np.isfinite(res):
            break
        if res <= opts.head_tolerance(h) and (it == 0 or last_step < opts.tol):
            converged = True
            break
        if it >= opts.max_iter:
            break
        a = column_derivatives(loops, Q, expo)
        if opts.enhancement:
            a = _enhanced_derivatives(loops, Q, a, h, expo, bd.H0)
        J = (M * a) @ M.T
        try:
            step = np.linalg.solve(J, dH)
        except np.linalg.LinAlgError:
            raise SingularLoopError(_degenerate_loops(J)) from None
        if it == 0:
            bad = _degenerate_loops(J)
            if bad:
                raise SingularLoopError(bad)
        step *= opts.relaxation
        dq = dq - step
        last_step = float(np.max(np.abs(step)))
        it += 1

    H_lab = recover_heads(loops.tree, h[: loops.n], bd.H0)
    flows, heads, inflows = _to_network(net, loops, bd, Q, H_lab)
    msg = "converged" if converged else f"no convergence after {it} iterations (residual {res:.3e} m)"
    return SimulationResult(flows, heads, inflows, dq, it, res, converged, Q, history, msg)


def loop_residuals(net: Network, loops: LoopSystem, result: SimulationResult, d=None) -> np.ndarray:
    bd = boundary_data(net, loops, d)
    h = column_head_losses(loops, result.column_flows, net.exponent, bd.pseudo_head)
    return loops.M_lp @ h


def continuity_residuals(net: Network, flows: np.ndarray, inflows: Mapping[int, float], demands=None) -> np.ndarray:
    """Per-node inflow minus outflow minus demand, network node order."""
    dem = net.demands() if demands is None else np.asarray(demands, dtype=float)
    bal = -dem.copy()
    for pos, pp in enumerate(net.pipes):
        bal[net.node_pos(pp.end)] += flows[pos]
        bal[net.node_pos(pp.start)] -= flows[pos]
    for nid, u in inflows.items():
        bal[net.node_pos(nid)] += u
    return bal


# ---------------------------------------------------------------------------
# nodal oracle


def oracle_nodal_solve(
    net: Network,
    d: Sequence[float] | None = None,
    root: int | None = None,
    tol: float = 1e-13,
    max_iter: int = 200,
) -> SimulationResult:
    """Newton on nodal heads, used only to cross-check the loop solver.

    Unknowns are the heads of every node except the root and head-known
    fixed-head nodes.  Pipe flows come from the inverted head-loss law.
    """
    root = net.default_root() if root is None else root
    dem = net.demands() if d is None else np.asarray(d, dtype=float)
    N = len(net.nodes)
    known = np.zeros(N, dtype=bool)
    H = np.zeros(N)
    inj = -dem.copy()  # external supply minus demand
    for pos, nd in enumerate(net.nodes):
        if nd.is_fixed and (nd.id == root or nd.boundary != INFLOW_KNOWN):
            known[pos] = True
            H[pos] = nd.head
        elif nd.is_fixed:
            inj[pos] += nd.inflow
    pipes = [pp for pp in net.pipes if pp.fixed_flow is None]
    for pp in net.pipes:
        if pp.fixed_flow is not None:
            inj[net.node_pos(pp.start)] -= pp.fixed_flow
            inj[net.node_pos(pp.end)] += pp.fixed_flow
    fr = np.array([net.node_pos(pp.start) for pp in pipes], dtype=int)
    to = np.array([net.node_pos(pp.end) for pp in pipes], dtype=int)
    k = np.array([pp.resistance() for pp in pipes])
    expo = net.exponent
    unknown = np.flatnonzero(~known)
    idx = -np.ones(N, dtype=int)
    idx[unknown] = np.arange(len(unknown))

    def flows_of(Hv):
        return flow_from_head_loss(k, Hv[fr] - Hv[to], expo)

    def residual(Hv):
        q = flows_of(Hv)
        bal = inj.copy()
        np.add.at(bal, to, q)
        np.subtract.at(bal, fr, q)
        return bal[unknown]

    # linear start: unit-exponent flow law with conductance 1/k
    m = len(unknown)
    if m:
        G = np.zeros((m, m))
        rhs = np.zeros(m)
        for a, b, kk in zip(fr, to, k):
            g = 1.0 / kk
            for u, v in ((a, b), (b, a)):
                if idx[u] >= 0:
                    G[idx[u], idx[u]] += g
                    if idx[v] >= 0:
                        G[idx[u], idx[v]] -= g
                    else:
                        rhs[idx[u]] += g * H[v]
        rhs += inj[unknown] * 1.0
        H[unknown] = np.linalg.solve(G, rhs)

    F = residual(H)
    it = 0
    while m and it < max_iter and np.max(np.abs(F)) > tol:
        dh = H[fr] - H[to]
        g = (1.0 / expo) * np.maximum(np.abs(dh), 1e-12) ** (1.0 / expo - 1.0) * k ** (-1.0 / expo)
        Jm = np.zeros((m, m))
        for a, b, gg in zip(fr, to, g):
            # d(balance at a)/dH_a = -g, d(balance at b)/dH_a = +g ...
            ia, ib = idx[a], idx[b]
            if ia >= 0:
                Jm[ia, ia] -= gg
                if ib >= 0:
                    Jm[ia, ib] += gg
            if ib >= 0:
                Jm[ib, ib] -= gg
                if ia >= 0:
                    Jm[ib, ia] += gg
        step = np.linalg.solve(Jm, -F)
        base = float(np.sum(F**2))
        t = 1.0
        for _ in range(40):
            Hn = H.copy()
            Hn[unknown] += t * step
            Fn = residual(Hn)
            if np.sum(Fn**2) < base:
                break
            t *= 0.5
        H, F = Hn, Fn
        it += 1

    q = flows_of(H)
    flows = np.zeros(net.p)
    for pp, qq in zip(pipes, q):
        flows[net.pipe_pos(pp.id)] = qq
    for pos, pp in enumerate(net.pipes):
        if pp.fixed_flow is not None:
            flows[pos] = pp.fixed_flow
    # supply at every head-known node closes its balance
    bal = -dem.copy()
    for pos, pp in enumerate(net.pipes):
        bal[net.node_pos(pp.end)] += flows[pos]
        bal[net.node_pos(pp.start)] -= flows[pos]
    inflows = {}
    for pos, nd in enumerate(net.nodes):
        if nd.is_fixed:
            inflows[nd.id] = float(-bal[pos]) if known[pos] else nd.inflow
    res = float(np.max(np.abs(F))) if m else 0.0
    ok = res <= max(tol, 1e-12)
    return SimulationResult(flows, H, inflows, np.zeros(0), it, res, ok, None, [], "nodal oracle")
