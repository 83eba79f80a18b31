"""Spanning tree, relabeling and fundamental loops.

Column layout used throughout the package (``P = n + c + s`` columns):

* ``0 .. n-1``      tree pipes; tree pipe ``j`` connects node label ``j`` to
  its parent, so ``T`` is upper-triangular with ``T[j, j] = +-1``;
* ``n .. n+c-1``    chords (co-tree pipes);
* ``n+c .. P-1``    pseudo chords, one per head-known fixed-head node other
  than the root.  A pseudo chord runs from its fixed-head node to the root
  and carries the node's inflow with a minus sign.

The root carries label ``n`` and has no row in any incidence matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .network import HEAD_KNOWN, Network, NetworkError


class TopologyError(RuntimeError):
    """Internal invariant broken while building incidence structures."""


def _incidence(n: int, start: np.ndarray, end: np.ndarray) -> np.ndarray:
    """Node-pipe incidence with the root row (label n) dropped."""
    cols = len(start)
    A = np.zeros((n, cols))
    j = np.arange(cols)
    into = end < n
    A[end[into], j[into]] = 1.0
    out = start < n
    A[start[out], j[out]] = -1.0
    return A


@dataclass(frozen=True)
class SpanningTree:
    """DFS tree with preorder labels.

    ``order[j]`` is the node id carrying label ``j``; ``parent[j]`` is the
    parent label (``n`` for the root).  ``col_*`` arrays describe the tree and
    chord columns in their current orientation; ``col_orient`` is ``+1`` where
    that orientation agrees with the network's pipe direction.
    """

    root: int
    order: tuple[int, ...]
    parent: np.ndarray
    col_pipe: np.ndarray
    col_start: np.ndarray
    col_end: np.ndarray
    col_orient: np.ndarray
    col_k: np.ndarray
    T: np.ndarray = field(init=False, repr=False)
    C: np.ndarray = field(init=False, repr=False)
    T_inv: np.ndarray = field(init=False, repr=False)
    depth: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        n = self.n
        A = _incidence(n, self.col_start, self.col_end)
        T = A[:, :n]
        if n and (np.any(np.tril(T, -1)) or np.any(np.abs(np.diag(T)) != 1)):
            raise TopologyError("tree incidence matrix is not upper-triangular with unit diagonal")
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "C", A[:, n:])
        T_inv = solve_triangular(T, np.eye(n)) if n else np.zeros((0, 0))
        object.__setattr__(self, "T_inv", T_inv)
        depth = np.zeros(n + 1, dtype=int)
        for j in range(n):  # parents precede children in preorder
            depth[j] = depth[self.parent[j]] + 1 if self.parent[j] != n else 1
        object.__setattr__(self, "depth", depth)

    @property
    def n(self) -> int:
        return len(self.order)

    @property
    def n_chords(self) -> int:
        return len(self.col_pipe) - self.n

    @property
    def label(self) -> dict[int, int]:
        out = {nid: j for j, nid in enumerate(self.order)}
        out[self.root] = self.n
        return out

    @property
    def predecessor(self) -> np.ndarray:
        """Parent labels, root labelled ``n``."""
        return self.parent.copy()

    @property
    def tree_pipes(self) -> tuple[int, ...]:
        return tuple(int(p) for p in self.col_pipe[: self.n])

    @property
    def chord_pipes(self) -> tuple[int, ...]:
        return tuple(int(p) for p in self.col_pipe[self.n :])

    @property
    def pipe_column(self) -> dict[int, int]:
        return {int(p): j for j, p in enumerate(self.col_pipe)}

    @property
    def tree_sign(self) -> np.ndarray:
        """Diagonal of T: +1 where tree pipe j points into node j."""
        return np.diag(self.T).copy()

    @property
    def A(self) -> np.ndarray:
        return np.hstack([self.T, self.C])

    def node_ids_to_labels(self, ids: Iterable[int]) -> np.ndarray:
        lab = self.label
        return np.array([lab[i] for i in ids], dtype=int)

    def tree_distances(self, sources: Iterable[int]) -> dict[int, int]:
        """Edge-count distance in the tree from the nearest source node id."""
        n = self.n
        adj: list[list[int]] = [[] for _ in range(n + 1)]
        for j in range(n):
            adj[j].append(int(self.parent[j]))
            adj[int(self.parent[j])].append(j)
        lab = self.label
        dist = {}
        frontier = []
        for s in sources:
            lj = lab[s]
            if lj not in dist:
                dist[lj] = 0
                frontier.append(lj)
        while frontier:
            nxt = []
            for u in frontier:
                for v in adj[u]:
                    if v not in dist:
                        dist[v] = dist[u] + 1
                        nxt.append(v)
            frontier = nxt
        ids = list(self.order) + [self.root]
        return {ids[j]: d for j, d in dist.items()}


def build_spanning_tree(net: Network, root: int | None = None) -> SpanningTree:
    """Depth-first spanning tree from a fixed-head root.

    Neighbours are visited in ascending resistance, then ascending pipe id.
    Nodes receive labels in discovery order, which puts every parent before
    its children and so makes the tree incidence matrix upper-triangular.
    Constant-flow links are left out of the graph entirely.
    """
    if root is None:
        root = net.default_root()
    if not net.node(root).is_fixed:
        raise NetworkError(f"root {root} is not a fixed-head node")
    adj: dict[int, list[tuple[float, int, int]]] = {nd.id: [] for nd in net.nodes}
    eligible = [pp for pp in net.pipes if pp.fixed_flow is None]
    for pp in eligible:
        k = pp.resistance()
        adj[pp.start].append((k, pp.id, pp.end))
        adj[pp.end].append((k, pp.id, pp.start))
    for lst in adj.values():
        lst.sort()

    label: dict[int, int] = {}
    order: list[int] = []
    parent_node: dict[int, int] = {}
    tree_pipe: dict[int, int] = {}
    stack = [(root, iter(adj[root]))]
    seen = {root}
    while stack:
        u, it = stack[-1]
        for _k, pid, v in it:
            if v not in seen:
                seen.add(v)
                label[v] = len(order)
                order.append(v)
                parent_node[v] = u
                tree_pipe[v] = pid
                stack.append((v, iter(adj[v])))
                break
        else:
            stack.pop()
    missing = sorted(set(adj) - seen)
    if missing:
        raise NetworkError(f"disconnected network: nodes {missing} unreachable from root {root}")

    n = len(order)
    label[root] = n
    used = set(tree_pipe.values())
    chords = sorted(pp.id for pp in eligible if pp.id not in used)
    col_pipe = [tree_pipe[v] for v in order] + chords
    start = np.array([label[net.pipe(p).start] for p in col_pipe], dtype=int)
    end = np.array([label[net.pipe(p).end] for p in col_pipe], dtype=int)
    parent = np.array([label[parent_node[v]] for v in order], dtype=int)
    return SpanningTree(
        root=root,
        order=tuple(order),
        parent=parent,
        col_pipe=np.array(col_pipe, dtype=int),
        col_start=start,
        col_end=end,
        col_orient=np.ones(len(col_pipe), dtype=int),
        col_k=np.array([net.pipe(p).resistance() for p in col_pipe]),
    )


@dataclass(frozen=True)
class LoopSystem:
    """Loop incidence structure for one spanning tree.

    ``M_lp`` has one row per chord and pseudo chord, oriented along the chord.
    ``A`` is the full node-pipe incidence ``[T C C_pseudo]``.
    """

    tree: SpanningTree
    pseudo_nodes: tuple[int, ...]
    M_lp: np.ndarray
    A: np.ndarray

    @property
    def n(self) -> int:
        return self.tree.n

    @property
    def l(self) -> int:
        return self.M_lp.shape[0]

    @property
    def n_real_loops(self) -> int:
        return self.tree.n_chords

    @property
    def P(self) -> int:
        return self.M_lp.shape[1]

    @property
    def M_pl(self) -> np.ndarray:
        return self.M_lp.T

    @property
    def M_nl(self) -> np.ndarray:
        return self.M_lp[:, : self.n].T

    @property
    def M_ll(self) -> np.ndarray:
        return self.M_lp[:, self.n :].T

    @property
    def loop_chord(self) -> np.ndarray:
        """Column index of the chord defining each loop."""
        return np.arange(self.n, self.P)

    @property
    def pseudo_loops(self) -> list[tuple[int, int]]:
        c = self.tree.n_chords
        return [(nid, c + i) for i, nid in enumerate(self.pseudo_nodes)]

    @property
    def col_k(self) -> np.ndarray:
        return np.concatenate([self.tree.col_k, np.zeros(len(self.pseudo_nodes))])

    @property
    def is_pseudo(self) -> np.ndarray:
        mask = np.zeros(self.P, dtype=bool)
        mask[self.n + self.tree.n_chords :] = True
        return mask

    @property
    def B_nl(self) -> np.ndarray:
        """Pseudo-loop inflow matrix; rows are node labels followed by the root."""
        B = np.zeros((self.n + 1, self.l))
        for nid, li in self.pseudo_loops:
            B[self.tree.label[nid], li] = -1.0
            B[self.n, li] = 1.0
        return B


def _fundamental_loop(tree: SpanningTree, a: int, b: int) -> dict[int, float]:
    """Tree-column entries of the loop closing chord a->b (labels)."""
    n = tree.n
    par = tree.parent
    sign = np.diag(tree.T)
    depth = tree.depth
    entries: dict[int, float] = {}
    # walk both ends up to their meeting node
    x, y = b, a
    while x != y:
        if x != n and (y == n or depth[x] >= depth[y]):
            entries[x] = -sign[x]  # traversed child -> parent
            x = par[x]
        else:
            entries[y] = sign[y]  # traversed parent -> child
            y = par[y]
    return entries


def trace_loops(tree: SpanningTree, net: Network, head_known: Iterable[int] | None = None) -> LoopSystem:
    """Fundamental loops for every chord plus pseudo-loops.

    ``head_known`` lists the non-root fixed-head nodes that get a pseudo-loop;
    by default every fixed-head node whose boundary mode is ``"head"``.
    """
    if head_known is None:
        head_known = [nd.id for nd in net.nodes if nd.is_fixed and nd.boundary == HEAD_KNOWN]
    lab = tree.label
    pseudo = []
    for nid in head_known:
        if nid == tree.root:
            continue
        if not net.node(nid).is_fixed:
            raise NetworkError(f"node {nid} is not a fixed-head node")
        pseudo.append(nid)
    pseudo.sort(key=lambda v: lab[v])
    n, c, s = tree.n, tree.n_chords, len(pseudo)
    P = n + c + s
    M = np.zeros((c + s, P))
    starts = list(tree.col_start[n:]) + [lab[v] for v in pseudo]
    ends = list(tree.col_end[n:]) + [n] * s
    for i, (a, b) in enumerate(zip(starts, ends)):
        M[i, n + i] = 1.0
        for j, v in _fundamental_loop(tree, int(a), int(b)).items():
            M[i, j] = v
    A = np.hstack([tree.T, tree.C, _incidence(n, np.array([lab[v] for v in pseudo], dtype=int), np.full(s, n))])
    if np.any(A @ M.T != 0):
        raise TopologyError("loop matrix is not orthogonal to the incidence matrix")
    return LoopSystem(tree=tree, pseudo_nodes=tuple(pseudo), M_lp=M, A=A)


def build_loop_system(net: Network, root: int | None = None, head_known: Iterable[int] | None = None) -> LoopSystem:
    return trace_loops(build_spanning_tree(net, root), net, head_known)


def update_for_reversed_flows(
    tree: SpanningTree, loops: LoopSystem, reversed_pipes: Iterable[int]
) -> tuple[SpanningTree, LoopSystem]:
    """Flip the orientation of the given pipes.

    Negates the matching columns of ``[T C]`` and ``M_lp``; labels and loop
    membership are untouched.
    """
    cols = sorted({tree.pipe_column[int(p)] for p in reversed_pipes})
    if not cols:
        return tree, loops
    start, end, orient = tree.col_start.copy(), tree.col_end.copy(), tree.col_orient.copy()
    start[cols], end[cols] = tree.col_end[cols], tree.col_start[cols]
    orient[cols] *= -1
    new_tree = replace(tree, col_start=start, col_end=end, col_orient=orient)
    M = loops.M_lp.copy()
    M[:, cols] *= -1
    A = loops.A.copy()
    A[:, cols] *= -1
    return new_tree, replace(loops, tree=new_tree, M_lp=M, A=A)


def relabel_vector(tree: SpanningTree, values_by_id: dict[int, float]) -> np.ndarray:
    """Node-id keyed values to a label-ordered vector (root dropped)."""
    return np.array([values_by_id.get(nid, 0.0) for nid in tree.order])


def unrelabel_vector(tree: SpanningTree, vec: Sequence[float]) -> dict[int, float]:
    return {nid: float(v) for nid, v in zip(tree.order, vec)}
