"""Network data model and Hazen-Williams head-loss relations.

All quantities are SI: metres, cubic metres per second, seconds.  Heads are
total heads; elevation is carried along but never subtracted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

DEFAULT_EXPONENT = 1.852
HW_CONSTANT = 10.742

DEMAND = "demand"
FIXED_HEAD = "fixed_head"

# boundary modes for fixed-head nodes
HEAD_KNOWN = "head"
INFLOW_KNOWN = "inflow"


class NetworkError(ValueError):
    """Raised for malformed or physically invalid network input."""


def hazen_williams_resistance(C, L, D):
    """Resistance coefficient k with h = k q|q|^(n-1).

    Works elementwise on arrays.  Non-positive inputs raise ``NetworkError``
    naming the offending argument.
    """
    for name, value in (("C", C), ("L", L), ("D", D)):
        arr = np.asarray(value, dtype=float)
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
            raise NetworkError(f"{name} must be finite and > 0, got {value!r}")
    k = HW_CONSTANT * np.power(C, -1.85) * np.asarray(L, float) * np.power(D, -4.87)
    return float(k) if np.ndim(k) == 0 else k


def head_loss(k, q, n=DEFAULT_EXPONENT):
    """Signed head loss k q |q|^(n-1)."""
    q = np.asarray(q, dtype=float)
    h = k * q * np.abs(q) ** (n - 1.0)
    return float(h) if h.ndim == 0 else h


def head_loss_derivative(k, q, n=DEFAULT_EXPONENT):
    """dh/dq = n k |q|^(n-1)."""
    q = np.asarray(q, dtype=float)
    a = n * k * np.abs(q) ** (n - 1.0)
    return float(a) if a.ndim == 0 else a


def flow_from_head_loss(k, dh, n=DEFAULT_EXPONENT):
    """Inverse of :func:`head_loss`: sign(dh) (|dh|/k)^(1/n)."""
    dh = np.asarray(dh, dtype=float)
    q = np.sign(dh) * (np.abs(dh) / k) ** (1.0 / n)
    return float(q) if q.ndim == 0 else q


@dataclass(frozen=True)
class Node:
    id: int
    kind: str = DEMAND
    demand: float = 0.0
    head: float | None = None
    elevation: float = 0.0
    # fixed-head nodes only: "head" forms a pseudo-loop, "inflow" pins the inflow
    boundary: str = HEAD_KNOWN
    inflow: float = 0.0

    @property
    def is_fixed(self) -> bool:
        return self.kind == FIXED_HEAD


@dataclass(frozen=True)
class Pipe:
    id: int
    start: int
    end: int
    C: float = 100.0
    length: float = 100.0
    diameter: float = 0.3
    k: float | None = None
    fixed_flow: float | None = None

    def resistance(self) -> float:
        if self.k is not None:
            return float(self.k)
        return hazen_williams_resistance(self.C, self.length, self.diameter)


@dataclass(frozen=True)
class Network:
    """Immutable pipe network.

    ``nodes`` and ``pipes`` keep their input order; lookups by id go through
    the cached index maps.
    """

    nodes: tuple[Node, ...]
    pipes: tuple[Pipe, ...]
    exponent: float = DEFAULT_EXPONENT
    name: str = ""
    _node_index: dict = field(init=False, repr=False, compare=False)
    _pipe_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "pipes", tuple(self.pipes))
        object.__setattr__(self, "_node_index", {nd.id: i for i, nd in enumerate(self.nodes)})
        object.__setattr__(self, "_pipe_index", {pp.id: i for i, pp in enumerate(self.pipes)})
        if not self.exponent > 1.0:
            raise NetworkError(f"exponent must be > 1, got {self.exponent}")

    # counts --------------------------------------------------------------
    @property
    def t(self) -> int:
        return sum(nd.is_fixed for nd in self.nodes)

    @property
    def p(self) -> int:
        return len(self.pipes)

    @property
    def n(self) -> int:
        """Nodes other than the root."""
        return len(self.nodes) - 1

    # lookups -------------------------------------------------------------
    def node(self, node_id: int) -> Node:
        try:
            return self.nodes[self._node_index[node_id]]
        except KeyError:
            raise NetworkError(f"unknown node id {node_id}") from None

    def pipe(self, pipe_id: int) -> Pipe:
        try:
            return self.pipes[self._pipe_index[pipe_id]]
        except KeyError:
            raise NetworkError(f"unknown pipe id {pipe_id}") from None

    def node_pos(self, node_id: int) -> int:
        if node_id not in self._node_index:
            raise NetworkError(f"unknown node id {node_id}")
        return self._node_index[node_id]

    def pipe_pos(self, pipe_id: int) -> int:
        if pipe_id not in self._pipe_index:
            raise NetworkError(f"unknown pipe id {pipe_id}")
        return self._pipe_index[pipe_id]

    @property
    def node_ids(self) -> list[int]:
        return [nd.id for nd in self.nodes]

    @property
    def pipe_ids(self) -> list[int]:
        return [pp.id for pp in self.pipes]

    @property
    def fixed_head_ids(self) -> list[int]:
        return [nd.id for nd in self.nodes if nd.is_fixed]

    def resistances(self) -> np.ndarray:
        return np.array([pp.resistance() for pp in self.pipes])

    def demands(self) -> np.ndarray:
        return np.array([nd.demand for nd in self.nodes], dtype=float)

    def default_root(self) -> int:
        """Fixed-head node with the largest head (lowest id on ties)."""
        fixed = [nd for nd in self.nodes if nd.is_fixed]
        if not fixed:
            raise NetworkError("network has no fixed-head node")
        return min(fixed, key=lambda nd: (-(nd.head or 0.0), nd.id)).id

    # derived copies ------------------------------------------------------
    def with_values(
        self,
        demands: Mapping[int, float] | Sequence[float] | None = None,
        heads: Mapping[int, float] | None = None,
        inflows: Mapping[int, float] | None = None,
    ) -> "Network":
        """Copy with new demands, fixed heads or fixed inflows.

        ``demands`` may be a mapping by node id or a sequence in node order.
        """
        nodes = list(self.nodes)
        if demands is not None:
            if not isinstance(demands, Mapping):
                arr = np.asarray(demands, dtype=float)
                if arr.shape != (len(nodes),):
                    raise NetworkError(f"demand vector must have length {len(nodes)}")
                demands = {nd.id: float(v) for nd, v in zip(nodes, arr)}
            for nid, val in demands.items():
                i = self.node_pos(nid)
                nodes[i] = replace(nodes[i], demand=float(val))
        for values, attr in ((heads, "head"), (inflows, "inflow")):
            if values is None:
                continue
            for nid, val in values.items():
                i = self.node_pos(nid)
                if not nodes[i].is_fixed:
                    raise NetworkError(f"node {nid} is not a fixed-head node")
                nodes[i] = replace(nodes[i], **{attr: float(val)})
        return replace(self, nodes=tuple(nodes))

    def with_boundary(self, modes: Mapping[int, str]) -> "Network":
        nodes = list(self.nodes)
        for nid, mode in modes.items():
            if mode not in (HEAD_KNOWN, INFLOW_KNOWN):
                raise NetworkError(f"unknown boundary mode {mode!r}")
            i = self.node_pos(nid)
            nodes[i] = replace(nodes[i], boundary=mode)
        return replace(self, nodes=tuple(nodes))


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class ValidationReport:
    diagnostics: tuple[str, ...]
    expected_loops: int
    components: int

    @property
    def ok(self) -> bool:
        return not self.diagnostics


def _components(node_ids: Iterable[int], edges: Iterable[tuple[int, int]]) -> list[set[int]]:
    parent = {v: v for v in node_ids}

    def find(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    for a, b in edges:
        if a in parent and b in parent:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    groups: dict[int, set[int]] = {}
    for v in parent:
        groups.setdefault(find(v), set()).add(v)
    return sorted(groups.values(), key=min)


def validate_network(net: Network) -> ValidationReport:
    """Structural checks; never raises, only reports."""
    diag: list[str] = []
    ids = [nd.id for nd in net.nodes]
    pids = [pp.id for pp in net.pipes]
    if len(set(ids)) != len(ids):
        diag.append("duplicate node ids")
    if len(set(pids)) != len(pids):
        diag.append("duplicate pipe ids")
    if net.t < 1:
        diag.append("no fixed-head node")
    known = set(ids)
    degree = {v: 0 for v in ids}
    for pp in net.pipes:
        if pp.start not in known or pp.end not in known:
            diag.append(f"pipe {pp.id} references unknown node")
            continue
        if pp.start == pp.end:
            diag.append(f"pipe {pp.id} is a self-loop")
        degree[pp.start] += 1
        degree[pp.end] += 1
        if pp.k is None:
            for name, val in (("C", pp.C), ("length", pp.length), ("diameter", pp.diameter)):
                if not (np.isfinite(val) and val > 0):
                    diag.append(f"pipe {pp.id} has non-positive {name}")
        elif not pp.k > 0:
            diag.append(f"pipe {pp.id} has non-positive k")
    for nd in net.nodes:
        if nd.is_fixed and (nd.head is None or not np.isfinite(nd.head)):
            diag.append(f"fixed-head node {nd.id} has no finite head")
        if not nd.is_fixed and not np.isfinite(nd.demand):
            diag.append(f"node {nd.id} has non-finite demand")
    dangling = [v for v, deg in degree.items() if deg == 0]
    if dangling:
        diag.append(f"dangling nodes {sorted(dangling)}")
    # loop-eligible subgraph excludes constant-flow links
    edges = [(pp.start, pp.end) for pp in net.pipes if pp.fixed_flow is None]
    comps = _components(ids, edges)
    if len(comps) > 1:
        diag.append("disconnected: " + " | ".join(str(sorted(c)) for c in comps))
    eligible = len(edges)
    expected = eligible - len(ids) + len(comps)
    return ValidationReport(tuple(diag), expected, len(comps))


# ---------------------------------------------------------------------------
# JSON


def network_from_dict(data: Mapping) -> Network:
    try:
        nodes = []
        for raw in data["nodes"]:
            kind = raw.get("kind", DEMAND)
            if kind not in (DEMAND, FIXED_HEAD):
                raise NetworkError(f"node {raw.get('id')}: unknown kind {kind!r}")
            nodes.append(
                Node(
                    id=int(raw["id"]),
                    kind=kind,
                    demand=float(raw.get("demand_m3s", 0.0)),
                    head=None if raw.get("head_m") is None else float(raw["head_m"]),
                    elevation=float(raw.get("elevation_m", 0.0)),
                    boundary=raw.get("boundary", HEAD_KNOWN),
                    inflow=float(raw.get("inflow_m3s", 0.0)),
                )
            )
        pipes = []
        for raw in data["pipes"]:
            pipes.append(
                Pipe(
                    id=int(raw["id"]),
                    start=int(raw["from"]),
                    end=int(raw["to"]),
                    C=float(raw.get("C", 100.0)),
                    length=float(raw.get("length_m", 100.0)),
                    diameter=float(raw.get("diameter_m", 0.3)),
                    k=None if raw.get("k") is None else float(raw["k"]),
                    fixed_flow=None if raw.get("fixed_flow_m3s") is None else float(raw["fixed_flow_m3s"]),
                )
            )
    except KeyError as exc:
        raise NetworkError(f"missing field {exc.args[0]!r}") from None
    net = Network(tuple(nodes), tuple(pipes), float(data.get("exponent", DEFAULT_EXPONENT)), data.get("name", ""))
    for pp in net.pipes:
        pp.resistance()  # surfaces bad C/L/D early
    return net


def network_to_dict(net: Network) -> dict:
    nodes = []
    for nd in net.nodes:
        raw = {"id": nd.id, "kind": nd.kind}
        if nd.is_fixed:
            raw["head_m"] = nd.head
            raw["boundary"] = nd.boundary
            if nd.inflow:
                raw["inflow_m3s"] = nd.inflow
            if nd.demand:
                raw["demand_m3s"] = nd.demand
        else:
            raw["demand_m3s"] = nd.demand
        if nd.elevation:
            raw["elevation_m"] = nd.elevation
        nodes.append(raw)
    pipes = []
    for pp in net.pipes:
        raw = {"id": pp.id, "from": pp.start, "to": pp.end, "C": pp.C, "length_m": pp.length, "diameter_m": pp.diameter}
        if pp.k is not None:
            raw["k"] = pp.k
        if pp.fixed_flow is not None:
            raw["fixed_flow_m3s"] = pp.fixed_flow
        pipes.append(raw)
    out = {"exponent": net.exponent, "nodes": nodes, "pipes": pipes}
    if net.name:
        out["name"] = net.name
    return out


def load_network(path: str | Path) -> Network:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise NetworkError(f"invalid JSON in {path}: {exc}") from None
    return network_from_dict(data)


def save_network(net: Network, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(network_to_dict(net), fh, indent=1)
