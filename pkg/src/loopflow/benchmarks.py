"""Bundled benchmark networks and a random network generator.

``desk34`` is a constructed 34-node, 46-pipe network: 26 demand nodes on a
meshed grid, eight fixed-head nodes (27-34) and one constant-flow link.  Node
30 is the main source and 31 a second head-known reservoir; the other
fixed-head nodes deliver known inflows.
"""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import numpy as np

from .network import DEMAND, FIXED_HEAD, HEAD_KNOWN, INFLOW_KNOWN, Network, Node, Pipe, network_from_dict

LPS = 1e-3  # m3/s per l/s


def triangle(k=(10.0, 20.0, 40.0), demands=(0.02, 0.03), head=50.0, exponent=1.852) -> Network:
    """Reservoir 0 feeding nodes 1 and 2; pipes 0-1, 1-2, 0-2."""
    nodes = (
        Node(0, FIXED_HEAD, head=head),
        Node(1, DEMAND, demand=demands[0]),
        Node(2, DEMAND, demand=demands[1]),
    )
    pipes = (Pipe(1, 0, 1, k=k[0]), Pipe(2, 1, 2, k=k[1]), Pipe(3, 0, 2, k=k[2]))
    return Network(nodes, pipes, exponent, "triangle")


def parallel_pipes(k=25.0, demand=0.05, head=40.0, exponent=1.852) -> Network:
    """Two identical pipes between a reservoir and one demand node."""
    nodes = (Node(0, FIXED_HEAD, head=head), Node(1, DEMAND, demand=demand))
    pipes = (Pipe(1, 0, 1, k=k), Pipe(2, 0, 1, k=k))
    return Network(nodes, pipes, exponent, "parallel")


def gofman_rodeh() -> Network:
    """Seven nodes, nine pipes, root 7.

    Resistances are chosen so the ordered depth-first search visits nodes
    1..6 in that order.  Tree pipes are e1..e6 (pipe ``j`` enters node ``j``)
    and the chords are e7 = 6-7, e8 = 5-1 and e9 = 3-7.
    """
    nodes = [Node(i, DEMAND, demand=0.01) for i in range(1, 7)] + [Node(7, FIXED_HEAD, head=60.0)]
    spec = [
        (1, 7, 1, 10.0),
        (2, 1, 2, 10.0),
        (3, 2, 3, 10.0),
        (4, 2, 4, 20.0),
        (5, 4, 5, 10.0),
        (6, 5, 6, 10.0),
        (7, 6, 7, 90.0),
        (8, 5, 1, 80.0),
        (9, 3, 7, 70.0),
    ]
    pipes = [Pipe(pid, a, b, k=k) for pid, a, b, k in spec]
    return Network(tuple(nodes), tuple(pipes), 1.852, "gofman-rodeh")


def random_network(
    rng: np.random.Generator,
    n_nodes: int | None = None,
    n_loops: int | None = None,
    n_fixed: int = 1,
    exponent: float = 1.852,
    inflow_known: bool = False,
) -> Network:
    """Connected random network with the requested loop count.

    The first ``n_fixed`` nodes are reservoirs; the first of them has the
    highest head.  With ``inflow_known`` the last reservoir delivers a fixed
    inflow instead of holding its head.
    """
    if n_nodes is None:
        n_nodes = int(rng.integers(3, 41))
    max_loops = n_nodes * (n_nodes - 1) // 2 - (n_nodes - 1)
    if n_loops is None:
        n_loops = int(rng.integers(1, 11))
    n_loops = min(n_loops, max_loops)
    perm = rng.permutation(n_nodes)
    edges = set()
    for i in range(1, n_nodes):
        j = int(rng.integers(0, i))
        edges.add((min(perm[i], perm[j]), max(perm[i], perm[j])))
    while len(edges) < n_nodes - 1 + n_loops:
        a, b = rng.choice(n_nodes, size=2, replace=False)
        edges.add((min(a, b), max(a, b)))
    nodes = []
    for i in range(n_nodes):
        if i < n_fixed:
            head = 100.0 if i == 0 else float(rng.uniform(90.0, 99.0))
            mode = INFLOW_KNOWN if inflow_known and i == n_fixed - 1 and i > 0 else HEAD_KNOWN
            inflow = float(rng.uniform(0.002, 0.01)) if mode == INFLOW_KNOWN else 0.0
            nodes.append(Node(i, FIXED_HEAD, head=head, boundary=mode, inflow=inflow))
        else:
            nodes.append(Node(i, DEMAND, demand=float(rng.uniform(0.0, 0.01))))
    pipes = []
    for pid, (a, b) in enumerate(sorted(edges), start=1):
        if rng.random() < 0.5:
            a, b = b, a
        pipes.append(
            Pipe(
                pid,
                int(a),
                int(b),
                C=float(rng.uniform(80, 140)),
                length=float(rng.uniform(100, 1000)),
                diameter=float(rng.choice([0.15, 0.2, 0.25, 0.3, 0.4])),
            )
        )
    return Network(tuple(nodes), tuple(pipes), exponent, "random")


# ---------------------------------------------------------------------------
# desk34

DESK34_HEAD_METERS = (1, 2, 4, 8, 11, 15, 17, 19, 22, 29)
DESK34_INFLOW_NODES = (27, 28, 29, 32, 33, 34)
DESK34_PUMP = 46

# 24 hourly multipliers on base demand (hour 1 = 00:00-01:00)
DIURNAL = np.array(
    [0.55, 0.50, 0.48, 0.48, 0.52, 0.65, 0.90, 1.15, 1.25, 1.20, 1.10, 1.05,
     1.05, 1.00, 0.95, 0.95, 1.00, 1.10, 1.20, 1.25, 1.15, 0.95, 0.80, 0.65]
)


def build_desk34() -> Network:
    """Construct desk34 from its layout rules (the bundled JSON is this output)."""
    rows = [[1, 2, 3, 4, 5, 6], [7, 8, 9, 10, 11, 12], [13, 14, 15, 16, 17, 18], [19, 20, 21, 22, 23, 24], [25, 26]]
    pos = {}
    for r, row in enumerate(rows):
        for c, nid in enumerate(row):
            pos[nid] = (500.0 * c, -500.0 * r)
    mesh = []
    for row in rows:
        mesh += list(zip(row[:-1], row[1:]))
    mesh += [(1, 7), (3, 9), (5, 11), (6, 12), (7, 13), (8, 14), (10, 16), (12, 18),
             (13, 19), (15, 21), (17, 23), (18, 24), (19, 25), (20, 26)]
    base_lps = {
        1: 6, 2: 8, 3: 7, 4: 9, 5: 6, 6: 5, 7: 10, 8: 12, 9: 11, 10: 12, 11: 9, 12: 7, 13: 8,
        14: 13, 15: 14, 16: 12, 17: 10, 18: 8, 19: 9, 20: 11, 21: 12, 22: 10, 23: 8, 24: 6, 25: 5, 26: 6,
    }
    nodes = [Node(i, DEMAND, demand=base_lps[i] * LPS) for i in range(1, 27)]
    inflow_lps = {27: 25, 28: 30, 29: 30, 32: 12, 33: 20, 34: 18}
    heads = {27: 0.0, 28: 0.0, 29: 0.0, 30: 60.0, 31: 56.0, 32: 0.0, 33: 0.0, 34: 0.0}
    for nid in range(27, 35):
        if nid in inflow_lps:
            nodes.append(Node(nid, FIXED_HEAD, head=heads[nid], boundary=INFLOW_KNOWN, inflow=inflow_lps[nid] * LPS))
        else:
            nodes.append(Node(nid, FIXED_HEAD, head=heads[nid], boundary=HEAD_KNOWN))
    diam_main = {(7, 8): 0.3, (8, 9): 0.25, (9, 10): 0.25, (10, 11): 0.2, (8, 14): 0.25, (10, 16): 0.25,
                 (14, 15): 0.2, (15, 16): 0.2, (16, 17): 0.2, (13, 14): 0.2, (1, 7): 0.2, (7, 13): 0.2}
    pipes = []
    pid = 0
    for a, b in mesh:
        pid += 1
        ax, ay = pos[a]
        bx, by = pos[b]
        length = float(np.hypot(ax - bx, ay - by))
        D = diam_main.get((a, b), 0.2 if (a + b) % 3 else 0.15)
        C = 110.0 if pid % 2 else 100.0
        pipes.append(Pipe(pid, a, b, C=C, length=length, diameter=D))
    extra = [
        (30, 8, 600.0, 0.35),
        (30, 10, 700.0, 0.3),
        (31, 16, 500.0, 0.25),
        (27, 5, 300.0, 0.2),
        (28, 4, 300.0, 0.2),
        (29, 19, 300.0, 0.2),
        (32, 20, 300.0, 0.15),
        (33, 12, 300.0, 0.2),
        (34, 1, 300.0, 0.2),
        (33, 29, 400.0, 0.2),
    ]
    for a, b, length, D in extra:
        pid += 1
        pipes.append(Pipe(pid, a, b, C=120.0, length=length, diameter=D))
    pid += 1
    pipes.append(Pipe(pid, 29, 18, C=120.0, length=200.0, diameter=0.25, fixed_flow=10 * LPS))
    assert pid == DESK34_PUMP
    return Network(tuple(nodes), tuple(pipes), 1.852, "desk34")


def desk34_eligible_pipes(net: Network) -> list[int]:
    """Pipes that may carry a leak: the mesh plus the two reservoirs' mains."""
    fixed = set(DESK34_INFLOW_NODES)
    return [pp.id for pp in net.pipes if pp.fixed_flow is None and pp.start not in fixed and pp.end not in fixed]


@lru_cache(maxsize=None)
def _bundled(name: str) -> str:
    return resources.files("loopflow").joinpath("data", f"{name}.json").read_text()


def load_bundled(name: str) -> Network:
    """Load a network shipped in ``loopflow/data`` (``desk34``, ``triangle``, ...)."""
    return network_from_dict(json.loads(_bundled(name)))


def desk34() -> Network:
    return load_bundled("desk34")
