"""Demand events, leak injection, extended-time runs and training-set generation."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .benchmarks import DESK34_HEAD_METERS, DIURNAL, desk34_eligible_pipes
from .estimator import (
    EstimatorOptions,
    HeadMeasurement,
    MeasurementSet,
    RegionMask,
    constrain_region,
    estimate,
    region_nodes,
)
from .network import DEMAND, INFLOW_KNOWN, Network, NetworkError, Node, Pipe
from .simulator import SimulationOptions, SimulationResult, base_flows, boundary_data, solve_cotree
from .topology import LoopSystem, SpanningTree, TopologyError, build_spanning_tree, trace_loops, update_for_reversed_flows
from .uncertainty import CLASystem, UncertaintySpec, em_limits

log = logging.getLogger(__name__)

RECTANGULAR, TRAPEZOIDAL, TRIANGULAR = "rectangular", "trapezoidal", "triangular"
SHAPES = (RECTANGULAR, TRAPEZOIDAL, TRIANGULAR)
RAMP_FRACTION = 0.25
HOUR = 3600.0


# ---------------------------------------------------------------------------
# demand events


@dataclass(frozen=True)
class DemandEvent:
    shape: str
    intensity: float  # peak flow, l/s
    duration: float  # s
    window: tuple[float, float] = (0.0, 86400.0)  # s since midnight
    count: int = 1
    name: str = ""

    def __post_init__(self) -> None:
        if self.shape not in SHAPES:
            raise ValueError(f"unknown event shape {self.shape!r}")
        if not self.intensity > 0:
            raise ValueError("intensity must be > 0")
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        if self.window[1] < self.window[0]:
            raise ValueError("window end precedes its start")
        if self.count < 0:
            raise ValueError("count must be >= 0")

    @property
    def volume(self) -> float:
        """Litres delivered by one occurrence."""
        I, T = self.intensity, self.duration
        if self.shape == RECTANGULAR:
            return I * T
        if self.shape == TRIANGULAR:
            return 0.5 * I * T
        return I * T * (1.0 - RAMP_FRACTION)

    def cumulative(self, tau: np.ndarray) -> np.ndarray:
        """Volume delivered between the event start and ``tau`` seconds later."""
        I, T = self.intensity, self.duration
        tau = np.clip(np.asarray(tau, dtype=float), 0.0, T)
        if self.shape == RECTANGULAR:
            return I * tau
        if self.shape == TRIANGULAR:
            half = 0.5 * T
            rise = I * tau**2 / T
            fall = 0.5 * I * T - I * (T - tau) ** 2 / T
            return np.where(tau <= half, rise, fall)
        r = RAMP_FRACTION * T
        total = I * (T - r)
        rise = I * tau**2 / (2 * r)
        flat = 0.5 * I * r + I * (tau - r)
        fall = total - I * (T - tau) ** 2 / (2 * r)
        return np.where(tau <= r, rise, np.where(tau <= T - r, flat, fall))


@dataclass
class DemandProfile:
    step: float
    volumes: np.ndarray  # litres per step
    starts: list  # (event index, start time) per occurrence

    @property
    def rates(self) -> np.ndarray:
        """Mean flow per step, l/s."""
        return self.volumes / self.step

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.volumes)) * self.step


def demand_profile(events: Sequence[DemandEvent], horizon: float, step: float, seed: int = 0) -> DemandProfile:
    """Spread each event ``count`` times at random starts inside its window.

    Start times are uniform on ``[w0, w1 - duration]`` (or ``w0`` when the
    event is longer than its window); coincident events add up.  Each step's
    volume is the exact integral of the piecewise-linear flow over the step.
    """
    if not step > 0:
        raise ValueError("step must be > 0")
    n_steps = horizon / step
    if abs(n_steps - round(n_steps)) > 1e-9:
        raise ValueError("horizon must be a multiple of step")
    n_steps = int(round(n_steps))
    rng = np.random.default_rng(seed)
    edges = np.arange(n_steps + 1) * step
    vol = np.zeros(n_steps)
    starts = []
    for ei, ev in enumerate(events):
        lo, hi = ev.window
        hi = max(lo, hi - ev.duration)
        for _ in range(ev.count):
            t0 = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
            starts.append((ei, t0))
            cum = ev.cumulative(edges - t0)
            vol += np.diff(cum)
    return DemandProfile(step, vol, starts)


_NIGHT, _MORNING, _AFTERNOON, _EVENING = (0.0, 21600.0), (21600.0, 43200.0), (43200.0, 64800.0), (64800.0, 86400.0)
_WINDOWS = (_NIGHT, _MORNING, _AFTERNOON, _EVENING)

# (name, shape, intensity l/s, duration s, counts per night/morning/afternoon/evening)
HOUSEHOLD_TABLE = (
    ("sink", RECTANGULAR, 0.15, 120.0, (2, 5, 3, 5)),
    ("sink", TRAPEZOIDAL, 0.10, 60.0, (2, 3, 2, 4)),
    ("shower", RECTANGULAR, 0.20, 480.0, (1, 5, 0, 3)),
    ("toilet", TRIANGULAR, 0.30, 8.0, (4, 14, 2, 8)),
    ("leakage", RECTANGULAR, 0.0005, 21600.0, (2, 2, 2, 2)),
    ("leakage", TRAPEZOIDAL, 0.02, 30.0, (3, 4, 0, 4)),
)


def household_events() -> list[DemandEvent]:
    """A six-person household as a list of windowed events."""
    out = []
    for name, shape, I, T, counts in HOUSEHOLD_TABLE:
        for win, c in zip(_WINDOWS, counts):
            if c:
                out.append(DemandEvent(shape, I, T, win, c, name))
    return out


def events_from_dicts(items: Iterable[Mapping]) -> list[DemandEvent]:
    return [
        DemandEvent(
            it["shape"],
            float(it["intensity_lps"]),
            float(it["duration_s"]),
            tuple(it.get("window_s", (0.0, 86400.0))),
            int(it.get("count", 1)),
            it.get("name", ""),
        )
        for it in items
    ]


# ---------------------------------------------------------------------------
# leak injection


@dataclass(frozen=True)
class LeakScenario:
    pipe: int
    magnitude: float  # m3/s

    def __post_init__(self) -> None:
        if self.magnitude < 0:
            raise ValueError("leak magnitude must be >= 0")


@dataclass(frozen=True)
class InjectedLeak:
    net: Network
    tree: SpanningTree
    loops: LoopSystem
    node: int  # id of the new leak node
    new_pipe: int  # id of the downstream half
    magnitude: float

    def demands(self, d: Sequence[float]) -> np.ndarray:
        """Extend a demand vector (old node order) with the leak node."""
        return np.append(np.asarray(d, dtype=float), self.magnitude)


def _split_pipe(pp: Pipe, node_id: int, new_id: int) -> tuple[Pipe, Pipe]:
    if pp.k is not None:
        half = dict(k=pp.k / 2.0)
        return replace(pp, end=node_id, **half), Pipe(new_id, node_id, pp.end, pp.C, pp.length, pp.diameter, pp.k / 2.0)
    L = pp.length / 2.0
    return replace(pp, end=node_id, length=L), Pipe(new_id, node_id, pp.end, pp.C, L, pp.diameter)


def inject_leak(net: Network, tree: SpanningTree, loops: LoopSystem, leak: LeakScenario) -> InjectedLeak:
    """Split the leak pipe at its midpoint around a new demand node.

    Existing labels, loops and orientations are reused: a tree pipe gets the
    new node inserted into the label order just above its child end, a chord
    gets the new node appended as a leaf hanging off its start end.
    """
    pp = net.pipe(leak.pipe)
    if pp.fixed_flow is not None:
        raise NetworkError(f"pipe {leak.pipe} is a constant-flow link; leaks must sit on ordinary pipes")
    m_id = max(net.node_ids) + 1
    new_id = max(net.pipe_ids) + 1
    first, second = _split_pipe(pp, m_id, new_id)
    nodes = net.nodes + (Node(m_id, DEMAND, demand=leak.magnitude),)
    pipes = tuple(first if q.id == pp.id else q for q in net.pipes) + (second,)
    new_net = Network(nodes, pipes, net.exponent, net.name)

    n = tree.n
    col = tree.pipe_column[pp.id]
    a, b = int(tree.col_start[col]), int(tree.col_end[col])
    orient = int(tree.col_orient[col])
    # pipe ids of the halves in column direction: (a -> m) and (m -> b)
    half_a, half_b = (pp.id, new_id) if orient > 0 else (new_id, pp.id)
    k_of = {pp.id: first.resistance(), new_id: second.resistance()}

    if col < n:
        j = col
        child_is_end = b == j
        shift = lambda x: x + 1 if x >= j else x  # noqa: E731
        a2, b2 = shift(a), shift(b)
        # column for m (label j) touches the parent; column j+1 touches the old child
        if child_is_end:
            col_m = (a2, j, half_a)
            col_c = (j, b2, half_b)
        else:
            col_m = (j, b2, half_b)
            col_c = (a2, j, half_a)
        starts = [shift(int(x)) for x in tree.col_start]
        ends = [shift(int(x)) for x in tree.col_end]
        pipes_c = list(tree.col_pipe)
        orients = list(tree.col_orient)
        ks = list(tree.col_k)
        starts[j], ends[j], pipes_c[j], ks[j] = col_c[0], col_c[1], col_c[2], k_of[col_c[2]]
        starts.insert(j, col_m[0])
        ends.insert(j, col_m[1])
        pipes_c.insert(j, col_m[2])
        orients.insert(j, orient)
        ks.insert(j, k_of[col_m[2]])
        parent = [shift(int(x)) for x in tree.parent]
        par_m = parent[j]
        parent[j] = j  # old child now hangs off m
        parent.insert(j, par_m)
        order = tree.order[:j] + (m_id,) + tree.order[j:]
        M = np.insert(loops.M_lp, j, loops.M_lp[:, j], axis=1)
    else:
        shift = lambda x: n + 1 if x == n else x  # noqa: E731
        a2, b2 = shift(a), shift(b)
        starts = [shift(int(x)) for x in tree.col_start]
        ends = [shift(int(x)) for x in tree.col_end]
        pipes_c = list(tree.col_pipe)
        orients = list(tree.col_orient)
        ks = list(tree.col_k)
        # chord keeps (m -> b); the (a -> m) half becomes tree column n
        starts[col], ends[col], pipes_c[col], ks[col] = n, b2, half_b, k_of[half_b]
        starts.insert(n, a2)
        ends.insert(n, n)
        pipes_c.insert(n, half_a)
        orients.insert(n, orient)
        ks.insert(n, k_of[half_a])
        parent = [shift(int(x)) for x in tree.parent] + [a2]
        order = tree.order + (m_id,)
        M = np.insert(loops.M_lp, n, loops.M_lp[:, col], axis=1)

    new_tree = SpanningTree(
        root=tree.root,
        order=order,
        parent=np.array(parent, dtype=int),
        col_pipe=np.array(pipes_c, dtype=int),
        col_start=np.array(starts, dtype=int),
        col_end=np.array(ends, dtype=int),
        col_orient=np.array(orients, dtype=int),
        col_k=np.array(ks, dtype=float),
    )
    lab = new_tree.label
    n2 = new_tree.n
    s = len(loops.pseudo_nodes)
    P = np.zeros((n2, s))
    for i, v in enumerate(loops.pseudo_nodes):
        P[lab[v], i] = -1.0
    A = np.hstack([new_tree.T, new_tree.C, P])
    if np.any(A @ M.T != 0):
        raise TopologyError("leak insertion broke loop orthogonality")
    new_loops = LoopSystem(tree=new_tree, pseudo_nodes=loops.pseudo_nodes, M_lp=M, A=A)
    return InjectedLeak(new_net, new_tree, new_loops, m_id, new_id, leak.magnitude)


# ---------------------------------------------------------------------------
# extended-time simulation


@dataclass
class HourResult:
    hour: int
    result: SimulationResult
    reversed_pipes: tuple[int, ...]


def extended_time_simulation(
    net: Network,
    tree: SpanningTree,
    loops: LoopSystem,
    demands: Sequence[Sequence[float]],
    heads: Sequence[Mapping[int, float]] | None = None,
    opts: SimulationOptions | None = None,
) -> list[HourResult]:
    """Steady-state solve per hour on one spanning tree.

    Each hour recomputes the idle-chord tree flows; tree columns whose flow
    runs against their current orientation are flipped before solving.
    Non-converged hours are kept with ``converged=False``.
    """
    out = []
    for h, d in enumerate(demands):
        net_h = net.with_values(demands=np.asarray(d, dtype=float), heads=heads[h] if heads else None)
        bd = boundary_data(net_h, loops)
        Q0 = base_flows(loops, bd)
        neg = [int(tree.col_pipe[j]) for j in range(tree.n) if Q0[j] < 0]
        if neg:
            tree, loops = update_for_reversed_flows(tree, loops, neg)
        res = solve_cotree(net_h, tree, loops, opts=opts)
        if not res.converged:
            log.warning("hour %d: %s", h + 1, res.message)
        out.append(HourResult(h + 1, res, tuple(neg)))
    return out


def hourly_demands(net: Network, multipliers: Sequence[float] = DIURNAL) -> list[np.ndarray]:
    """Demand vectors per hour: base demands times a diurnal multiplier."""
    base = net.demands()
    return [base * m for m in multipliers]


# ---------------------------------------------------------------------------
# training set


@dataclass(frozen=True)
class Scaling:
    """Affine map from physical units to [0, 1] per dimension."""

    lo: np.ndarray
    hi: np.ndarray

    def scale(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = (x - self.lo) / (self.hi - self.lo)
        if np.any((y < 0) | (y > 1)):
            log.warning("%d values outside the scaling range were clamped", int(np.sum((y < 0) | (y > 1))))
        return np.clip(y, 0.0, 1.0)

    def unscale(self, y: np.ndarray) -> np.ndarray:
        return self.lo + np.asarray(y, dtype=float) * (self.hi - self.lo)


HEAD_RANGE = (2.0, 50.0)
INFLOW_RANGE = (-0.2, 0.2)
DD_RANGE = (-0.04, 0.04)
# noisy large-leak cells can converge linearly and need a few hundred steps
DATASET_MAX_ITER = 1000
DD_MODE, STATE_MODE = "dd", "state"


@dataclass(frozen=True)
class MeasurementConfig:
    """Meter placement and the accuracies used for estimation and CLA."""

    head_meters: tuple[int, ...] = DESK34_HEAD_METERS
    head_accuracy: float = 0.1
    inflow_accuracy: float = 0.01
    fixed_head_accuracy: float = 0.01
    variability: float = 0.1
    radius: int | None = None
    weighted: bool = False

    def spec(self) -> UncertaintySpec:
        return UncertaintySpec(
            demand_variability=self.variability,
            fixed_head_accuracy=self.fixed_head_accuracy,
            inflow_accuracy=self.inflow_accuracy,
        )


@dataclass
class DatasetRow:
    hour: int
    label: int
    lower: np.ndarray
    upper: np.ndarray
    leak_pipe: int  # 0 for the normal pattern
    leak_level: float


@dataclass
class TrainingDataset:
    dims: list[str]
    rows: list[DatasetRow]
    mode: str
    class_names: dict[int, str]
    failures: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def lower(self) -> np.ndarray:
        return np.array([r.lower for r in self.rows])

    @property
    def upper(self) -> np.ndarray:
        return np.array([r.upper for r in self.rows])

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.rows], dtype=int)

    @property
    def hours(self) -> np.ndarray:
        return np.array([r.hour for r in self.rows], dtype=int)


NORMAL_CLASS = 1


def class_table(pipes: Sequence[int]) -> dict[int, str]:
    out = {NORMAL_CLASS: "normal"}
    for i, p in enumerate(pipes):
        out[NORMAL_CLASS + 1 + i] = f"pipe_{p}"
    return out


def pattern_dims(net: Network, mode: str) -> list[str]:
    if mode == DD_MODE:
        return [f"dd_{nd.id}" for nd in net.nodes if not nd.is_fixed or nd.boundary == INFLOW_KNOWN]
    if mode == STATE_MODE:
        return [f"head_{nd.id}" for nd in net.nodes if not nd.is_fixed] + [
            f"inflow_{nd.id}" for nd in net.nodes if nd.is_fixed
        ]
    raise ValueError(f"unknown pattern mode {mode!r}")


def pattern_scaling(dims: Sequence[str]) -> Scaling:
    lo, hi = [], []
    for name in dims:
        rng = DD_RANGE if name.startswith("dd_") else HEAD_RANGE if name.startswith("head_") else INFLOW_RANGE
        lo.append(rng[0])
        hi.append(rng[1])
    return Scaling(np.array(lo), np.array(hi))


@dataclass
class _Context:
    net: Network
    tree: SpanningTree
    loops: LoopSystem
    cfg: MeasurementConfig
    mode: str
    dims: list[str]
    sim_opts: SimulationOptions
    est_opts: EstimatorOptions


def _measure(ctx: _Context, net_h: Network, sim: SimulationResult, rng: np.random.Generator | None) -> MeasurementSet:
    """Readings a field crew would have: meters from the faulted state, predicted demands."""
    cfg = ctx.cfg
    hm = []
    for nid in cfg.head_meters:
        v = float(sim.heads[net_h.node_pos(nid)])
        if rng is not None:
            v += rng.uniform(-cfg.head_accuracy, cfg.head_accuracy)
        hm.append(HeadMeasurement(nid, v, cfg.head_accuracy))
    net_m = net_h
    if rng is not None:
        noisy = {}
        for nd in net_h.nodes:
            if nd.is_fixed and nd.boundary == INFLOW_KNOWN:
                noisy[nd.id] = nd.inflow * (1.0 + rng.uniform(-cfg.inflow_accuracy, cfg.inflow_accuracy))
        net_m = net_h.with_values(inflows=noisy)
    return MeasurementSet.from_network(
        net_m, hm, (), cfg.variability, cfg.fixed_head_accuracy, cfg.inflow_accuracy
    )


def _pattern(ctx: _Context, net_h: Network, meas: MeasurementSet) -> tuple[np.ndarray, np.ndarray]:
    mask = RegionMask.full(ctx.tree)
    if ctx.cfg.radius is not None:
        mask = constrain_region(mask, region_nodes(ctx.tree, meas, net_h, ctx.cfg.radius))
    system = CLASystem(net_h, ctx.tree, ctx.loops, mask, ctx.est_opts)
    est = system.run(meas)
    if not est.converged:
        raise RuntimeError(f"estimate: {est.message}")
    lim = em_limits(system, meas, ctx.cfg.spec(), "both", baseline=est)
    names = system.names
    x = est.state_vector(net_h)
    idx = [names.index(d) for d in ctx.dims]
    centre, half = x[idx], lim.xcl[idx]
    return centre - half, centre + half


def _cell(ctx: _Context, hour: int, d: np.ndarray, pipe: int, level: float, rng) -> tuple[np.ndarray, np.ndarray]:
    net_h = ctx.net.with_values(demands=d)
    if pipe:
        inj = inject_leak(net_h, ctx.tree, ctx.loops, LeakScenario(pipe, level))
        sim = solve_cotree(inj.net, inj.tree, inj.loops, opts=ctx.sim_opts)
    else:
        sim = solve_cotree(net_h, ctx.tree, ctx.loops, opts=ctx.sim_opts)
    if not sim.converged:
        raise RuntimeError(f"simulate: {sim.message}")
    net_s = inj.net if pipe else net_h
    meas = _measure(ctx, net_s, sim, rng)
    # the estimator only knows the unfaulted model
    meas = replace(meas, demands={nid: v for nid, v in meas.demands.items() if nid in set(net_h.node_ids)})
    return _pattern(ctx, net_h, meas)


def _hour_rows(args) -> tuple[list, list]:
    ctx, hour, d, pipes, levels, classes, noise_seed = args
    rng = np.random.default_rng(noise_seed) if noise_seed is not None else None
    scaling = pattern_scaling(ctx.dims)
    rows, fails = [], []
    cells = [(0, 0.0)] + [(p, lv) for p in pipes for lv in levels]
    for pipe, level in cells:
        try:
            lo, up = _cell(ctx, hour, d, pipe, level, rng)
        except Exception as exc:  # recorded and excluded
            fails.append((hour, pipe, level, str(exc)))
            continue
        label = NORMAL_CLASS if pipe == 0 else classes[pipe]
        rows.append(DatasetRow(hour, label, scaling.scale(lo), scaling.scale(up), pipe, level))
    return rows, fails


def generate_training_set(
    net: Network,
    leak_levels: Sequence[float],
    hours: int | Sequence[int] = 24,
    cfg: MeasurementConfig = MeasurementConfig(),
    pipes: Sequence[int] | None = None,
    mode: str = DD_MODE,
    noise_seed: int | None = None,
    jobs: int = 1,
    multipliers: Sequence[float] = DIURNAL,
    root: int | None = None,
) -> TrainingDataset:
    """Labelled patterns for every (hour, pipe, level) plus one normal per hour.

    ``hours`` is a count (hours 1..H) or an explicit list of 1-based hours.
    With ``noise_seed`` the meters read uniformly distributed errors within
    their accuracy, giving held-out replicates of a noise-free set.
    """
    tree = build_spanning_tree(net, root)
    loops = trace_loops(tree, net)
    if pipes is None:
        pipes = desk34_eligible_pipes(net)
    pipes = list(pipes)
    hour_list = list(range(1, hours + 1)) if isinstance(hours, int) else list(hours)
    dims = pattern_dims(net, mode)
    classes = {p: NORMAL_CLASS + 1 + i for i, p in enumerate(pipes)}
    ctx = _Context(
        net, tree, loops, cfg, mode, dims, SimulationOptions(tol=1e-8), EstimatorOptions(weighted=cfg.weighted, max_iter=DATASET_MAX_ITER)
    )
    base = net.demands()
    tasks = []
    for h in hour_list:
        seed = None if noise_seed is None else [noise_seed, h]
        tasks.append((ctx, h, base * multipliers[(h - 1) % len(multipliers)], pipes, list(leak_levels), classes, seed))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            parts = list(ex.map(_hour_rows, tasks))
    else:
        parts = [_hour_rows(t) for t in tasks]
    rows, fails = [], []
    for r, f in parts:
        rows += r
        fails += f
    if fails:
        log.warning("%d dataset cells failed and were excluded", len(fails))
    return TrainingDataset(dims, rows, mode, class_table(pipes), fails)


def expected_rows(hours: int, pipes: int, levels: int) -> int:
    return hours * (pipes * levels + 1)


def write_dataset_csv(ds: TrainingDataset, path, header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header.rstrip("\n") + "\n")
        w = csv.writer(fh)
        w.writerow(
            ["hour", "label"]
            + [f"lower_{d}" for d in ds.dims]
            + [f"upper_{d}" for d in ds.dims]
            + ["leak_pipe", "leak_level"]
        )
        for r in ds.rows:
            w.writerow(
                [r.hour, r.label]
                + [repr(float(v)) for v in r.lower]
                + [repr(float(v)) for v in r.upper]
                + [r.leak_pipe, repr(float(r.leak_level))]
            )


def read_dataset_csv(path) -> TrainingDataset:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rd = csv.reader(lines)
    head = next(rd)
    N = (len(head) - 4) // 2
    dims = [h[len("lower_") :] for h in head[2 : 2 + N]]
    rows = []
    for rec in rd:
        vals = np.array(rec[2 : 2 + 2 * N], dtype=float)
        rows.append(DatasetRow(int(rec[0]), int(rec[1]), vals[:N], vals[N:], int(rec[-2]), float(rec[-1])))
    pipes = sorted({r.leak_pipe: r.label for r in rows if r.leak_pipe}.items(), key=lambda kv: kv[1])
    classes = {NORMAL_CLASS: "normal"}
    classes.update({lbl: f"pipe_{p}" for p, lbl in pipes})
    mode = DD_MODE if all(d.startswith("dd_") for d in dims) else STATE_MODE
    return TrainingDataset(dims, rows, mode, classes)


# ---------------------------------------------------------------------------
# evaluation


def evaluate_misclassification(
    classify: Callable[[np.ndarray, np.ndarray], Sequence[tuple[int, float]]],
    dataset: TrainingDataset,
    top_k: Sequence[int] = (1, 2, 3, 5),
) -> dict[int, float]:
    """Fraction of patterns whose true label is missing from the top-k ranking.

    ``classify(lower, upper)`` returns ``(class, membership)`` pairs ranked
    best first.
    """
    if not len(dataset):
        return {k: 0.0 for k in top_k}
    misses = {k: 0 for k in top_k}
    for r in dataset.rows:
        ranked = [c for c, _m in classify(r.lower, r.upper)]
        for k in top_k:
            if r.label not in ranked[:k]:
                misses[k] += 1
    return {k: misses[k] / len(dataset) for k in top_k}


def fault_pattern(
    net: Network,
    leak: LeakScenario | None,
    hour: int = 9,
    cfg: MeasurementConfig = MeasurementConfig(),
    mode: str = DD_MODE,
    multipliers: Sequence[float] = DIURNAL,
    noise_seed: int | None = None,
    root: int | None = None,
) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Scaled pattern for one operating hour, with or without a leak."""
    tree = build_spanning_tree(net, root)
    loops = trace_loops(tree, net)
    dims = pattern_dims(net, mode)
    ctx = _Context(
        net, tree, loops, cfg, mode, dims, SimulationOptions(tol=1e-8), EstimatorOptions(weighted=cfg.weighted, max_iter=DATASET_MAX_ITER)
    )
    d = net.demands() * multipliers[(hour - 1) % len(multipliers)]
    rng = np.random.default_rng([noise_seed, hour]) if noise_seed is not None else None
    pipe, level = (leak.pipe, leak.magnitude) if leak else (0, 0.0)
    lo, up = _cell(ctx, hour, d, pipe, level, rng)
    sc = pattern_scaling(dims)
    return dims, sc.scale(lo), sc.scale(up)
