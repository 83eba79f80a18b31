"""Confidence limits on state estimates under bounded measurement errors.

Three methods:

* ESM: finite-difference sensitivity matrix from one estimator run per
  measurement, limits ``sum_j |S_ij| dz_j``;
* EM: a single extra run with every measurement pushed to the same side of
  its error box, limits ``|x1 - x_hat|``;
* loop sensitivity: a linearisation through the loop Jacobian, kept as a
  diagnostic because it yields skewed limits.

State vectors are ``[heads (all nodes), fixed-head inflows, demand
variations]`` as produced by :meth:`StateEstimate.state_vector`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .estimator import (
    EstimatorOptions,
    FixedHeadMode,
    FlowMeasurement,
    HeadMeasurement,
    MeasurementSet,
    RegionMask,
    StateEstimate,
    estimate,
    state_names,
)
from .network import HEAD_KNOWN, INFLOW_KNOWN, Network
from .simulator import (
    SimulationOptions,
    base_flows,
    boundary_data,
    column_head_losses,
    loop_jacobian,
    recover_heads,
    solve_cotree,
)
from .topology import LoopSystem, SpanningTree

ESM, EM, LOOP_SENS = "ESM", "EM", "LOOP_SENS"


class CLAError(RuntimeError):
    pass


@dataclass(frozen=True)
class UncertaintySpec:
    demand_variability: float = 0.2
    head_meas_accuracy: float | None = None  # None: each meter's own accuracy
    flow_meas_accuracy: float | None = None
    flow_accuracy_relative: bool = False
    fixed_head_accuracy: float = 0.01
    inflow_accuracy: float = 0.01

    def __post_init__(self) -> None:
        for name in ("demand_variability", "head_meas_accuracy", "flow_meas_accuracy", "fixed_head_accuracy", "inflow_accuracy"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class ConfidenceLimits:
    names: list[str]
    estimate: np.ndarray
    lower: np.ndarray  # half-width below the estimate
    upper: np.ndarray  # half-width above
    method: str
    runs: int = 0
    flagged: list = field(default_factory=list)
    extra: dict = field(default_factory=dict, repr=False)

    @property
    def xcl(self) -> np.ndarray:
        return np.maximum(self.lower, self.upper)

    def get(self, name: str) -> float:
        return float(self.xcl[self.names.index(name)])


@dataclass
class CLASystem:
    """Network, topology and estimator settings shared by all CLA runs."""

    net: Network
    tree: SpanningTree
    loops: LoopSystem
    mask: RegionMask | None = None
    opts: EstimatorOptions = EstimatorOptions()
    runs: int = 0

    def run(self, meas: MeasurementSet) -> StateEstimate:
        self.runs += 1
        return estimate(self.net, self.tree, self.loops, meas, self.mask, self.opts)

    @property
    def names(self) -> list[str]:
        return state_names(self.net)


# ---------------------------------------------------------------------------
# measurement vector


@dataclass(frozen=True)
class MeasurementVector:
    keys: list  # (kind, id) pairs
    z: np.ndarray
    dz: np.ndarray


def measurement_vector(meas: MeasurementSet, spec: UncertaintySpec) -> MeasurementVector:
    keys, z, dz = [], [], []
    for nid in sorted(meas.demands):
        v = meas.demands[nid]
        keys.append(("demand", nid))
        z.append(v)
        dz.append(spec.demand_variability * abs(v))
    for nid in sorted(meas.fixed):
        mode = meas.fixed[nid]
        keys.append((mode.kind, nid))
        z.append(mode.value)
        if mode.kind == HEAD_KNOWN:
            dz.append(spec.fixed_head_accuracy)
        else:
            dz.append(spec.inflow_accuracy * abs(mode.value))
    for i, m in enumerate(meas.head_meas):
        keys.append(("head_meas", i))
        z.append(m.value)
        dz.append(m.accuracy if spec.head_meas_accuracy is None else spec.head_meas_accuracy)
    for i, m in enumerate(meas.flow_meas):
        keys.append(("flow_meas", i))
        z.append(m.value)
        acc = m.accuracy if spec.flow_meas_accuracy is None else spec.flow_meas_accuracy
        dz.append(acc * abs(m.value) if spec.flow_accuracy_relative else acc)
    return MeasurementVector(keys, np.array(z, dtype=float), np.array(dz, dtype=float))


def with_values(meas: MeasurementSet, keys: Sequence, values: np.ndarray) -> MeasurementSet:
    """Measurement set with the entries named by ``keys`` replaced."""
    demands = dict(meas.demands)
    fixed = dict(meas.fixed)
    hm = list(meas.head_meas)
    fm = list(meas.flow_meas)
    for (kind, key), v in zip(keys, values):
        v = float(v)
        if kind == "demand":
            demands[key] = v
        elif kind in (HEAD_KNOWN, INFLOW_KNOWN):
            fixed[key] = replace(fixed[key], value=v)
        elif kind == "head_meas":
            hm[key] = replace(hm[key], value=v)
        elif kind == "flow_meas":
            fm[key] = replace(fm[key], value=v)
        else:  # pragma: no cover - keys come from measurement_vector
            raise KeyError(kind)
    return replace(meas, demands=demands, fixed=fixed, head_meas=tuple(hm), flow_meas=tuple(fm))


def estimated_measurements(meas: MeasurementSet, est: StateEstimate, net: Network) -> MeasurementSet:
    """The measurement vector implied by an estimate (z hat)."""
    demands = {nd.id: float(est.demands[i]) for i, nd in enumerate(net.nodes)}
    fixed = dict(meas.fixed)
    for nid, mode in meas.fixed.items():
        if mode.kind == INFLOW_KNOWN:
            fixed[nid] = replace(mode, value=float(est.inflows[nid]))
    hm = tuple(replace(m, value=float(est.heads[net.node_pos(m.node)])) for m in meas.head_meas)
    fm = tuple(replace(m, value=float(est.flows[net.pipe_pos(m.pipe)])) for m in meas.flow_meas)
    return replace(meas, demands=demands, fixed=fixed, head_meas=hm, flow_meas=fm)


def _raising_sign(kind: str) -> float:
    """Side of the error box that raises heads: less demand, more of the rest."""
    return -1.0 if kind == "demand" else 1.0


# ---------------------------------------------------------------------------
# ESM


@dataclass
class SensitivityMatrix:
    S: np.ndarray
    dz: np.ndarray
    keys: list
    baseline: np.ndarray
    names: list[str]
    flagged: list
    runs: int


def esm_build(system: CLASystem, z_o: MeasurementSet, spec: UncertaintySpec, central: bool = False) -> SensitivityMatrix:
    """One estimator run per measurement with nonzero variability."""
    mv = measurement_vector(z_o, spec)
    if not np.any(mv.dz > 0):
        raise CLAError("every measurement has zero variability; sensitivity matrix undefined")
    start = system.runs
    base = system.run(z_o)
    if not base.converged:
        raise CLAError(f"baseline estimate did not converge: {base.message}")
    x0 = base.state_vector(system.net)
    S = np.zeros((x0.size, len(mv.z)))
    flagged = []
    for j, (key, dz) in enumerate(zip(mv.keys, mv.dz)):
        if dz <= 0:
            continue
        zp = mv.z.copy()
        zp[j] += dz
        up = system.run(with_values(z_o, [key], [zp[j]]))
        if not up.converged:
            flagged.append(key)
            continue
        if central:
            zm = mv.z[j] - dz
            dn = system.run(with_values(z_o, [key], [zm]))
            if not dn.converged:
                flagged.append(key)
                continue
            S[:, j] = (up.state_vector(system.net) - dn.state_vector(system.net)) / (2 * dz)
        else:
            S[:, j] = (up.state_vector(system.net) - x0) / dz
    return SensitivityMatrix(S, mv.dz, mv.keys, x0, system.names, flagged, system.runs - start)


def esm_limits(sens: SensitivityMatrix, spec: UncertaintySpec | None = None) -> ConfidenceLimits:
    """Max of the linear form over the error box, row by row."""
    del spec  # dz already fixed at build time
    xcl = np.abs(sens.S) @ sens.dz
    return ConfidenceLimits(sens.names, sens.baseline, xcl, xcl.copy(), ESM, sens.runs, list(sens.flagged))


# ---------------------------------------------------------------------------
# EM


def em_limits(
    system: CLASystem,
    z_o: MeasurementSet,
    spec: UncertaintySpec,
    direction: str = "both",
    baseline: StateEstimate | None = None,
) -> ConfidenceLimits:
    """Displacement of the estimate when the measurements sit on a box corner.

    ``direction="upper"`` pushes every measurement to the side that raises
    heads (demands down, heads and inflows up); ``"lower"`` the opposite;
    ``"both"`` runs the two corners and keeps the larger displacement per
    variable.  Run count: one baseline plus one per corner.
    """
    if direction not in ("lower", "upper", "both"):
        raise ValueError(f"unknown direction {direction!r}")
    start = system.runs
    base = system.run(z_o) if baseline is None else baseline
    if not base.converged:
        raise CLAError(f"baseline estimate did not converge: {base.message}")
    net = system.net
    x_hat = base.state_vector(net)
    z_hat = estimated_measurements(z_o, base, net)
    mv = measurement_vector(z_hat, spec)
    sign = np.array([_raising_sign(kind) for kind, _ in mv.keys])
    # at z_hat the estimator is self-consistent, so its demand shifts vanish
    ref = x_hat.copy()
    ref[-len(net.nodes) :] = 0.0
    out = {}
    for side in ("lower", "upper"):
        if direction not in (side, "both"):
            continue
        s = 1.0 if side == "upper" else -1.0
        zb = mv.z + s * sign * mv.dz
        run = system.run(with_values(z_hat, mv.keys, zb))
        if not run.converged:
            raise CLAError(f"{side} bound estimate did not converge: {run.message}")
        out[side] = np.abs(run.state_vector(net) - ref)
    lo = out.get("lower", np.zeros_like(x_hat))
    up = out.get("upper", np.zeros_like(x_hat))
    if direction == "lower":
        up = lo.copy()
    elif direction == "upper":
        lo = up.copy()
    else:
        lo = up = np.maximum(lo, up)
    return ConfidenceLimits(system.names, x_hat, lo, up, EM, system.runs - start, extra={"corners": out})


# ---------------------------------------------------------------------------
# loop sensitivity diagnostic


def _zero_chord_residual(net: Network, loops: LoopSystem, demands: np.ndarray) -> np.ndarray:
    bd = boundary_data(net, loops, demands)
    Q = base_flows(loops, bd)
    return loops.M_lp @ column_head_losses(loops, Q, net.exponent, bd.pseudo_head), bd, Q


def loop_sensitivity_limits(
    net: Network,
    tree: SpanningTree,
    loops: LoopSystem,
    d: np.ndarray | None = None,
    spec: UncertaintySpec = UncertaintySpec(),
    opts: SimulationOptions = SimulationOptions(tol=1e-10),
    r_floor: float = 1e-9,
) -> ConfidenceLimits:
    """Head limits from bound demands pushed through the loop Jacobian.

    The loop residual of the idle-chord flows at the observed demands is
    compared with the residual the converged corrections would remove; the
    componentwise ratio ``r`` rescales the bound-demand residuals before they
    are mapped to loop flows, pipe flows and heads.
    """
    d = net.demands() if d is None else np.asarray(d, dtype=float)
    sim = solve_cotree(net, tree, loops, d, opts)
    if not sim.converged:
        raise CLAError("baseline simulation did not converge")
    J = loop_jacobian(sim.column_flows, loops.col_k, net.exponent, loops)
    dH, _bd, _Q = _zero_chord_residual(net, loops, d)
    dH_t = -J @ sim.loop_flows
    flagged = [i for i in range(loops.l) if abs(dH_t[i]) < r_floor]
    r = np.ones(loops.l)
    ok = np.abs(dH_t) >= r_floor
    r[ok] = dH[ok] / dH_t[ok]
    H_hat = sim.heads
    v = spec.demand_variability
    res = {}
    for side, scale in (("lower", 1.0 - v), ("upper", 1.0 + v)):
        d_b = d.copy()
        for i, nd in enumerate(net.nodes):
            if not nd.is_fixed:
                d_b[i] = d[i] * scale
        dH_b, bd_b, Q_b = _zero_chord_residual(net, loops, d_b)
        step = np.zeros(loops.l)
        step[ok] = dH_b[ok] / r[ok]
        dq = -np.linalg.solve(J, step) if loops.l else step
        Q = Q_b + loops.M_pl @ dq
        h = column_head_losses(loops, Q, net.exponent, bd_b.pseudo_head)
        H_lab = recover_heads(tree, h[: tree.n], bd_b.H0)
        lab = tree.label
        H = np.array([bd_b.H0 if lab[nd.id] == tree.n else H_lab[lab[nd.id]] for nd in net.nodes])
        res[side] = H
    lower = np.abs(H_hat - res["upper"])  # more demand pulls heads down
    upper = np.abs(res["lower"] - H_hat)
    names = [f"head_{nid}" for nid in net.node_ids]
    return ConfidenceLimits(names, H_hat, lower, upper, LOOP_SENS, 0, flagged, extra={"r": r, "bounds": res})
