import numpy as np
import pytest
from hypothesis import given, strategies as st

from loopflow import benchmarks as B
from loopflow.estimator import (
    ConfigurationError,
    EstimatorModel,
    EstimatorOptions,
    FlowMeasurement,
    HeadMeasurement,
    MeasurementSet,
    RegionMask,
    constrain_region,
    estimate,
    estimate_network,
    region_nodes,
    state_names,
)
from loopflow.scenarios import LeakScenario, inject_leak
from loopflow.simulator import SimulationOptions, column_derivatives, continuity_residuals, solve_cotree
from loopflow.topology import build_spanning_tree, trace_loops

TIGHT = SimulationOptions(tol=1e-10)


def _meters(net, sim, nodes, acc=0.1):
    return [HeadMeasurement(n, float(sim.heads[net.node_pos(n)]), acc) for n in nodes]


@pytest.fixture(scope="module")
def leak10(desk34):
    net, tree, loops = desk34
    inj = inject_leak(net, tree, loops, LeakScenario(10, 0.01))
    sim = solve_cotree(inj.net, inj.tree, inj.loops, opts=TIGHT)
    return inj, sim


def test_consistent_measurements_give_zero_variation(desk34):
    net, tree, loops = desk34
    sim = solve_cotree(net, tree, loops, opts=TIGHT)
    meas = MeasurementSet.from_network(net, _meters(net, sim, B.DESK34_HEAD_METERS))
    est = estimate(net, tree, loops, meas)
    assert est.converged
    assert np.max(np.abs(est.delta_d)) < 1e-7
    assert np.max(np.abs(est.heads - sim.heads)) < 1e-5
    assert np.max(np.abs(est.measurement_residuals)) < 1e-5


def test_state_vector_layout(desk34):
    net, tree, loops = desk34
    est = estimate(net, tree, loops, MeasurementSet.from_network(net))
    x = est.state_vector(net)
    names = state_names(net)
    assert len(x) == len(names) == 2 * len(net.nodes) + len(net.fixed_head_ids)
    assert names[0] == f"head_{net.node_ids[0]}"
    assert x[names.index(f"head_{net.node_ids[3]}")] == est.heads[3]


@pytest.mark.parametrize("enhanced", [False, True])
def test_jacobian_matches_central_differences(desk34, leak10, enhanced):
    net, tree, loops = desk34
    inj, sim = leak10
    hm = _meters(inj.net, sim, B.DESK34_HEAD_METERS)
    fm = [FlowMeasurement(5, float(sim.flows[inj.net.pipe_pos(5)]))]
    model = EstimatorModel(net, tree, loops, MeasurementSet.from_network(net, hm, fm))
    rng = np.random.default_rng(3)
    for _ in range(3):
        x = model.initial_state(1e-4)
        x[: model.n] += rng.normal(0, 1e-3, model.n)
        x[model.n :] += rng.normal(0, 1e-2, model.l)
        J = model.jacobian(x)
        h = 1e-7
        Jfd = np.empty_like(J)
        for c in range(x.size):
            e = np.zeros_like(x)
            e[c] = h
            Jfd[:, c] = (model.residual(x + e) - model.residual(x - e)) / (2 * h)
        if not enhanced:
            scale = np.maximum(np.abs(Jfd), 1.0)
            assert np.max(np.abs(J - Jfd) / scale) < 1e-5
        else:
            # the enhancement only alters chord diagonals of the loop block
            Je = model.jacobian(x, enhanced=True)
            diff = np.abs(Je - J) > 0
            assert not np.any(diff[model.l :])


def test_loop_block_is_positive_semidefinite(desk34):
    net, tree, loops = desk34
    sim = solve_cotree(net, tree, loops)
    a = column_derivatives(loops, sim.column_flows, net.exponent)
    G = (loops.M_lp * a) @ loops.M_lp.T
    assert np.allclose(G, G.T)
    assert np.min(np.linalg.eigvalsh(G)) > -1e-9


def test_exact_meter_absorbs_leak(desk34, leak10):
    net, tree, loops = desk34
    inj, sim = leak10
    node = net.pipe(10).start
    meas = MeasurementSet.from_network(net, _meters(inj.net, sim, [node], acc=0.0))
    est = estimate(net, tree, loops, meas, opts=EstimatorOptions(weighted=True))
    assert est.converged
    assert abs(est.measurement_residuals[0]) <= 1e-6
    assert abs(sum(est.inflows.values()) - est.demands.sum()) <= 1e-9
    # the absorbed consumption sits near the leak
    assert est.delta_d[net.node_pos(node)] < -1e-3


def test_mass_balance(desk34, leak10):
    net, tree, loops = desk34
    inj, sim = leak10
    meas = MeasurementSet.from_network(net, _meters(inj.net, sim, B.DESK34_HEAD_METERS))
    est = estimate(net, tree, loops, meas)
    bal = continuity_residuals(net, est.flows, est.inflows, est.demands)
    assert np.max(np.abs(bal)) < 1e-9
    assert abs(sum(est.inflows.values()) - est.demands.sum()) < 1e-9


def test_objective_is_non_increasing(desk34, leak10):
    net, tree, loops = desk34
    inj, sim = leak10
    meas = MeasurementSet.from_network(net, _meters(inj.net, sim, B.DESK34_HEAD_METERS))
    est = estimate(net, tree, loops, meas, opts=EstimatorOptions(fallback=False))
    obj = np.array(est.objective)
    assert np.all(np.diff(obj) <= 1e-12 * np.maximum(obj[:-1], 1.0))


def test_empty_region_equals_simulation(desk34, leak10):
    net, tree, loops = desk34
    inj, sim_leak = leak10
    meas = MeasurementSet.from_network(net, _meters(inj.net, sim_leak, B.DESK34_HEAD_METERS))
    mask = constrain_region(RegionMask.full(tree), [])
    est = estimate(net, tree, loops, meas, mask)
    sim = solve_cotree(net, tree, loops, opts=TIGHT)
    assert np.all(est.delta_d == 0)
    assert np.max(np.abs(est.heads - sim.heads)) < 1e-6
    assert np.max(np.abs(est.flows - sim.flows)) < 1e-8


def test_region_support(desk34, leak10):
    net, tree, loops = desk34
    inj, sim = leak10
    meas = MeasurementSet.from_network(net, _meters(inj.net, sim, [11, 19]))
    active = region_nodes(tree, meas, net, 1)
    mask = constrain_region(RegionMask.full(tree), active)
    est = estimate(net, tree, loops, meas, mask)
    nz = {nid for nid, v in zip(net.node_ids, est.delta_d) if v != 0}
    assert nz <= active
    assert 11 in active and 19 in active


def test_inflow_known_node_takes_shift(desk34, leak10):
    net, tree, loops = desk34
    inj, sim = leak10
    meas = MeasurementSet.from_network(net, _meters(inj.net, sim, B.DESK34_HEAD_METERS))
    est = estimate(net, tree, loops, meas)
    for nid in B.DESK34_INFLOW_NODES:
        pos = net.node_pos(nid)
        assert est.inflows[nid] == pytest.approx(net.nodes[pos].inflow + est.delta_d[pos], abs=1e-12)
        assert est.demands[pos] == net.nodes[pos].demand


def test_flow_meter_is_fitted():
    net = B.triangle()
    tree = build_spanning_tree(net)
    loops = trace_loops(tree, net)
    sim = solve_cotree(net.with_values(demands={2: 0.025}), tree, loops, opts=TIGHT)
    fm = [FlowMeasurement(net.pipe_ids[0], float(sim.flows[0]), 0.0)]
    meas = MeasurementSet.from_network(net, flow_meas=fm)
    est = estimate(net, tree, loops, meas, opts=EstimatorOptions(weighted=True))
    assert est.converged
    assert abs(est.measurement_residuals[0]) < 1e-9
    assert est.flow_residual_history[-1] < est.flow_residual_history[0]


def test_estimate_network_wrapper(desk34):
    net, _, _ = desk34
    est, (tree, loops, mask) = estimate_network(net, MeasurementSet.from_network(net), radius=2)
    assert est.converged
    assert not mask.active.any()


def test_bad_inputs(desk34):
    net, tree, loops = desk34
    with pytest.raises(ConfigurationError):
        MeasurementSet({}, variability=-1.0)
    with pytest.raises(ConfigurationError):
        estimate(net, tree, loops, MeasurementSet.from_network(net, [HeadMeasurement(999, 1.0)]))
    with pytest.raises(ConfigurationError):
        estimate(net, tree, loops, MeasurementSet.from_network(net, flow_meas=[FlowMeasurement(B.DESK34_PUMP, 0.0)]))


@given(scale=st.floats(0.4, 1.3))
def test_unmetered_estimate_matches_simulation(scale):
    net = B.desk34()
    net = net.with_values(demands=net.demands() * scale)
    tree = build_spanning_tree(net)
    loops = trace_loops(tree, net)
    est = estimate(net, tree, loops, MeasurementSet.from_network(net))
    sim = solve_cotree(net, tree, loops, opts=TIGHT)
    assert np.max(np.abs(est.delta_d)) < 1e-9
    assert np.max(np.abs(est.heads - sim.heads)) < 1e-6
