import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from loopflow import benchmarks as B
from loopflow.estimator import HeadMeasurement, MeasurementSet
from loopflow.simulator import SimulationOptions, solve_cotree
from loopflow.topology import build_spanning_tree, trace_loops
from loopflow.uncertainty import (
    EM,
    ESM,
    CLAError,
    CLASystem,
    SensitivityMatrix,
    UncertaintySpec,
    em_limits,
    esm_build,
    esm_limits,
    loop_sensitivity_limits,
    measurement_vector,
    with_values,
)

ZERO = UncertaintySpec(0.0, 0.0, 0.0, False, 0.0, 0.0)


@pytest.fixture(scope="module")
def tri():
    net = B.triangle()
    tree = build_spanning_tree(net)
    return net, tree, trace_loops(tree, net)


def test_esm_limits_hand_example():
    sens = SensitivityMatrix(np.array([[1.0, -2.0]]), np.array([0.5, 0.25]), [("a", 0), ("b", 0)], np.zeros(1), ["x"], [], 3)
    lim = esm_limits(sens)
    assert lim.lower[0] == pytest.approx(1.0, abs=1e-15)
    assert lim.upper[0] == pytest.approx(1.0, abs=1e-15)
    assert lim.method == ESM and lim.runs == 3


def test_zero_variability_is_rejected_by_esm(tri):
    net, tree, loops = tri
    with pytest.raises(CLAError):
        esm_build(CLASystem(net, tree, loops), MeasurementSet.from_network(net), ZERO)


def test_zero_spec_gives_zero_em_limits(tri):
    net, tree, loops = tri
    lim = em_limits(CLASystem(net, tree, loops), MeasurementSet.from_network(net), ZERO)
    assert np.max(lim.xcl) < 1e-7


def test_measurement_vector_accuracies(desk34):
    net, _, _ = desk34
    meas = MeasurementSet.from_network(net, [HeadMeasurement(1, 80.0, 0.3)])
    mv = measurement_vector(meas, UncertaintySpec(0.2))
    keys = dict(zip(mv.keys, mv.dz))
    assert keys[("head_meas", 0)] == 0.3
    assert keys[("demand", 5)] == pytest.approx(0.2 * net.node(5).demand)
    mv2 = measurement_vector(meas, UncertaintySpec(0.2, head_meas_accuracy=0.05))
    assert dict(zip(mv2.keys, mv2.dz))[("head_meas", 0)] == 0.05
    back = with_values(meas, mv.keys, mv.z)
    assert back == meas


def test_esm_matches_corner_enumeration(tri):
    """Linearised limits against the worst case over every box corner."""
    net, tree, loops = tri
    meas = MeasurementSet.from_network(net)
    spec = UncertaintySpec(0.05, fixed_head_accuracy=0.01)
    system = CLASystem(net, tree, loops)
    lim = esm_limits(esm_build(system, meas, spec, central=True))
    mv = measurement_vector(meas, spec)
    live = [j for j in range(len(mv.z)) if mv.dz[j] > 0]
    worst = np.zeros_like(lim.xcl)
    for signs in itertools.product((-1.0, 1.0), repeat=len(live)):
        z = mv.z.copy()
        z[live] += np.array(signs) * mv.dz[live]
        est = system.run(with_values(meas, mv.keys, z))
        worst = np.maximum(worst, np.abs(est.state_vector(net) - lim.estimate))
    big = worst > 1e-6
    assert np.all(np.abs(lim.xcl[big] - worst[big]) <= 0.05 * worst[big])


def test_run_counts(desk34):
    net, tree, loops = desk34
    meas = MeasurementSet.from_network(net)
    spec = UncertaintySpec(0.2)
    m = int(np.sum(measurement_vector(meas, spec).dz > 0))
    sys_esm = CLASystem(net, tree, loops)
    sens = esm_build(sys_esm, meas, spec)
    assert sens.runs == sys_esm.runs == m + 1
    for direction, runs in (("upper", 2), ("lower", 2), ("both", 3)):
        s = CLASystem(net, tree, loops)
        lim = em_limits(s, meas, spec, direction)
        assert lim.runs == s.runs == runs
        assert lim.method == EM
    s = CLASystem(net, tree, loops)
    base = s.run(meas)
    assert em_limits(s, meas, spec, "both", baseline=base).runs == 2


def test_single_direction_is_symmetric(desk34):
    net, tree, loops = desk34
    lim = em_limits(CLASystem(net, tree, loops), MeasurementSet.from_network(net), UncertaintySpec(), "upper")
    assert np.array_equal(lim.lower, lim.upper)
    with pytest.raises(ValueError):
        em_limits(CLASystem(net, tree, loops), MeasurementSet.from_network(net), UncertaintySpec(), "sideways")


@given(v1=st.floats(0.02, 0.15), extra=st.floats(0.02, 0.15))
def test_em_limits_grow_with_variability(v1, extra):
    net = B.triangle()
    tree = build_spanning_tree(net)
    loops = trace_loops(tree, net)
    meas = MeasurementSet.from_network(net)
    a = em_limits(CLASystem(net, tree, loops), meas, UncertaintySpec(v1)).xcl
    b = em_limits(CLASystem(net, tree, loops), meas, UncertaintySpec(v1 + extra)).xcl
    assert np.all(b >= a - 1e-9)
    assert np.max(b - a) > 0


def test_exact_meter_tightens_its_node(desk34):
    net, tree, loops = desk34
    sim = solve_cotree(net, tree, loops, opts=SimulationOptions(tol=1e-10))
    meas = MeasurementSet.from_network(net)
    spec = UncertaintySpec()
    before = em_limits(CLASystem(net, tree, loops), meas, spec, "upper")
    metered = meas.with_head_meas([HeadMeasurement(14, float(sim.heads[net.node_pos(14)]), 0.0)])
    after = em_limits(CLASystem(net, tree, loops), metered, spec, "upper")
    assert after.get("head_14") < before.get("head_14")


def test_loop_sensitivity_ratios(desk34):
    net, tree, loops = desk34
    lim = loop_sensitivity_limits(net, tree, loops)
    r = lim.extra["r"]
    assert r.shape == (loops.l,)
    assert np.all(np.isfinite(r))
    assert np.all(lim.lower >= 0) and np.all(lim.upper >= 0)
    assert set(lim.extra["bounds"]) == {"lower", "upper"}
    assert lim.names[0] == f"head_{net.node_ids[0]}"
