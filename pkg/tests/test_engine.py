import numpy as np
import pytest

from conftest import Problem
from gbpse.engine import GbpEngine, Schedule, UnobservableVariable, outer_iteration, run
from gbpse.factor_graph import build_graph, diameter
from gbpse.measurements import Angle, Magnitude, StateVector, generate_measurements
from gbpse.messages import DampingConfig
from gbpse.wls import assemble, covariance, solve_linear_wls
from reference_engine import reference_outer_iteration


def _engine(problem, measurements=None):
    ms = problem.measurements if measurements is None else measurements
    return GbpEngine(build_graph(problem.case, ms, problem.adm), problem.case, problem.adm)


def _wls(problem, state):
    b = assemble(problem.case, problem.measurements, state, problem.adm)
    dx = b.expand(solve_linear_wls(b))
    var = b.expand(np.diag(covariance(b)))
    return b, dx, var


def test_tree_exactness(two_bus):
    eng = _engine(two_bus)
    d = diameter(eng.graph)
    flat = StateVector.flat(2)
    # with q = 1 the outer index doubles as the inner-iteration count
    res = eng.outer_iteration(flat, d, Schedule(q=1))
    _, dx, var = _wls(two_bus, flat)
    np.testing.assert_allclose(res.increment, dx, rtol=0, atol=1e-10)
    np.testing.assert_allclose(res.variance, var, rtol=0, atol=1e-10)


def test_tree_fixed_after_diameter(two_bus):
    eng = _engine(two_bus)
    d = diameter(eng.graph)
    flat = StateVector.flat(2)
    a = eng.outer_iteration(flat, d, Schedule(q=1)).increment
    b = eng.outer_iteration(flat, 5 * d, Schedule(q=1)).increment
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-16)


def test_loopy_toy_agrees_with_wls(toy3):
    eng = _engine(toy3)
    flat = StateVector.flat(3)
    res = eng.outer_iteration(flat, 500, Schedule(q=1))
    _, dx, _ = _wls(toy3, flat)
    np.testing.assert_allclose(res.increment, dx, rtol=0, atol=1e-8)


def test_toy_unobservable_with_one_inner_iteration(toy3):
    eng = _engine(toy3)
    with pytest.raises(UnobservableVariable) as err:
        eng.run(schedule=Schedule(q=4, nu_max=2))
    assert err.value.var == Magnitude(3) and err.value.nu == 1


def test_zero_residual_gives_zero_increment():
    p = Problem("ieee14.json", "ieee14_61dev.json", 1e-6, 0, noise_scale=0.0)
    eng = _engine(p)
    x = p.case.true_state()
    res = eng.outer_iteration(x, 2, Schedule(q=4), DampingConfig())
    assert not res.increment.any()
    np.testing.assert_array_equal(res.state.as_array(), x.as_array())


def test_slack_pinned_every_iteration(ieee14):
    trace = _engine(ieee14).run(schedule=Schedule(q=3, nu_max=4, tol=0), damping=DampingConfig())
    slack = Angle(ieee14.case.slack_bus).index(14)
    for rec in trace.records:
        assert rec.increment[slack] == 0.0
        assert rec.variance[slack] == 0.0
        assert rec.state.theta[ieee14.case.slack_bus - 1] == 0.0


def test_schedule_totals():
    assert Schedule(q=4, nu_max=7).total_inner() == 4676
    assert [Schedule(q=2).tau(nu) for nu in (1, 2, 3)] == [1, 4, 9]
    with pytest.raises(ValueError):
        Schedule(q=0)


def test_trace_length_and_budget(ieee14):
    eng = _engine(ieee14)
    trace = eng.run(schedule=Schedule(q=4, nu_max=1, tol=1e9))
    assert len(trace) == 1 and trace.converged
    trace = eng.run(schedule=Schedule(q=4, nu_max=3, tol=0))
    assert len(trace) == 3 and trace.total_inner == 1 + 16 + 81
    assert not trace.converged


def test_p_zero_is_bit_identical_to_undamped(ieee14):
    eng = _engine(ieee14)
    s = Schedule(q=4, nu_max=3, tol=0)
    a = eng.run(schedule=s, damping=None)
    b = eng.run(schedule=s, damping=DampingConfig(p=0.0, alpha=0.5, seed=123))
    for ra, rb in zip(a.records, b.records):
        assert ra.state.as_array().tobytes() == rb.state.as_array().tobytes()
        assert ra.variance.tobytes() == rb.variance.tobytes()


def test_damped_runs_repeatable(ieee14):
    eng = _engine(ieee14)
    s = Schedule(q=3, nu_max=3, tol=0)
    a = eng.run(schedule=s, damping=DampingConfig(seed=5))
    b = _engine(ieee14).run(schedule=s, damping=DampingConfig(seed=5))
    c = eng.run(schedule=s, damping=DampingConfig(seed=6))
    assert a.final_state.as_array().tobytes() == b.final_state.as_array().tobytes()
    assert a.final_state.as_array().tobytes() != c.final_state.as_array().tobytes()


@pytest.mark.parametrize("damping", [None, DampingConfig(p=0.5, alpha=0.5, seed=9),
                                     DampingConfig(p=0.3, alpha=0.4, seed=1)])
@pytest.mark.parametrize("name", ["toy3", "two_bus", "ieee14"])
def test_matches_scalar_reference(request, name, damping):
    p = request.getfixturevalue(name)
    graph = build_graph(p.case, p.measurements, p.adm)
    eng = GbpEngine(graph, p.case, p.adm)
    state = StateVector.flat(p.case.n_bus)
    for nu, tau in ((2, 16), (3, 60)):
        res = eng.outer_iteration(state, tau, Schedule(q=1), damping)
        inc, var, _ = reference_outer_iteration(graph, p.case, p.adm, state, tau, damping, nu=tau)
        np.testing.assert_allclose(res.increment, inc, rtol=1e-9, atol=1e-13)
        np.testing.assert_allclose(res.variance, var, rtol=1e-9, atol=1e-20)
        state = res.state


def test_fixed_point_satisfies_normal_equations():
    p = Problem("ieee14.json", "ieee14_61dev.json", 1e-4, 21)
    eng = _engine(p)
    flat = StateVector.flat(14)
    res = eng.outer_iteration(flat, 3000, Schedule(q=1), DampingConfig(seed=2))
    b = assemble(p.case, p.measurements, flat, p.adm)
    dx = res.increment[b.columns]
    resid = b.jacobian.T @ (b.weights * (b.residuals - b.jacobian @ dx))
    assert np.max(np.abs(resid)) <= 1e-6


def test_converges_to_wls_on_ieee14(ieee14):
    from gbpse.wls import gauss_newton
    trace = _engine(ieee14).run(schedule=Schedule(q=4, nu_max=7, tol=0), damping=DampingConfig())
    ref = gauss_newton(ieee14.case, ieee14.measurements, tol=1e-12, max_iter=50, adm=ieee14.adm)
    trace = trace.with_rmse(ref.state)
    assert trace.records[-1].rmse <= 1e-5
    assert trace.records[-1].rmse < trace.records[0].rmse


def test_warm_start_option_runs(ieee14):
    trace = _engine(ieee14).run(schedule=Schedule(q=3, nu_max=4, tol=0), damping=DampingConfig(),
                                warm_start=True)
    assert len(trace) == 4
    assert np.all(np.isfinite(trace.final_state.as_array()))


def test_functional_forms(toy3):
    graph = build_graph(toy3.case, toy3.measurements, toy3.adm)
    s = Schedule(q=1, nu_max=3, tol=0)
    inc, state = outer_iteration(graph, StateVector.flat(3), 500, s, None, toy3.adm, toy3.case)
    assert state.as_array() == pytest.approx(StateVector.flat(3).as_array() + inc)


def test_functional_run(two_bus):
    graph = build_graph(two_bus.case, two_bus.measurements, two_bus.adm)
    x0 = two_bus.case.true_state()
    trace = run(graph, x0, Schedule(q=4, nu_max=2, tol=0), DampingConfig(), two_bus.adm,
                two_bus.case)
    assert trace.initial is x0 and len(trace) == 2


def test_current_measurement_at_flat_start_is_skipped(two_bus):
    # a current meter alone is singular at flat start; the engine sends vacuous
    # messages from it instead of failing
    from gbpse.measurements import Device, MeasurementKind as K
    devices = [Device(K.VOLTAGE_MAGNITUDE, 1), Device(K.VOLTAGE_MAGNITUDE, 2),
               Device(K.ACTIVE_FLOW, (1, 2)), Device(K.CURRENT_MAGNITUDE, (1, 2))]
    ms = generate_measurements(two_bus.case, devices, 1e-6, 0, two_bus.adm)
    eng = _engine(two_bus, ms)
    trace = eng.run(schedule=Schedule(q=2, nu_max=6, tol=0))
    assert np.all(np.isfinite(trace.final_state.as_array()))
