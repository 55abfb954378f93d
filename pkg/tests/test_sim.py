import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from incdiss import examples, lmi, sim
from incdiss.embedding import BoxRegion, embed_region, identity_scheduling
from incdiss.sim import (Trajectory, TrajectoryPair, classify_longrun, dissipation_residuals,
                         empirical_gain_lower_bound, simulate, simulate_differential,
                         validate_dissipation)
from incdiss.sysmodel import ContractViolation, DiscreteTimeSystem

from oracles import geometric_gain_ratio

DECAY = examples.linear_system([[0.5]], [[0.0]], [[1.0]], [[0.0]])
SCALAR = examples.linear_system([[0.5]], [[1.0]], [[1.0]], [[0.0]])
SCALAR_REGION = BoxRegion(((-1.0, 1.0), (-1.0, 1.0)))


def _scalar_certificate():
    emb = embed_region(SCALAR, identity_scheduling(1, 1), SCALAR_REGION, (3, 3))
    return lmi.compute_li2_gain(emb)


# -- simulate --------------------------------------------------------------------------

def test_geometric_decay():
    traj = simulate(DECAY, [1.0], np.zeros((3, 1)))
    assert traj.states[:, 0].tolist() == [1.0, 0.5, 0.25, 0.125]
    assert traj.horizon == 3 and traj.outputs[:, 0].tolist() == [1.0, 0.5, 0.25]


def test_disk_regulation_from_small_angle():
    cl = examples.disk_closed_loop("lti")
    traj = simulate(cl, [0.1, 0.0, 0.0], np.zeros((200, 1)))
    assert abs(traj.states[200, 0]) < 1e-3


def test_disk_rejects_constant_disturbance():
    traj = simulate(examples.disk_closed_loop("lti"), [0.0, 0.0, 0.0],
                    examples.ramp_saturating(-1.0, 70, 1000))
    assert np.max(np.abs(traj.states[:70, 0])) > 1e-2
    assert abs(traj.states[-1, 0]) < 1e-3


def _explode(x, w):
    return np.array([x[0] * 1e200])


def _id(x, w):
    return np.array([x[0]])


def test_non_finite_truncates_with_diagnostic():
    sys = DiscreteTimeSystem(1, 1, 1, _explode, _id)
    with np.errstate(over="ignore"):
        traj = simulate(sys, [1.0], np.zeros((5, 1)))
    assert traj.truncated and "step 2" in traj.diagnostic
    assert traj.horizon == 1


def test_simulate_rejects_non_finite_input():
    with pytest.raises(ContractViolation):
        simulate(DECAY, [1.0], [[math.nan]])


def test_simulate_is_deterministic():
    cl = examples.disk_closed_loop("lpv")
    w = examples.ramp_saturating()[:300]
    a, b = simulate(cl, [0.2, 0, 0], w), simulate(cl, [0.2, 0, 0], w)
    np.testing.assert_array_equal(a.states, b.states)


# -- differential simulation -------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_differential_matches_primal_difference_for_lti(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((3, 3))
    A *= 0.9 / max(abs(np.linalg.eigvals(A)))
    sys = examples.linear_system(A, rng.standard_normal((3, 1)), rng.standard_normal((1, 3)),
                                 rng.standard_normal((1, 1)))
    x0, dx0 = rng.standard_normal(3), rng.standard_normal(3)
    w, dw = rng.standard_normal((25, 1)), rng.standard_normal((25, 1))
    base = simulate(sys, x0, w)
    other = simulate(sys, x0 + dx0, w + dw)
    d = simulate_differential(sys, base, dx0, dw)
    scale = max(1.0, np.max(np.abs(other.states)))
    assert np.max(np.abs(other.states - base.states - d.dstates)) <= 1e-12 * scale
    assert np.max(np.abs(other.outputs - base.outputs - d.doutputs)) <= 1e-12 * scale


def test_zero_variation_stays_zero():
    cl = examples.disk_closed_loop("lpv")
    base = simulate(cl, [0.3, 0.0, 1.0], 0.5 * np.ones((30, 1)))
    d = simulate_differential(cl, base, np.zeros(3), np.zeros((30, 1)))
    assert not np.any(d.dstates) and not np.any(d.doutputs)


def taylor_mismatch(sys, x0, w, dx_dir, dw_dir, eps_list):
    base = simulate(sys, x0, w)
    d = simulate_differential(sys, base, dx_dir, dw_dir)
    errs = []
    for eps in eps_list:
        pert = simulate(sys, x0 + eps * dx_dir, w + eps * dw_dir)
        errs.append(float(np.max(np.linalg.norm(pert.states - base.states - eps * d.dstates,
                                                axis=1))))
    return errs


@pytest.mark.parametrize("controller", ["lti", "lpv"])
def test_differential_first_order_taylor(controller):
    rng = np.random.default_rng(7)
    cl = examples.disk_closed_loop(controller)
    w = 0.5 * rng.standard_normal((20, 1))
    errs = taylor_mismatch(cl, np.array([0.6, -1.0, 2.0]), w, rng.standard_normal(3),
                           rng.standard_normal((20, 1)), [1e-2, 5e-3, 2.5e-3])
    assert all(errs[i] / errs[i + 1] >= 3.5 for i in range(2)), errs


def test_differential_horizon_mismatch():
    base = simulate(DECAY, [1.0], np.zeros((3, 1)))
    with pytest.raises(ContractViolation, match="steps"):
        simulate_differential(DECAY, base, [0.0], np.zeros((4, 1)))


# -- dissipation validation ---------------------------------------------------------------

def test_identical_trajectories_zero_violation():
    t = simulate(SCALAR, [0.3], np.ones((10, 1)))
    assert validate_dissipation(TrajectoryPair(t, t), np.eye(1), lmi.SupplyQSR.l2_gain(2.0)) == 0.0


def test_scalar_certificate_holds_on_random_pairs():
    gamma, cert = _scalar_certificate()
    assert gamma <= 2.001 + 1e-9
    sample = sim.sample_pairs(SCALAR, identity_scheduling(1, 1), SCALAR_REGION, 100,
                              horizon=30, seed=2, input_amplitude=0.3)
    supply = lmi.SupplyQSR.l2_gain(gamma)
    worst = max(validate_dissipation(p, cert.P, supply) for p in sample.pairs)
    assert worst <= 1e-9


def test_corrupted_certificate_detected():
    gamma, cert = _scalar_certificate()
    supply = lmi.SupplyQSR.l2_gain(gamma)
    rng = np.random.default_rng(0)
    found = None
    for _ in range(200):
        x0, y0 = rng.uniform(-1, 1, 2)
        w = rng.uniform(-1, 1, (5, 1))
        pair = TrajectoryPair(simulate(SCALAR, [x0], w), simulate(SCALAR, [y0], w))
        v = validate_dissipation(pair, cert.P / 10.0, supply)
        if v > 0:
            found = v
            break
    assert found is not None and found > 1e-3


def test_validate_dimension_checks():
    t = simulate(SCALAR, [0.3], np.ones((4, 1)))
    with pytest.raises(ContractViolation):
        validate_dissipation(TrajectoryPair(t, t), np.eye(2), lmi.SupplyQSR.l2_gain(1.0))
    with pytest.raises(ContractViolation):
        validate_dissipation(TrajectoryPair(t, t), np.eye(1), lmi.SupplyQSR.l2_gain(1.0, 2, 1))


def test_pair_horizon_mismatch():
    a = simulate(SCALAR, [0.3], np.ones((4, 1)))
    b = simulate(SCALAR, [0.3], np.ones((5, 1)))
    with pytest.raises(ContractViolation):
        TrajectoryPair(a, b)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_telescoping_identity(seed):
    rng = np.random.default_rng(seed)
    a = simulate(SCALAR, rng.uniform(-1, 1, 1), rng.uniform(-1, 1, (40, 1)))
    b = simulate(SCALAR, rng.uniform(-1, 1, 1), rng.uniform(-1, 1, (40, 1)))
    P, supply = np.array([[rng.uniform(0.5, 3)]]), lmi.SupplyQSR.l2_gain(rng.uniform(1, 3))
    res = dissipation_residuals(TrajectoryPair(a, b), P, supply)
    dx = a.states - b.states
    s = [supply(a.inputs[k] - b.inputs[k], a.outputs[k] - b.outputs[k]) for k in range(40)]
    V = lambda k: float(dx[k] @ P @ dx[k])  # noqa: E731
    assert math.fsum(res) == pytest.approx(V(40) - V(0) - math.fsum(s), abs=1e-10)
    if np.all(res <= 0):
        assert V(40) - V(0) <= math.fsum(s) + 1e-10


# -- long-run classification -------------------------------------------------------------

def _traj(states):
    states = np.asarray(states, float).reshape(len(states), -1)
    n = len(states) - 1
    return Trajectory(states, np.zeros((n, 1)), np.zeros((n, 1)))


def test_classify_geometric_converged():
    v = classify_longrun(_traj(0.5 ** np.arange(101)), settle_k=50)
    assert v.kind == "converged"


def test_classify_period_two():
    v = classify_longrun(_traj([(-1.0) ** k for k in range(101)]), settle_k=50)
    assert v.kind == "oscillating" and v.amplitude[0] == 2.0


def test_classify_diverged():
    v = classify_longrun(_traj(2.0 ** np.arange(101)), settle_k=50)
    assert v.kind == "diverged"


def test_classify_needs_long_horizon():
    with pytest.raises(ContractViolation):
        classify_longrun(_traj(np.zeros(10)), settle_k=20)


def test_classify_lpv_limit_cycle():
    traj = simulate(examples.disk_closed_loop("lpv"), [0.0, 0.0, 0.0], examples.ramp_saturating())
    assert classify_longrun(traj).kind == "oscillating"


# -- gain lower bound ---------------------------------------------------------------------

def test_gain_lower_bound_geometric():
    N = 200
    a = simulate(SCALAR, [0.0], np.ones((N, 1)))
    b = simulate(SCALAR, [0.0], np.zeros((N, 1)))
    lb = empirical_gain_lower_bound(SCALAR, [TrajectoryPair(a, b)])
    assert lb == pytest.approx(geometric_gain_ratio(0.5, 1.0, 1.0, N), rel=1e-12)
    assert lb == pytest.approx(2.0, rel=0.05)


def test_identical_outputs_contribute_zero():
    a = simulate(DECAY, [0.5], np.ones((10, 1)))
    b = simulate(DECAY, [0.5], np.zeros((10, 1)))
    assert empirical_gain_lower_bound(DECAY, [TrajectoryPair(a, b)]) == 0.0


def test_zero_input_difference_skipped():
    a = simulate(SCALAR, [0.5], np.ones((10, 1)))
    with pytest.warns(RuntimeWarning, match="identical inputs"):
        assert empirical_gain_lower_bound(SCALAR, [TrajectoryPair(a, a)]) == 0.0


def test_lower_bound_needs_shared_initial_state():
    a = simulate(SCALAR, [0.5], np.ones((10, 1)))
    b = simulate(SCALAR, [0.1], np.zeros((10, 1)))
    with pytest.raises(ContractViolation, match="initial state"):
        empirical_gain_lower_bound(SCALAR, [TrajectoryPair(a, b)])


def test_lower_bound_below_certified_scalar():
    gamma, _ = _scalar_certificate()
    sample = sim.sample_pairs(SCALAR, identity_scheduling(1, 1), SCALAR_REGION, 50,
                              horizon=60, seed=5, shared_initial=True, input_amplitude=0.3)
    assert empirical_gain_lower_bound(SCALAR, sample.pairs) <= gamma + 1e-6


# -- sampling and CSV ---------------------------------------------------------------------

def test_sampled_pairs_stay_in_region():
    b = examples.get_builtin("disk_lti_closedloop")
    sample = sim.sample_pairs(b.system, b.schedmap, b.region, 10, horizon=30, seed=4)
    assert len(sample.pairs) == 10 and sample.attempts >= 10
    for pair in sample.pairs:
        assert sim.in_region(pair.first, b.schedmap, b.region)
        assert sim.in_region(pair.second, b.schedmap, b.region)


def test_sampling_is_seeded():
    b = examples.get_builtin("disk_lti_closedloop")
    s1 = sim.sample_pairs(b.system, b.schedmap, b.region, 3, horizon=10, seed=9)
    s2 = sim.sample_pairs(b.system, b.schedmap, b.region, 3, horizon=10, seed=9)
    for p, q in zip(s1.pairs, s2.pairs):
        np.testing.assert_array_equal(p.first.states, q.first.states)


def test_sampling_gives_up():
    with pytest.raises(RuntimeError, match="in-region pairs"):
        sim.sample_pairs(SCALAR, identity_scheduling(1, 1), SCALAR_REGION, 2, horizon=10,
                         seed=0, input_amplitude=50.0, max_attempts=5)


def test_csv_round_trip_bit_exact():
    traj = simulate(examples.disk_closed_loop("lpv"), [0.1, 0.2, -3.0],
                    examples.ramp_saturating()[:50])
    text = sim.trajectory_csv(traj)
    assert text.splitlines()[0] == "k,x1,x2,x3,w1,z1"
    assert len(text.splitlines()) == 52
    back = sim.read_trajectory_csv(text)
    np.testing.assert_array_equal(back.states, traj.states)
    np.testing.assert_array_equal(back.inputs, traj.inputs)
    np.testing.assert_array_equal(back.outputs, traj.outputs)


def test_band_limited_noise_bounded():
    rng = np.random.default_rng(0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        w = sim.band_limited_noise(rng, 500, 2, 0.7)
    assert w.shape == (500, 2) and np.max(np.abs(w)) <= 0.7
