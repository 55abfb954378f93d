import math
import pickle
from functools import partial

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from incdiss import examples
from incdiss.sysmodel import (ContinuousTimeSystem, ContractViolation, DifferentialMatrices,
                              DiscreteTimeSystem, EvaluationError, LtiController, evaluate,
                              feedback_interconnect, finite_difference_jacobians, jacobians,
                              rk4_discretize)


def _sin_plus_xw(x, w):
    return np.array([math.sin(x[0]) + x[0] * w[0]])


def _identity_out(x, w):
    return np.array([x[0]])


SIN_SYS = DiscreteTimeSystem(1, 1, 1, _sin_plus_xw, _identity_out)
LIN_SYS = examples.linear_system([[0.5]], [[1.0]], [[1.0]], [[0.0]])


# -- evaluate -------------------------------------------------------------------------

def test_evaluate_linear_scalar():
    x_next, z = evaluate(LIN_SYS, [2.0], [1.0])
    assert x_next.tolist() == [2.0] and z.tolist() == [2.0]


def test_evaluate_sin_at_origin():
    x_next, _ = evaluate(SIN_SYS, [0.0], [0.0])
    assert x_next.tolist() == [0.0]


def test_disk_origin_is_fixed_point():
    x_next, z = evaluate(examples.discretized_disk(), [0.0, 0.0], [0.0])
    assert x_next.tolist() == [0.0, 0.0] and z.tolist() == [0.0]


@pytest.mark.parametrize("x, w", [([1.0, 2.0], [0.0]), ([1.0], [0.0, 1.0])])
def test_evaluate_dimension_mismatch(x, w):
    with pytest.raises(ContractViolation, match="must be a vector of length"):
        evaluate(LIN_SYS, x, w)


def test_wrong_output_length_is_reported():
    bad = DiscreteTimeSystem(1, 1, 2, _sin_plus_xw, _identity_out)
    with pytest.raises(ContractViolation, match="h returned length 1"):
        evaluate(bad, [0.0], [0.0])


# -- jacobians ------------------------------------------------------------------------

def test_jacobians_sin_system():
    m = jacobians(SIN_SYS, [0.0], [0.0])
    np.testing.assert_allclose(np.hstack([m.A, m.B, m.C, m.D]), [[1.0, 0.0, 1.0, 0.0]],
                               atol=1e-9)


def test_jacobians_linear_constant():
    for x in (-3.0, 0.0, 7.5):
        m = jacobians(LIN_SYS, [x], [x / 2])
        assert m.A.tolist() == [[0.5]] and m.B.tolist() == [[1.0]]


def _nan_map(x, w):
    return np.array([math.nan if x[0] > 0 else 0.0])


def test_non_finite_jacobian_reports_point():
    sys = DiscreteTimeSystem(1, 1, 1, _nan_map, _identity_out)
    with pytest.raises(EvaluationError) as exc:
        jacobians(sys, [1.0], [0.0])
    assert exc.value.x.tolist() == [1.0]


def test_fd_matches_analytic_on_disk_loop():
    rng = np.random.default_rng(3)
    fd_sys = examples.disk_closed_loop("lpv")
    an_sys = examples.disk_closed_loop("lpv", analytic_jacobian=True)
    assert fd_sys.jac is None and an_sys.jac is not None
    for _ in range(10):
        x = rng.uniform([-3, -8, -20], [3, 8, 20])
        w = rng.uniform(-5, 5, 1)
        fd, an = jacobians(fd_sys, x, w), jacobians(an_sys, x, w)
        for M_fd, M_an in zip(fd.as_tuple(), an.as_tuple()):
            np.testing.assert_allclose(M_fd, M_an, rtol=1e-6, atol=1e-6 * np.max(np.abs(M_an)))


def _smooth(x, w):
    return np.array([math.sin(x[0]) * math.exp(0.3 * x[1]) + w[0] ** 3, math.cos(x[0] * w[0])])


def _smooth_jac(x, w):
    A = np.array([[math.cos(x[0]) * math.exp(0.3 * x[1]), 0.3 * math.sin(x[0]) * math.exp(0.3 * x[1])],
                  [-w[0] * math.sin(x[0] * w[0]), 0.0]])
    B = np.array([[3 * w[0] ** 2], [-x[0] * math.sin(x[0] * w[0])]])
    return A, B


def test_fd_second_order_convergence():
    sys = DiscreteTimeSystem(2, 1, 1, _smooth, _identity_out)
    x, w = np.array([0.7, -0.4]), np.array([1.3])
    A, B = _smooth_jac(x, w)
    exact = np.hstack([A, B])
    errs = []
    for h in (1e-2, 5e-3, 2.5e-3, 1.25e-3):
        m = finite_difference_jacobians(sys, x, w, fd_step=h)
        errs.append(np.max(np.abs(np.hstack([m.A, m.B]) - exact)))
    ratios = [errs[i] / errs[i + 1] for i in range(3)]
    assert all(3.6 < r < 4.4 for r in ratios), ratios


def test_fd_step_must_be_positive():
    with pytest.raises(ContractViolation):
        finite_difference_jacobians(LIN_SYS, [0.0], [0.0], fd_step=0.0)


def test_differential_matrices_shape_check():
    with pytest.raises(ContractViolation, match="D has shape"):
        DifferentialMatrices(np.eye(2), np.ones((2, 1)), np.ones((1, 2)), np.ones((2, 1)))


# -- RK4 ------------------------------------------------------------------------------

def _decay(x, u):
    return -x


def _integrator(x, u):
    return np.array([u[0]])


def test_rk4_decay_factor():
    d = rk4_discretize(ContinuousTimeSystem(1, 1, _decay), 0.1)
    x_next, _ = evaluate(d, [1.0], [0.0])
    assert x_next[0] == pytest.approx(1 - 0.1 + 0.1 ** 2 / 2 - 0.1 ** 3 / 6 + 0.1 ** 4 / 24,
                                      rel=1e-14)
    assert x_next[0] == pytest.approx(0.9048375, abs=1e-7)


def test_rk4_integrator():
    d = rk4_discretize(ContinuousTimeSystem(1, 1, _integrator), 0.05)
    x_next, _ = evaluate(d, [2.0], [3.0])
    assert x_next[0] == pytest.approx(2.15, rel=1e-15)


def test_rk4_disk_matches_independent_stages():
    p = examples.DiskParameters()
    x, u, Ts = np.array([math.pi, 0.0]), 0.0, p.Ts

    def f(x):
        return np.array([x[1], p.M * p.g * p.l / p.J * math.sin(x[0]) - x[1] / p.tau
                         + p.Km / p.tau * u])

    k1 = f(x)
    k2 = f(x + Ts / 2 * k1)
    k3 = f(x + Ts / 2 * k2)
    k4 = f(x + Ts * k3)
    expected = x + Ts / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    got, _ = evaluate(examples.discretized_disk(), x, [u])
    assert np.all(np.isfinite(got))
    np.testing.assert_allclose(got, expected, rtol=1e-15, atol=1e-15)


def test_rk4_rejects_bad_sample_time():
    with pytest.raises(ContractViolation):
        rk4_discretize(ContinuousTimeSystem(1, 1, _decay), 0.0)


def _linear_ct(A, x, u):
    return A @ x


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 4), seed=st.integers(0, 2**32 - 1), Ts=st.floats(0.01, 0.5))
def test_rk4_linear_equals_taylor_truncation(n, seed, Ts):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    A -= (max(np.linalg.eigvals(A).real) + 0.5) * np.eye(n)
    d = rk4_discretize(ContinuousTimeSystem(n, 1, partial(_linear_ct, A)), Ts)
    Phi = np.column_stack([evaluate(d, e, [0.0])[0] for e in np.eye(n)])
    taylor = sum(np.linalg.matrix_power(Ts * A, i) / math.factorial(i) for i in range(5))
    assert np.max(np.abs(Phi - taylor)) <= 1e-12 * max(1.0, np.max(np.abs(taylor)))


def test_rk4_analytic_jacobian_matches_fd():
    fd = examples.discretized_disk()
    an = examples.discretized_disk(analytic_jacobian=True)
    x, u = np.array([0.4, -2.0]), np.array([1.5])
    for a, b in zip(jacobians(fd, x, u).as_tuple(), jacobians(an, x, u).as_tuple()):
        np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-8)


# -- interconnection ------------------------------------------------------------------

def _double_integrator(x, u):
    return np.array([x[1], u[0]])


def test_zero_controller_is_passthrough():
    plant = rk4_discretize(ContinuousTimeSystem(2, 1, _double_integrator), 0.1,
                           output_matrix=[[1.0, 0.0]])
    ctrl = LtiController.constant(np.zeros((1, 2)), np.zeros((1, 1)), np.zeros((1, 2)))
    cl = feedback_interconnect(plant, ctrl)
    rng = np.random.default_rng(0)
    for _ in range(5):
        x, w = rng.standard_normal(2), rng.standard_normal(1)
        s_next, z = evaluate(cl, np.append(x, 0.3), w)
        p_next, pz = evaluate(plant, x, w)
        np.testing.assert_array_equal(s_next[:2], p_next)
        assert s_next[2] == 0.3
        np.testing.assert_array_equal(z, pz)


def test_disk_loop_dimensions_and_fixed_point():
    cl = examples.disk_closed_loop("lti")
    assert (cl.n_x, cl.n_w, cl.n_z) == (3, 1, 1)
    s_next, z = evaluate(cl, np.zeros(3), [0.0])
    assert s_next.tolist() == [0.0, 0.0, 0.0] and z.tolist() == [0.0]


def test_interconnect_dimension_mismatch():
    ctrl = LtiController.constant([[1.0]], [[1.0]], [[1.0]])
    with pytest.raises(ContractViolation, match="controller input dimension"):
        feedback_interconnect(examples.discretized_disk(), ctrl)


def test_controller_gain_shape_check():
    with pytest.raises(ContractViolation, match="inconsistent controller gains"):
        LtiController.constant([[1.0, 0.0]], [[1.0, 2.0]], [[1.0, 1.0]])


def test_systems_pickle():
    cl = examples.disk_closed_loop("lpv")
    clone = pickle.loads(pickle.dumps(cl))
    s = np.array([0.3, -1.0, 4.0])
    np.testing.assert_array_equal(evaluate(cl, s, [0.2])[0], evaluate(clone, s, [0.2])[0])


@settings(max_examples=30, deadline=None)
@given(x=arrays(float, 3, elements=st.floats(-3, 3)), w=arrays(float, 1, elements=st.floats(-5, 5)))
def test_closed_loop_output_is_angle(x, w):
    _, z = evaluate(examples.disk_closed_loop("lti"), x, w)
    assert z[0] == x[0]
