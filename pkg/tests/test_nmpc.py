import numpy as np
import pytest
from scipy.optimize import minimize, minimize_scalar

from ddspc import nmpc
from ddspc.models import LinearModel
from ddspc.plants import CartPoleModel, CartPoleParams, step
from ddspc.safety import UncertaintyBounds, box_barrier


def weights(n, m, ny, P_gamma=1.0, scale=1.0):
    return nmpc.CostWeights(np.eye(n) * scale, np.eye(m) * 0.1, np.eye(ny), np.eye(n) * 2, np.eye(ny), P_gamma)


def test_stage_and_terminal_cost_examples():
    w = nmpc.CostWeights(np.eye(1), np.eye(1), np.eye(1), np.eye(1), np.eye(1))
    assert nmpc.stage_cost([0.0], [0.0], [1.0], [1.0], w) == 0.0
    assert nmpc.stage_cost([1.0], [2.0], [3.0], [0.0], w) == 14.0
    assert nmpc.stage_cost([-1.0], [-2.0], [-3.0], [0.0], w) == 14.0
    assert nmpc.terminal_cost([1.0], [2.0], [0.0], w) == 5.0


def test_weights_must_be_pd():
    with pytest.raises(ValueError):
        nmpc.CostWeights(np.diag([1.0, -1.0]), np.eye(1), np.eye(1), np.eye(2), np.eye(1))
    with pytest.raises(ValueError):
        nmpc.CostWeights(np.eye(1), np.eye(1), np.eye(1), np.eye(1), np.eye(1), P_gamma=0.0)


def linear_system():
    A = np.array([[1.0, 0.1], [-0.2, 0.95]])
    B = np.array([[0.0], [0.1]])
    return LinearModel(A, B, C=np.array([[1.0, 0.0]]))


def test_linear_unconstrained_matches_closed_form_n1():
    m = linear_system()
    w = weights(2, 1, 1)
    x0 = np.array([0.7, -0.3])
    r1 = np.array([0.4])
    prob = nmpc.OcpProblem(m, x0, [[0.0], r1], w, -1e6, 1e6)
    sol = nmpc.solve(prob)
    W = w.Q_N + m.C.T @ w.P_N @ m.C
    u_star = -np.linalg.solve(w.R + m.B.T @ W @ m.B, m.B.T @ W @ m.A @ x0 - m.B.T @ m.C.T @ w.P_N @ r1)
    assert sol.status == "solved"
    np.testing.assert_allclose(sol.u[0], u_star, atol=1e-6)
    assert sol.gamma == pytest.approx(1e-3)


def test_linear_unconstrained_matches_batch_least_squares():
    m = linear_system()
    w = weights(2, 1, 1)
    x0 = np.array([0.5, 0.2])
    ref = np.array([[0.0], [0.3], [0.3], [0.3], [0.3]])
    N = 4
    # batch oracle: x_k = A^k x0 + sum A^(k-1-j) B u_j
    Phi = np.zeros((N + 1, 2, N))
    for k in range(1, N + 1):
        for j in range(k):
            Phi[k][:, j] = (np.linalg.matrix_power(m.A, k - 1 - j) @ m.B)[:, 0]
    free = [np.linalg.matrix_power(m.A, k) @ x0 for k in range(N + 1)]

    def J(u):
        tot = 0.0
        for k in range(N + 1):
            x = free[k] + Phi[k] @ u
            e = m.C @ x - ref[k]
            if k < N:
                tot += x @ w.Q @ x + 0.1 * u[k] ** 2 + e @ e
            else:
                tot += x @ w.Q_N @ x + e @ e
        return tot

    oracle = minimize(J, np.zeros(N), method="BFGS", options={"gtol": 1e-12}).x
    sol = nmpc.solve(nmpc.OcpProblem(m, x0, ref, w, -1e6, 1e6))
    np.testing.assert_allclose(sol.u[:, 0], oracle, atol=1e-6)


def test_barrier_inactive_deep_inside():
    m = linear_system()
    w = weights(2, 1, 1)
    x0 = np.array([0.3, 0.1])
    ref = np.zeros((5, 1))
    a = nmpc.solve(nmpc.OcpProblem(m, x0, ref, w, -5, 5))
    b = nmpc.solve(nmpc.OcpProblem(m, x0, ref, w, -5, 5, box_barrier(0, 100.0), UncertaintyBounds(0.01, 0.01, 0.01)))
    np.testing.assert_allclose(a.u, b.u, atol=1e-6)


def test_input_box_respected_exactly():
    m = linear_system()
    w = weights(2, 1, 1)
    sol = nmpc.solve(nmpc.OcpProblem(m, [5.0, 0.0], np.zeros((4, 1)), w, -0.5, 0.5))
    assert np.all(sol.u >= -0.5) and np.all(sol.u <= 0.5)
    assert np.any(np.abs(sol.u) == 0.5)


def integrator():
    return LinearModel([[1.0]], [[1.0]], C=[[1.0]])


def test_active_barrier_and_gamma_monotone_in_penalty():
    m = integrator()
    h = box_barrier(0, 1.0)
    bounds = UncertaintyBounds(0.01, 0.01, 0.01)
    gammas = []
    for pg in (1e-3, 1e-2, 0.1, 1.0, 10.0, 100.0):
        w = nmpc.CostWeights(np.eye(1) * 1e-3, np.eye(1) * 1e-2, np.eye(1), np.eye(1) * 1e-3, np.eye(1), pg)
        sol = nmpc.solve(nmpc.OcpProblem(m, [0.5], np.full((4, 1), 3.0), w, -1, 1, h, bounds))
        assert sol.status == "solved"
        assert sol.violation <= 1e-8
        assert 1e-3 <= sol.gamma <= 1.0
        assert all(after <= before for before, after in sol.merit_steps)
        gammas.append(sol.gamma)
    assert all(b <= a + 1e-9 for a, b in zip(gammas, gammas[1:]))
    assert gammas[0] > gammas[-1]


def test_soft_constraint_fallback_is_reported():
    m = integrator()
    w = nmpc.CostWeights(np.eye(1), np.eye(1), np.eye(1), np.eye(1), np.eye(1))
    # the input can only push further out of the safe set: no decay is possible
    sol = nmpc.solve(nmpc.OcpProblem(m, [1.5], np.zeros((3, 1)), w, 0.0, 0.01, box_barrier(0, 1.0)))
    assert sol.fallback
    assert sol.status == "infeasible"


def test_trace_csv(tmp_path):
    m = linear_system()
    sol = nmpc.solve(nmpc.OcpProblem(m, [0.3, 0.0], np.zeros((3, 1)), weights(2, 1, 1), -1, 1),
                     options=nmpc.SolverOptions(record_trace=True))
    path = tmp_path / "t.csv"
    sol.write_trace(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,merit,kkt_residual,step_norm,gamma"
    assert len(lines) >= 2


def cartpole_controller(bounds=UncertaintyBounds(0.02, 0.01, 0.01)):
    model = CartPoleModel()
    Q = np.diag([1.0, 0.1, 1.0, 0.1])
    R = np.array([[0.01]])
    P = np.eye(2)
    QN = nmpc.lqr_terminal_weight(model, np.zeros(4), 0.0, Q, R, model.C, P)
    w = nmpc.CostWeights(Q, R, P, QN, np.eye(2) * 1e-6)
    return nmpc.NmpcController(model, w, 4, -100, 100, box_barrier(0, 5.0), bounds)


def test_cartpole_closed_loop_stabilizes_safely():
    ctl = cartpole_controller()
    x = np.array([1.0, 0.0, 0.2, 0.0])
    p = CartPoleParams()
    for k in range(80):
        sol = ctl.solve(x, np.zeros((5, 2)))
        assert sol.status == "solved" and not sol.fallback
        assert all(after <= before for before, after in sol.merit_steps)
        x = step(p, x, sol.u[0])
        assert abs(x[0]) <= 5.0
    assert np.linalg.norm(x) < 0.05


def test_warm_start_shifts_previous_solution():
    ctl = cartpole_controller()
    x = np.array([0.5, 0.0, 0.1, 0.0])
    sol = ctl.solve(x, np.zeros((5, 2)))
    U, g = ctl._warm
    np.testing.assert_array_equal(U[:-1], sol.u[1:])
    np.testing.assert_array_equal(U[-1], sol.u[-1])


def test_steady_state_linear_origin():
    m = linear_system()
    ss = nmpc.steady_state_solve(m, [0.0], weights(2, 1, 1), -1, 1, x_init=[0.3, -0.2], u_init=[0.4])
    assert ss.status == "solved"
    np.testing.assert_allclose(ss.x, 0.0, atol=1e-8)
    np.testing.assert_allclose(ss.u, 0.0, atol=1e-8)


def test_steady_state_cartpole_upright():
    model = CartPoleModel()
    w = nmpc.CostWeights(np.diag([1.0, 0.1, 1.0, 0.1]), np.eye(1) * 0.01, np.eye(2), np.eye(4), np.eye(2))
    ss = nmpc.steady_state_solve(model, [0.0, 0.0], w, -100, 100, x_init=[0.2, 0.0, 0.05, 0.0])
    assert ss.status == "solved"
    assert abs(ss.x[2]) < 1e-8
    assert ss.fixed_point_residual <= 1e-8
    assert np.linalg.norm(model.step(ss.x, ss.u) - ss.x) <= 1e-8


def test_steady_state_cartpole_tracking_matches_scalar_oracle():
    # equilibria are (z, 0, 0, 0) with u = 0, so the optimum reduces to a scalar problem in z
    model = CartPoleModel()
    Q = np.diag([0.5, 0.1, 1.0, 0.1])
    w = nmpc.CostWeights(Q, np.eye(1) * 0.01, np.eye(2), np.eye(4) * 0.2, np.eye(2) * 3.0)
    r = np.array([1.0, 0.0])
    ss = nmpc.steady_state_solve(model, r, w, -100, 100)
    oracle = minimize_scalar(lambda z: 0.7 * z * z + 4.0 * (z - 1.0) ** 2).x
    assert ss.x[0] == pytest.approx(oracle, abs=1e-7)
    assert ss.fixed_point_residual <= 1e-8
