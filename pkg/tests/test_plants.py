import numpy as np
import pytest

from ddspc.models import fd_jacobians
from ddspc.plants import (
    CartPoleModel,
    CartPoleParams,
    CsvSchemaError,
    DisturbanceModel,
    cartpole_accels,
    mechanical_energy,
    read_io_csv,
    replay_plant,
    sample_disturbance,
    step,
    write_io_csv,
)

P = CartPoleParams()


def test_paper_parameters():
    assert (P.m_cart, P.m_pend, P.L, P.K_d, P.g, P.T) == (5.0, 1.0, 2.0, 10.0, 9.81, 0.1)


def test_accels_upright_equilibrium():
    assert cartpole_accels([0, 0, 0, 0], 0.0) == (0.0, 0.0)


def test_accels_pushed():
    zdd, thdd = cartpole_accels([0, 0, 0, 0], 5.0)
    assert zdd == pytest.approx(1.0)
    assert thdd == pytest.approx(0.5)


def test_accels_horizontal_pole():
    zdd, thdd = cartpole_accels([0, 0, np.pi / 2, 0], 0.0)
    assert zdd == pytest.approx(0.0, abs=1e-12)
    assert thdd == pytest.approx(4.905)


@pytest.mark.parametrize("integrator", ["euler", "rk4"])
def test_equilibrium_fixed_point(integrator):
    x = step(P, np.zeros(4), 0.0, np.zeros(4), integrator)
    assert np.array_equal(x, np.zeros(4))


def test_disturbance_added_after_integration():
    x0 = np.array([0.1, 0.2, 0.05, -0.1])
    w = np.array([0.01, -0.01, 0.01, -0.01])
    np.testing.assert_array_equal(step(P, x0, 3.0, w), step(P, x0, 3.0) + w)


def test_euler_converges_to_rk4():
    x0 = np.array([0.0, 0.3, 0.4, -0.2])
    ref = step(P, x0, 2.0, integrator="rk4", substeps=400)
    errs = [np.linalg.norm(step(P, x0, 2.0, integrator="euler", substeps=s) - ref) for s in (25, 50, 100)]
    # first-order method: halving the step halves the error
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.1)
    assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.1)
    rk_errs = [np.linalg.norm(step(P, x0, 2.0, integrator="rk4", substeps=s) - ref) for s in (1, 2)]
    # fourth-order: ratio near 16
    assert rk_errs[0] / rk_errs[1] > 10


@pytest.mark.parametrize("x0", [[0, 0, 0.3, 0], [0, 0.5, 2.5, 0.3], [0, 0, np.pi - 0.5, 0]])
def test_energy_conserved_without_damping(x0):
    p = CartPoleParams(K_d=0.0)
    x = np.array(x0, dtype=float)
    e0 = mechanical_energy(x, p)
    for _ in range(100):  # 10 s
        x = step(p, x, 0.0)
        assert abs(mechanical_energy(x, p) - e0) <= 1e-5 * abs(e0)


def test_unknown_integrator():
    with pytest.raises(ValueError):
        step(P, np.zeros(4), 0.0, integrator="midpoint")


def test_model_jacobians_match_finite_differences():
    model = CartPoleModel()
    rng = np.random.default_rng(3)
    for _ in range(5):
        x = rng.normal(size=4)
        u = rng.normal(size=1) * 10
        A, B = model.jacobians(x, u)
        A_fd, B_fd = fd_jacobians(model.step, x, u)
        np.testing.assert_allclose(A, A_fd, atol=1e-8)
        np.testing.assert_allclose(B, B_fd, atol=1e-8)


def test_disturbance_bounds_and_determinism():
    d = DisturbanceModel("uniform_box", (0.01,) * 4, seed=7)
    ws = np.array([sample_disturbance(d, k) for k in range(2000)])
    assert np.all(np.abs(ws) <= 0.01)
    assert np.all(np.linalg.norm(ws, axis=1) <= d.eps_w)
    assert d.eps_w == pytest.approx(0.01 * 2.0)
    again = np.array([sample_disturbance(d, k) for k in range(2000)])
    np.testing.assert_array_equal(ws, again)
    assert ws.min() < -0.009 and ws.max() > 0.009


def test_zero_disturbance():
    assert not np.any(sample_disturbance(DisturbanceModel("uniform_box", (0.0,) * 4), 3))
    assert not np.any(sample_disturbance(DisturbanceModel(), 3))


def test_csv_round_trip(tmp_path):
    t = np.arange(3) * 0.1
    U = np.array([[1.0], [2.0], [3.0]])
    Y = np.array([[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]])
    path = tmp_path / "io.csv"
    write_io_csv(path, t, U, Y)
    pairs = list(replay_plant(path))
    assert len(pairs) == 3
    for k, (u, y) in enumerate(pairs):
        np.testing.assert_array_equal(u, U[k])
        np.testing.assert_array_equal(y, Y[k])
    t2, U2, Y2 = read_io_csv(path)
    np.testing.assert_array_equal(t2, t)
    np.testing.assert_array_equal(U2, U)
    np.testing.assert_array_equal(Y2, Y)


def test_csv_malformed_row_reports_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("t,u_1,y_1\n0,1,2\n0.1,abc,3\n")
    with pytest.raises(CsvSchemaError) as err:
        list(replay_plant(path))
    assert err.value.line == 3


def test_csv_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("time,u1,y1\n0,1,2\n")
    with pytest.raises(CsvSchemaError):
        list(replay_plant(path))
