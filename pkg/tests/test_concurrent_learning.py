import numpy as np
import pytest

from ddspc import concurrent_learning as cl
from ddspc import stf_model as stf
from _synthetic import composite_system, filled_stack, sample_zeta, uniform_fixed_rate


def stack_of(cols, cap=None, ys=None):
    Z = np.array(cols, dtype=float)
    q = Z.shape[1]
    ys = np.zeros((len(Z), 1)) if ys is None else np.asarray(ys, float).reshape(len(Z), 1)
    return cl.HistoryStack(Z, ys, np.ones(len(Z)), cap or max(len(Z), q))


def test_normalize_examples():
    zb, m = cl.normalize(np.zeros(3), 1.0)
    assert m == 1.0 and not zb.any()
    zb, m = cl.normalize(np.array([3.0]), 7.0)
    assert m == 4.0 and zb[0] == 0.75
    rng = np.random.default_rng(0)
    for _ in range(100):
        z = rng.normal(size=5) * 10 ** rng.uniform(-3, 3)
        assert np.linalg.norm(cl.normalize(z, 0.1)[0]) < 1.0


def test_rank_condition_examples():
    assert cl.rank_condition(stack_of([[1, 0], [0, 1]]))
    assert not cl.rank_condition(stack_of([[1, 0], [2, 0]]))
    assert not cl.rank_condition(cl.HistoryStack.empty(2, 1))


def test_h_matrices_examples():
    H1, H2 = cl.h_matrices(stack_of([[1, 0]], cap=2), [0, 1])
    np.testing.assert_array_equal(H2, np.eye(2))
    H1, _ = cl.h_matrices(cl.HistoryStack.empty(2, 1), [0.5, 0.5])
    assert not H1.any()


def test_h2_positive_when_rank_condition_holds():
    rng = np.random.default_rng(1)
    for _ in range(20):
        st = stack_of(rng.normal(size=(6, 4)) * 0.3)
        assert cl.rank_condition(st)
        _, H2 = cl.h_matrices(st, rng.normal(size=4) * 0.1)
        assert np.linalg.eigvalsh(H2)[0] > 0


def test_max_learning_rate_examples():
    assert cl.max_learning_rate(np.eye(3)) == pytest.approx(2.0)
    assert cl.max_learning_rate(np.diag([1.0, 4.0])) == pytest.approx(0.125)
    assert cl.max_learning_rate(np.diag([0.0, 1.0])) == 0.0


def test_update_fixed_point_when_exact():
    rng = np.random.default_rng(2)
    model, Phi, rng = composite_system(2)
    stack = filled_stack(model, Phi, rng)
    z = sample_zeta(model, rng)
    out = cl.cl_update(Phi, z, Phi @ z, stack, cl.LearningConfig(r=0.05, auto_rate=False))
    np.testing.assert_allclose(out, Phi, atol=1e-15)


def test_update_scalar_one_step():
    # rho -> 0: zbar = 1; current sample equals the stored one; r = 0.5
    stack = cl.HistoryStack(np.array([[1.0]]), np.array([[1.0]]), np.array([1.0]), 1)
    cfg = cl.LearningConfig(rho=1e-300, r=0.5, auto_rate=False)
    out = cl.cl_update(np.array([[0.0]]), np.array([1.0]), np.array([1.0]), stack, cfg)
    assert out[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_update_recovers_linear_system():
    rng = np.random.default_rng(3)
    A_true = rng.normal(size=(1, 3))
    b_true = rng.normal(size=1)
    hyper = stf.StfHyperParams(L_max=1, n_static=3)
    model = stf.CompositeStfModel(hyper, (stf.Cluster(np.zeros(4), np.eye(4), np.eye(1), 1, 3),),
                                  (stf.LocalLinearModel(np.zeros((1, 3)), np.zeros(1)),))
    Phi_true = np.hstack([A_true, b_true[:, None]])
    stack = cl.HistoryStack.empty(4, 1)
    data = [rng.normal(size=3) for _ in range(50)]
    for U in data[:20]:
        z = stf.pack_regressor(U, [1.0])
        stack, _ = cl.record_sample(stack, z, Phi_true @ z)
    # least-squares oracle reproduces the true parameters
    Z = np.array([stf.pack_regressor(U, [1.0]) for U in data])
    ls = np.linalg.lstsq(Z, Z @ Phi_true.T, rcond=None)[0].T
    np.testing.assert_allclose(ls, Phi_true, atol=1e-10)
    Phi = np.zeros((1, 4))
    cfg = cl.LearningConfig(safety_fraction=0.9)
    for k in range(500):
        U = data[k % len(data)]
        z = stf.pack_regressor(U, [1.0])
        Phi = cl.cl_update(Phi, z, Phi_true @ z, stack, cfg)
    assert np.linalg.norm(Phi - Phi_true) < 1e-8


def test_update_rejects_non_finite():
    stack = cl.HistoryStack.empty(1, 1)
    with pytest.raises(cl.LearningDiverged):
        cl.cl_update(np.array([[np.nan]]), np.array([1.0]), np.array([1.0]), stack, cl.LearningConfig())


def test_record_sample_appends_when_room():
    st, acc = cl.record_sample(cl.HistoryStack.empty(2, 1), np.array([1.0, 0.0]), [0.0])
    assert acc and len(st) == 1


def test_record_sample_rejects_duplicate():
    e = np.eye(3) * 0.5
    st = stack_of(e, cap=3)
    st2, acc = cl.record_sample(st, e[1], [0.0], m=1.0)
    assert not acc and st2 is st


def test_record_sample_accepts_new_direction():
    st = stack_of([[0.5, 0.0], [0.5, 0.0]], cap=2)
    st2, acc = cl.record_sample(st, np.array([0.0, 0.5]), [0.0], m=1.0)
    assert acc and cl.rank_condition(st2)


def test_record_sample_exhaustive_choice():
    rng = np.random.default_rng(4)
    st = stack_of(rng.normal(size=(4, 3)) * 0.4, cap=4)
    z = rng.normal(size=3) * 0.4
    st2, acc = cl.record_sample(st, z, [0.0], m=1.0)
    lmin = lambda Z: np.linalg.eigvalsh(Z.T @ Z)[0]
    best = max(lmin(np.vstack([np.delete(st.zbar, j, 0), z])) for j in range(4))
    if acc:
        assert lmin(st2.zbar) == pytest.approx(best, rel=1e-10)
    else:
        assert best <= lmin(st.zbar) + 1e-12


def test_record_sample_never_decreases_lambda_min():
    rng = np.random.default_rng(5)
    st = cl.HistoryStack.empty(4, 1, capacity=6)
    prev = 0.0
    for _ in range(300):
        st, _ = cl.record_sample(st, rng.normal(size=4), [0.0])
        cur = np.linalg.eigvalsh(st.zbar.T @ st.zbar)[0]
        assert cur >= prev - 1e-12
        prev = cur


def test_lyapunov_strictly_decreasing_without_noise():
    model, Phi, rng = composite_system(6)
    stack = filled_stack(model, Phi, rng)
    assert cl.rank_condition(stack)
    r = uniform_fixed_rate(stack)
    cfg = cl.LearningConfig(r=r, auto_rate=False)
    Ph = np.zeros_like(Phi)
    V = cl.lyapunov(Ph - Phi, r)
    for _ in range(300):
        z = sample_zeta(model, rng)
        _, H2 = cl.h_matrices(stack, cl.normalize(z, cfg.rho)[0])
        assert r < cl.max_learning_rate(H2)
        Ph = cl.cl_update(Ph, z, Phi @ z, stack, cfg)
        V_new = cl.lyapunov(Ph - Phi, r)
        assert V_new < V
        V = V_new


def test_uub_bound_formula():
    # hand evaluation: H2 = I, r = 0.5, eps = 0.1 -> Q1 = -1.5, Q2 = 0.3, Q3 = 0.005
    Q1, Q2, Q3 = -1.5, 0.3, 0.005
    expect = (-Q2 - np.sqrt(Q2 ** 2 - 4 * Q1 * Q3)) / (2 * Q1)
    assert cl.uub_bound(np.eye(2), 0.5, 0.1) == pytest.approx(expect)
    assert cl.uub_bound(np.eye(2), 0.5, 0.0) == 0.0
    assert cl.uub_bound(np.eye(2), 3.0, 0.1) == np.inf


def test_auto_rate_uses_half_of_bound():
    st = stack_of(np.eye(2) * 0.5)
    zeta = np.array([0.0, 0.0])
    _, info = cl.cl_step(np.zeros((1, 2)), zeta, [0.0], st, cl.LearningConfig())
    _, H2 = cl.h_matrices(st, zeta)
    assert info.r == pytest.approx(0.5 * cl.max_learning_rate(H2))


def test_fit_stf_learns_static_map(tmp_path):
    rng = np.random.default_rng(7)
    X = rng.uniform(-2, 2, size=(800, 2))
    Y = np.sin(X[:, :1]) + 0.5 * X[:, 1:]
    hyper = stf.StfHyperParams(L_max=4, n_static=2, create_threshold=3.0)
    trace = cl.TrainingTrace()
    model, stack = cl.fit_stf(X, Y, hyper, cl.LearningConfig(rate_rule="max_eig"), epochs=3, trace=trace)
    assert 1 <= model.L <= 4
    pred = stf.predict_batch(model, X)
    err = np.linalg.norm(pred - Y) / np.linalg.norm(Y - Y.mean())
    assert err < 0.2
    assert trace.rank_step is not None
    path = tmp_path / "trace.csv"
    trace.write_csv(path)
    assert path.read_text().splitlines()[0] == "step,rank_ok,lambda_min_H2,r,frob_param_delta"
