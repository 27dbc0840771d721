import numpy as np
import pytest

from ddspc.safety import (
    BarrierSpec,
    UncertaintyBounds,
    barrier_from_config,
    box_barrier,
    cbf_decay_check,
    empirical_bound,
    estimate_lipschitz,
    max_barrier,
    norm_barrier,
    rcbf_constraint_residual,
    rcbf_value,
)

PAPER_BOUNDS = UncertaintyBounds(0.01, 0.01, 0.01)


def const(v):
    return lambda x: v


def test_decay_check_examples():
    h = lambda x: x
    assert cbf_decay_check(h, -1.0, -0.5, 0.5) == pytest.approx(0.0)
    assert cbf_decay_check(h, -1.0, -0.6, 0.5) == pytest.approx(-0.1)
    # gamma = 1 reduces to h(x_k1) <= 0
    assert cbf_decay_check(h, 123.0, -0.2, 1.0) == pytest.approx(-0.2)


@pytest.mark.parametrize("gamma", [0.0, -0.1, 1.5])
def test_gamma_out_of_range(gamma):
    with pytest.raises(ValueError):
        cbf_decay_check(lambda x: x, 0.0, 0.0, gamma)
    with pytest.raises(ValueError):
        rcbf_constraint_residual(lambda x: x, 1.0, PAPER_BOUNDS, 0.0, 0.0, gamma)


def test_rcbf_value_examples():
    assert rcbf_value(const(-2.0), 1.0, PAPER_BOUNDS, None) == pytest.approx(-1.97)
    assert rcbf_value(const(-2.0), 1.0, UncertaintyBounds(), None) == -2.0


def test_rcbf_residual_examples():
    h = lambda x: x
    for a, b, g in [(-1.0, -0.5, 0.5), (-3.0, 2.0, 0.2), (0.4, -1.0, 1.0)]:
        assert rcbf_constraint_residual(h, 1.0, UncertaintyBounds(), a, b, g) == cbf_decay_check(h, a, b, g)
    # gamma = 1: h(x_k1) <= -eta * sum(eps)
    assert rcbf_constraint_residual(h, 1.0, PAPER_BOUNDS, 5.0, -0.03, 1.0) == pytest.approx(0.0)
    # h(x_k) = -3, gamma = 0.5: satisfied iff h(x_k1) <= -1.5 - 0.015 = -1.515
    assert rcbf_constraint_residual(h, 1.0, PAPER_BOUNDS, -3.0, -1.515, 0.5) == pytest.approx(0.0, abs=1e-15)
    assert rcbf_constraint_residual(h, 1.0, PAPER_BOUNDS, -3.0, -1.52, 0.5) < 0
    assert rcbf_constraint_residual(h, 1.0, PAPER_BOUNDS, -3.0, -1.51, 0.5) > 0


def test_builtin_barriers():
    b = box_barrier(0, 5.0)
    assert b([3.0, 100.0]) == -2.0 and b([-6.0, 0.0]) == 1.0
    np.testing.assert_array_equal(b.gradient(np.array([-1.0, 0.0])), [-1.0, 0.0])
    n = norm_barrier(0.5)
    assert n([0.3, 0.4]) == pytest.approx(0.0)
    m = max_barrier(box_barrier(0, 1.0), box_barrier(1, 2.0, eta=3.0))
    assert m([0.5, 2.5]) == pytest.approx(0.5) and m.eta == 3.0
    np.testing.assert_array_equal(m.gradient(np.array([0.5, 2.5])), [0.0, 1.0])


def test_barrier_config_forms():
    b = barrier_from_config({"type": "box", "coord": 0, "bound": 5.0, "eta": 1.0})
    assert b([4.0, 0, 0, 0]) == -1.0
    n = barrier_from_config({"type": "norm", "radius": 0.5})
    assert n([0.5, 0, 0, 0]) == 0.0
    mx = barrier_from_config({"type": "max", "parts": [{"type": "box", "coord": 0, "bound": 5.0},
                                                       {"type": "box", "coord": 2, "bound": 1.0}]})
    assert mx([0, 0, 2.0, 0]) == 1.0
    with pytest.raises(ValueError):
        barrier_from_config({"type": "ellipse"})
    with pytest.raises(ValueError):
        BarrierSpec(lambda x: 0.0, 0.0)


def test_analytic_gradients_match_numeric():
    rng = np.random.default_rng(0)
    for spec in (box_barrier(1, 2.0), norm_barrier(1.0, coords=[0, 2]), norm_barrier(0.5)):
        plain = BarrierSpec(spec.h, spec.eta)
        for _ in range(10):
            x = rng.normal(size=4)
            np.testing.assert_allclose(spec.gradient(x), plain.gradient(x), atol=1e-6)


def sample_ball(rng, center, radius):
    d = rng.normal(size=center.size)
    d /= np.linalg.norm(d)
    return center + d * radius * rng.random() ** (1.0 / center.size)


@pytest.mark.parametrize("spec", [box_barrier(0, 5.0), norm_barrier(0.5), norm_barrier(1.0, coords=[0, 2]),
                                  max_barrier(box_barrier(0, 5.0), box_barrier(2, 0.5))])
def test_rcbf_covers_error_ball(spec):
    rng = np.random.default_rng(1)
    rad = PAPER_BOUNDS.total
    for _ in range(2000):
        xh = rng.normal(size=4) * 3
        x = sample_ball(rng, xh, rad)
        assert spec(x) <= rcbf_value(spec, spec.eta, PAPER_BOUNDS, xh)


def test_rcbf_monotone_in_bounds():
    h = box_barrier(0, 5.0)
    x = np.array([1.0, 0, 0, 0])
    assert rcbf_value(h, 1.0, PAPER_BOUNDS, x) >= h(x)
    big = UncertaintyBounds(0.02, 0.01, 0.01)
    assert rcbf_value(h, 1.0, big, x) >= rcbf_value(h, 1.0, PAPER_BOUNDS, x)


def test_forward_invariance_scalar():
    # x+ = 1.2 x + u; controller picks the least-effort u that meets the residual
    h = box_barrier(0, 1.0)
    eta = h.eta
    x = np.array([0.5])
    gamma = 0.3
    assert rcbf_value(h, eta, PAPER_BOUNDS, x) <= 0
    rng = np.random.default_rng(2)
    for _ in range(200):
        target = (1 - gamma) * h(x) - gamma * eta * PAPER_BOUNDS.total + 1.0  # bound on |x+|
        nominal = 1.2 * x[0] + rng.normal() * 0.5
        x_next = np.clip(nominal, -target, target)
        assert rcbf_constraint_residual(h, eta, PAPER_BOUNDS, x, [x_next], gamma) <= 1e-12
        x = np.array([x_next])
        assert rcbf_value(h, eta, PAPER_BOUNDS, x) <= 1e-12


def test_estimate_lipschitz_examples():
    lo, hi = -np.ones(2), np.ones(2)
    e1 = estimate_lipschitz(lambda x: x[0], lo, hi, 2000)
    assert 1.0 <= e1 <= 1.2 + 1e-12
    with pytest.warns(UserWarning):
        assert estimate_lipschitz(lambda x: 3.0, lo, hi, 100) == 0.0
    e2 = estimate_lipschitz(lambda x: 2 * np.linalg.norm(x), lo, hi, 20000)
    assert e2 >= 2.0
    with pytest.raises(ValueError):
        estimate_lipschitz(lambda x: x[0], lo, lo, 100)


def test_empirical_bound():
    assert empirical_bound([[3.0, 4.0], [0.0, 1.0]]) == pytest.approx(7.5)
    assert empirical_bound(np.zeros((0, 2))) == 0.0
