import numpy as np
import pytest

from errors import InvalidArgumentError, SingularityError
from flow_matching import (S_MAX, S_MIN, VarianceSchedule, euler_integrate, fm_loss, interpolate,
                           make_flow_batch, sample_flow_batch, sample_flow_time, sample_spectrograms,
                           target_field)


def test_interpolation_endpoints(rng):
    phi = rng.standard_normal((3, 5, 4))
    eps = rng.standard_normal((3, 5, 4))
    np.testing.assert_array_equal(interpolate(phi, eps, 0.0), eps)
    np.testing.assert_array_equal(interpolate(phi, eps, 1.0), phi)


def test_scalar_example():
    phi = np.array([2.0])
    eps = np.array([1.0])
    g = interpolate(phi, eps, 0.5)
    assert g[0] == pytest.approx(1.5)
    assert target_field(g, phi, 0.5)[0] == pytest.approx(1.0)


def test_linear_target_is_phi_minus_eps(rng):
    for _ in range(1000):
        phi = rng.standard_normal(6)
        eps = rng.standard_normal(6)
        s = float(rng.uniform(S_MIN, S_MAX))
        v = target_field(interpolate(phi, eps, s), phi, s)
        np.testing.assert_allclose(v, phi - eps, rtol=1e-9, atol=1e-9)


def test_per_sample_flow_time(rng):
    phi = rng.standard_normal((4, 3, 2))
    eps = rng.standard_normal((4, 3, 2))
    s = np.array([0.0, 0.25, 0.5, 0.9])
    g = interpolate(phi, eps, s)
    for i in range(4):
        np.testing.assert_allclose(g[i], interpolate(phi[i], eps[i], float(s[i])))
    np.testing.assert_allclose(target_field(g, phi, s), phi - eps, atol=1e-12)


def test_target_field_singular_at_one(rng):
    phi = rng.standard_normal(3)
    with pytest.raises(SingularityError):
        target_field(phi, phi, 1.0)
    with pytest.raises(SingularityError):
        target_field(phi, phi, 1.0, schedule=VarianceSchedule("cosine"))


def test_flow_time_out_of_range(rng):
    phi = rng.standard_normal(3)
    with pytest.raises(InvalidArgumentError):
        interpolate(phi, phi, 1.5)
    with pytest.raises(InvalidArgumentError):
        interpolate(phi, phi, -0.1)


def test_interpolate_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        interpolate(np.zeros(3), np.zeros(4), 0.5)


def test_cosine_schedule(rng):
    sched = VarianceSchedule("cosine")
    assert sched.sigma(0.0) == pytest.approx(1.0)
    assert sched.sigma(1.0) == 0.0
    phi = rng.standard_normal(5)
    eps = rng.standard_normal(5)
    for s in (0.1, 0.4, 0.8):
        g = interpolate(phi, eps, s, sched)
        # 目标场就是 g 对 s 的导数
        expected = phi + sched.sigma_prime(s) * eps
        np.testing.assert_allclose(target_field(g, phi, s, sched), expected, rtol=1e-9, atol=1e-12)


def test_unknown_schedule():
    with pytest.raises(InvalidArgumentError):
        VarianceSchedule("sigmoid")


def test_sample_flow_time_range_and_mean():
    rng = np.random.default_rng(0)
    s = sample_flow_time(rng, size=20000)
    assert s.min() >= S_MIN and s.max() <= S_MAX
    assert abs(s.mean() - (S_MIN + S_MAX) / 2) < 0.01
    with pytest.raises(InvalidArgumentError):
        sample_flow_time(rng, 0.5, 0.5)


def test_sample_flow_batch_draw_order():
    phi = np.zeros((4, 3, 2))
    batch = sample_flow_batch(phi, np.random.default_rng(42))
    fresh = np.random.default_rng(42)
    np.testing.assert_array_equal(batch.s, fresh.uniform(S_MIN, S_MAX, size=4))
    np.testing.assert_array_equal(batch.epsilon, fresh.standard_normal(phi.shape))
    assert len(batch) == 4


def test_fm_loss_zero_for_exact_field(rng):
    phi = rng.standard_normal((2, 3, 4))
    batch = make_flow_batch(phi, rng.standard_normal(phi.shape), np.array([0.2, 0.7]))
    assert fm_loss(lambda g, s: batch.v, batch).item() == 0.0
    assert fm_loss(lambda g, s: batch.v + 1.0, batch).item() == pytest.approx(1.0)


@pytest.mark.parametrize("steps", [1, 5, 50])
def test_euler_matches_hand_oracle(steps):
    # u(g, s) = s 时 Euler 的结果是 ds²·n(n−1)/2
    ds = 1.0 / steps
    out = euler_integrate(lambda g, s: np.full_like(g, s), np.zeros(2), 0.0, 1.0, steps)
    np.testing.assert_allclose(out, ds * ds * steps * (steps - 1) / 2, atol=1e-12)


def test_euler_constant_field_exact():
    out = euler_integrate(lambda g, s: np.full_like(g, 3.0), np.ones(3), 0.2, 0.7, 7)
    np.testing.assert_allclose(out, 1.0 + 3.0 * 0.5, atol=1e-12)


def test_euler_first_order_convergence():
    errors = []
    for steps in (50, 100, 200):
        out = euler_integrate(lambda g, s: g, np.ones(1), 0.0, 1.0, steps)
        errors.append(abs(out[0] - np.e))
    assert errors[0] / errors[1] == pytest.approx(2.0, rel=0.05)
    assert errors[1] / errors[2] == pytest.approx(2.0, rel=0.05)


def test_euler_rejects_bad_arguments():
    with pytest.raises(InvalidArgumentError):
        euler_integrate(lambda g, s: g, np.ones(1), 0.0, 1.0, 0)
    with pytest.raises(InvalidArgumentError):
        euler_integrate(lambda g, s: g, np.ones(1), 1.0, 0.0, 4)


def test_euler_does_not_mutate_input():
    g0 = np.ones(3)
    euler_integrate(lambda g, s: g, g0, 0.0, 1.0, 3)
    assert g0.tolist() == [1.0, 1.0, 1.0]


def test_sample_spectrograms_with_oracle_field(rng):
    # 零速度场时输出就是初始噪声
    shape = (2, 3, 4)
    out = sample_spectrograms(lambda g, s: np.zeros_like(g), shape, 10, np.random.default_rng(5))
    np.testing.assert_allclose(out, np.random.default_rng(5).standard_normal(shape).astype(np.float32))


def test_linear_target_on_fixed_grid(rng):
    phi = rng.standard_normal((1000, 4))
    eps = rng.standard_normal((1000, 4))
    for s in [k / 10 for k in range(10)] + [0.95]:
        v = target_field(interpolate(phi, eps, s), phi, s)
        np.testing.assert_allclose(v, phi - eps, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("steps", [1, 5, 50])
def test_euler_oracle_transport_recovers_phi(rng, steps):
    phi = rng.standard_normal((3, 5))
    eps = rng.standard_normal((3, 5))
    out = euler_integrate(lambda g, s: phi - eps, eps, 0.0, 1.0, steps)
    np.testing.assert_allclose(out, phi, rtol=0, atol=1e-12)


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
