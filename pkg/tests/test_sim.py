import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuralpde.sim import (
    ConfigurationError,
    SimulationError,
    TimeGrid,
    antithetic_states,
    malliavin_h1,
    malliavin_h2,
    simulate_paths,
)


def zero_drift(t, x):
    return np.zeros_like(x)


def identity_diffusion(d):
    return lambda t, x: np.eye(d)


def within_3_se(samples, expected):
    samples = np.asarray(samples)
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])
    return np.all(np.abs(mean - expected) <= 3 * se + 1e-15)


def test_grid_geometry():
    g = TimeGrid(1.0, 20, 4)
    assert g.dt == pytest.approx(0.05)
    assert g.n_coarse == 5
    assert g.coarse_dt == pytest.approx(0.2)
    assert np.array_equal(g.coarse_indices, [0, 4, 8, 12, 16, 20])
    assert np.allclose(g.times[g.coarse_indices], np.arange(6) * 0.2)


@pytest.mark.parametrize("args", [(1.0, 20, 3), (0.0, 10, 1), (1.0, 0, 1), (1.0, 10, 0)])
def test_grid_rejects_bad_configuration(args):
    with pytest.raises(ConfigurationError):
        TimeGrid(*args)


def test_frozen_dynamics():
    g = TimeGrid(1.0, 5)
    p = simulate_paths(g, [0.3, -1.0], zero_drift, lambda t, x: np.zeros((2, 2)), 4, np.random.default_rng(0))
    assert np.array_equal(p.X, np.broadcast_to([0.3, -1.0], (4, 6, 2)))


def test_black_scholes_hand_step():
    class FixedIncrements:
        def standard_normal(self, shape):
            return np.full(shape, 0.1 / np.sqrt(0.25))

    g = TimeGrid(1.0, 4)
    p = simulate_paths(g, [1.0], zero_drift, lambda t, x: 0.2 * x[:, :, None], 1, FixedIncrements())
    assert p.dW[0, 0, 0] == pytest.approx(0.1)
    assert p.X[0, 1, 0] == pytest.approx(1.02)


def test_euler_recursion_replays_exactly():
    g = TimeGrid(2.0, 8)
    drift = lambda t, x: -0.5 * x + t
    diffusion = lambda t, x: np.einsum("b,ij->bij", 1.0 + 0.1 * np.sin(x[:, 0]), np.array([[1.0, 0.2], [0.0, 0.5]]))
    p = simulate_paths(g, [1.0, 0.0], drift, diffusion, 50, np.random.default_rng(1))
    for i in range(g.n_steps):
        t = g.t(i)
        x = p.X[:, i]
        expected = x + drift(t, x) * g.dt + np.einsum("bij,bj->bi", diffusion(t, x), p.dW[:, i])
        assert np.array_equal(p.X[:, i + 1], expected)


def test_brownian_moments():
    g = TimeGrid(1.5, 3)
    p = simulate_paths(g, [0.5, -0.5], zero_drift, identity_diffusion(2), 100_000, np.random.default_rng(2))
    xn = p.X[:, -1]
    assert within_3_se(xn, [0.5, -0.5])
    centered = xn - [0.5, -0.5]
    outer = (centered[:, :, None] * centered[:, None, :]).reshape(-1, 4)
    assert within_3_se(outer, (1.5 * np.eye(2)).ravel())
    assert within_3_se(p.dW.reshape(-1, 2) ** 2, [g.dt, g.dt])


def test_nan_coefficients_raise_with_step():
    g = TimeGrid(1.0, 5)
    drift = lambda t, x: np.full_like(x, np.nan) if t > 0.3 else np.zeros_like(x)
    with pytest.raises(SimulationError) as info:
        simulate_paths(g, [0.0], drift, identity_diffusion(1), 3, np.random.default_rng(0))
    assert info.value.step == 2


def test_seed_determinism_and_truncation():
    g = TimeGrid(1.0, 10)
    a = simulate_paths(g, [0.0], zero_drift, identity_diffusion(1), 20, np.random.default_rng(7))
    b = simulate_paths(g, [0.0], zero_drift, identity_diffusion(1), 20, np.random.default_rng(7))
    assert np.array_equal(a.X, b.X) and np.array_equal(a.dW, b.dW)
    c = simulate_paths(g, [0.0], zero_drift, identity_diffusion(1), 20, np.random.default_rng(7), n_steps=4)
    assert c.X.shape == (20, 5, 1)


def test_coarse_increment_sums_fine_increments():
    g = TimeGrid(1.0, 12, 3)
    p = simulate_paths(g, [0.0, 0.0], zero_drift, identity_diffusion(2), 5, np.random.default_rng(3))
    assert np.allclose(p.coarse_increment(1, 3), p.X[:, 9] - p.X[:, 3])


def test_path_csv_dump(tmp_path):
    g = TimeGrid(1.0, 2)
    p = simulate_paths(g, [0.0], zero_drift, identity_diffusion(1), 2, np.random.default_rng(0))
    path = tmp_path / "paths.csv"
    p.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "path_id,step,x_1,dW_1"
    assert len(lines) == 1 + 2 * 3
    assert float(lines[2].split(",")[2]) == p.X[0, 1, 0]


def test_antithetic_examples():
    sig = np.array([[1.0, 0.3], [0.0, 2.0]])
    anchor = np.array([0.4, -1.0])
    assert np.array_equal(antithetic_states(anchor, np.zeros(2), sig, np.zeros(2), 0.5), anchor)
    dw = np.array([0.3, -0.7])
    forward = anchor + sig @ dw
    assert np.allclose((forward + antithetic_states(anchor, np.zeros(2), sig, dw, 0.5)) / 2, anchor)
    assert np.array_equal(antithetic_states(np.zeros(2), np.zeros(2), np.eye(2), np.array([1.0, -1.0]), 1.0), [-1.0, 1.0])
    # with drift the reflection is around the drifted mean
    mu = np.array([0.2, 0.1])
    assert np.allclose(antithetic_states(anchor, mu, sig, dw, 0.5), anchor + 0.5 * mu - sig @ dw)


def test_malliavin_h1_examples():
    assert np.allclose(malliavin_h1(np.eye(2), np.array([0.2, -0.4]), 0.5), [0.4, -0.8])
    assert malliavin_h1(np.array([[2.0]]), np.array([1.0]), 1.0)[0] == pytest.approx(0.5)


def test_malliavin_h2_examples():
    assert malliavin_h2(np.eye(1), np.array([1.0]), 1, 1.0)[0, 0] == pytest.approx(0.0)
    assert malliavin_h2(np.eye(1), np.array([2.0]), 2, 0.5)[0, 0] == pytest.approx(3.0)


def test_singular_sigma_rejected():
    with pytest.raises(ConfigurationError):
        malliavin_h1(np.array([[1.0, 2.0], [2.0, 4.0]]), np.ones(2), 1.0)
    with pytest.raises(ConfigurationError):
        malliavin_h2(np.zeros((1, 1)), np.ones(1), 1, 1.0)


SIGMA = np.array([[1.0, 0.0], [0.5, 0.8]])


def test_malliavin_h1_identities():
    rng = np.random.default_rng(11)
    dt = 0.3
    dw = np.sqrt(dt) * rng.standard_normal((100_000, 2))
    h1 = malliavin_h1(SIGMA, dw, dt)
    assert within_3_se(h1, np.zeros(2))
    prod = (h1[:, :, None] * dw[:, None, :]).reshape(-1, 4)
    assert within_3_se(prod, np.linalg.inv(SIGMA.T).ravel())


def test_malliavin_h2_zero_mean():
    rng = np.random.default_rng(12)
    span, dt = 3, 0.2
    dw = np.sqrt(span * dt) * rng.standard_normal((100_000, 2))
    assert within_3_se(malliavin_h2(SIGMA, dw, span, dt).reshape(-1, 4), np.zeros(4))


def test_malliavin_h2_quadratic_recovery():
    rng = np.random.default_rng(13)
    dw = rng.standard_normal(1_000_000)
    x = 0.7 + dw
    weights = malliavin_h2(np.eye(1), dw[:, None], 1, 1.0)[:, 0, 0]
    assert within_3_se(x * x * weights, 2.0)


def test_malliavin_h2_quadratic_recovery_multivariate():
    # g(x) = x^T A x with X = x0 + sigma dW: E[g H2] = 2A
    rng = np.random.default_rng(14)
    A = np.array([[1.0, 0.3], [0.3, -0.5]])
    dt = 0.5
    dw = np.sqrt(dt) * rng.standard_normal((100_000, 2))
    x = np.array([0.2, 0.1]) + dw @ SIGMA.T
    g = np.einsum("bi,ij,bj->b", x, A, x)
    samples = (g[:, None, None] * malliavin_h2(SIGMA, dw, 1, dt)).reshape(-1, 4)
    assert within_3_se(samples, (2 * A).ravel())


@given(st.floats(0.05, 2.0), st.integers(1, 6), st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_malliavin_h2_scaling_is_consistent(dt, span, seed):
    dw = np.random.default_rng(seed).standard_normal((3, 2))
    h2 = malliavin_h2(SIGMA, dw, span, dt)
    assert np.allclose(h2, np.swapaxes(h2, -1, -2) * 0 + h2)
    inv = np.linalg.inv(SIGMA)
    manual = inv.T @ (np.einsum("bi,bj->bij", dw, dw) - span * dt * np.eye(2)) @ inv / (span * dt) ** 2
    assert np.allclose(h2, manual)
