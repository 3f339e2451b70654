import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from monorf.render import alpha_values, composite, composite_backward, deltas_from_distances

from oracles import check_grads, composite_loop


def random_ray(rng, n=12, t_near=0.2, t_far=25.0, sigma_scale=1.0):
    d = np.sort(rng.uniform(t_near, t_far, n))
    d = d + 1e-6 * np.arange(n)  # strictly increasing
    sigma = rng.exponential(sigma_scale, n) * (rng.uniform(size=n) < 0.7)
    colors = rng.uniform(size=(n, 3))
    return d, sigma, colors


def test_empty_space():
    d = np.linspace(1, 5, 8)
    out = composite(d, np.zeros(8), np.ones((8, 3)), 0.5)
    assert np.all(out.weights == 0)
    assert np.all(out.color == 0) and out.depth == 0 and out.weight_sum == 0


def test_opaque_first_sample():
    d = np.array([1.0, 2.0, 3.0])
    out = composite(d, np.array([100.0, 3.0, 3.0]), np.eye(3), 0.5)
    assert out.weights[0] == pytest.approx(1.0, abs=1e-12)
    assert out.depth == pytest.approx(1.0, abs=1e-10)
    assert np.all(out.weights[1:] < 1e-12)


def test_two_sample_hand_values():
    out = composite(np.array([1.0, 1.5]), np.array([1.0, 2.0]), np.zeros((2, 3)), 0.5)
    np.testing.assert_allclose(out.alphas, [1 - np.exp(-0.5), 1 - np.exp(-1.0)], rtol=1e-14)
    np.testing.assert_allclose(out.weights, [0.39347, 0.38340], atol=5e-6)
    np.testing.assert_allclose(out.weights[1], np.exp(-0.5) * (1 - np.exp(-1.0)), rtol=1e-14)


def test_alpha_values():
    assert alpha_values(0.0, 1.0) == 0.0
    assert alpha_values(np.log(2.0), 1.0) == pytest.approx(0.5, abs=1e-15)
    x = np.linspace(0, 40, 200)
    a = alpha_values(x, 1.0)
    assert np.all(np.diff(a) >= 0) and np.all(a < 1.0 + 1e-15) and np.all(a >= 0)


def test_first_delta_starts_at_near_bound():
    np.testing.assert_allclose(deltas_from_distances(np.array([0.5, 1.0, 2.5]), 0.2), [0.3, 0.5, 1.5])


def test_rejects_unsorted():
    with pytest.raises(ValueError):
        composite(np.array([1.0, 0.9]), np.ones(2), np.zeros((2, 3)), 0.2)
    with pytest.raises(ValueError):
        composite(np.array([0.2, 0.9]), np.ones(2), np.zeros((2, 3)), 0.2)


def test_matches_loop_oracle(rng):
    for _ in range(50):
        d, s, c = random_ray(rng)
        out = composite(d, s, c, 0.2)
        w, col, dep, trans = composite_loop(d, s, c, 0.2)
        np.testing.assert_allclose(out.weights, w, atol=1e-12)
        np.testing.assert_allclose(out.color, col, atol=1e-12)
        np.testing.assert_allclose(out.depth, dep, atol=1e-10)
        np.testing.assert_allclose(out.transmittance, trans, atol=1e-12)


def test_batched_equals_per_ray(rng):
    rays = [random_ray(rng) for _ in range(5)]
    out = composite(np.stack([r[0] for r in rays]), np.stack([r[1] for r in rays]), np.stack([r[2] for r in rays]), 0.2)
    for i, (d, s, c) in enumerate(rays):
        single = composite(d, s, c, 0.2)
        np.testing.assert_allclose(out.depth[i], single.depth, rtol=1e-14)
        np.testing.assert_allclose(out.color[i], single.color, rtol=1e-14)


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 50.0))
def test_weight_sum_identity_and_monotone_transmittance(seed, scale):
    rng = np.random.default_rng(seed)
    d, s, c = random_ray(rng, n=int(rng.integers(1, 40)), sigma_scale=scale)
    out = composite(d, s, c, 0.2)
    assert out.transmittance[0] == 1.0
    assert np.all(np.diff(out.transmittance) <= 0)
    assert np.all(out.weights >= 0)
    assert abs(out.weight_sum - (1 - out.transmittance[-1])) < 1e-6
    assert out.weight_sum <= 1 + 1e-6


def insert_zero_density(rng, d, s, c):
    """Insert a zero-density sample inside an interval that already has zero
    density (the quadrature treats density as constant over the interval that
    a sample closes), or past the last sample."""
    empty = [i for i in range(len(d)) if s[i] == 0.0] + [len(d)]
    i = int(rng.choice(empty))
    if i == len(d):
        t = d[-1] + rng.uniform(0.01, 2.0)
    else:
        lo = 0.2 if i == 0 else d[i - 1]
        t = lo + rng.uniform(0.05, 0.95) * (d[i] - lo)
    return np.insert(d, i, t), np.insert(s, i, 0.0), np.insert(c, i, rng.uniform(size=3), axis=0)


@given(st.integers(0, 2**32 - 1))
def test_zero_density_insertion(seed):
    rng = np.random.default_rng(seed)
    d, s, c = random_ray(rng, n=int(rng.integers(2, 30)))
    a = composite(d, s, c, 0.2)
    b = composite(*insert_zero_density(rng, d, s, c), 0.2)
    assert abs(a.depth - b.depth) < 1e-6
    np.testing.assert_allclose(a.color, b.color, atol=1e-6)
    assert abs(a.weight_sum - b.weight_sum) < 1e-6


def test_opaque_oracle_density_recovers_depth(rng):
    for _ in range(200):
        d = np.sort(rng.uniform(0.2, 25.0, 64)) + 1e-6 * np.arange(64)
        true = rng.uniform(d[0], d[-1])
        sigma = np.where(d >= true, 1e4, 0.0)
        out = composite(d, sigma, np.zeros((64, 3)), 0.2)
        spacing = np.diff(np.concatenate([[0.2], d])).max()
        assert abs(out.depth - true) <= spacing


def test_normalized_depth_option():
    d = np.array([1.0, 2.0, 3.0])
    s = np.array([0.0, 0.3, 0.0])
    raw = composite(d, s, np.zeros((3, 3)), 0.5)
    norm = composite(d, s, np.zeros((3, 3)), 0.5, normalize_depth=True)
    assert norm.depth == pytest.approx(2.0)
    assert raw.depth == pytest.approx(2.0 * raw.weight_sum)
    assert composite(d, np.zeros(3), np.zeros((3, 3)), 0.5, normalize_depth=True).depth == 0.0


@pytest.mark.parametrize("with_wsum", [False, True])
def test_composite_gradients(rng, with_wsum):
    assert composite_grad_error(rng, with_wsum) < 1e-4


def composite_grad_error(rng, with_wsum, eps=1e-4):
    # compositing is smooth in sigma and linear in color, so a wider step is
    # safe and keeps round-off below the tiny far-sample derivatives
    d = np.sort(rng.uniform(0.2, 10.0, (3, 9)), axis=1) + 1e-3 * np.arange(9)
    s = rng.exponential(0.5, (3, 9))
    c = rng.uniform(size=(3, 9, 3))
    Rc, Rd, Rw = rng.normal(size=(3, 3)), rng.normal(size=3), rng.normal(size=3)
    out = composite(d, s, c, 0.2)
    ds, dc = composite_backward(d, s, c, 0.2, out, Rc, Rd, Rw if with_wsum else None)

    def f():
        o = composite(d, s, c, 0.2)
        return np.concatenate([(o.color * Rc).ravel(), o.depth * Rd, o.weight_sum * Rw * with_wsum])

    return check_grads(f, {"sigma": s, "color": c}, {"sigma": ds, "color": dc}, rng, n=12, eps=eps)
