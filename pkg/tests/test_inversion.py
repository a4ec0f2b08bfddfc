import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from oracles import numeric_gradient, rel_error
from ylg.cli import linear_demo_problem, run_linear_demo
from ylg.inversion import (
    DivergenceError,
    EmbeddingFunction,
    InversionConfig,
    SaliencyMap,
    invert,
    lookahead_step,
    multihead_weighted_loss,
    project_saliency,
    saliency_from_map,
    truncated_normal,
    weighted_embedding_loss,
)


def random_stochastic(rng, rows, cols):
    p = rng.random((rows, cols))
    return p / p.sum(axis=1, keepdims=True)


def random_saliency(rng, h, w):
    s = rng.random((h, w))
    return SaliencyMap(s / s.sum())


def test_saliency_uniform_and_one_hot():
    s = saliency_from_map(np.full((6, 4), 0.25), 2, 2)
    assert np.array_equal(s.weights, np.full((2, 2), 0.25))
    one_hot = np.zeros((5, 9))
    one_hot[:, 0] = 1
    s = saliency_from_map(one_hot, 3, 3)
    assert s.weights[0, 0] == 1.0 and s.weights.sum() == 1.0


def test_saliency_column_means():
    rng = np.random.default_rng(0)
    p = random_stochastic(rng, 4, 4)
    expected = [[0.0] * 2 for _ in range(2)]
    for k in range(4):
        total = 0.0
        for q in range(4):
            total += p[q, k]
        expected[k // 2][k % 2] = total / 4
    np.testing.assert_allclose(saliency_from_map(p, 2, 2).weights, expected, rtol=1e-14)


def test_saliency_errors():
    with pytest.raises(ValueError):
        saliency_from_map(np.full((2, 4), 0.25), 3, 3)
    with pytest.raises(ValueError):
        SaliencyMap(np.array([[0.5, 0.6]]))
    with pytest.raises(ValueError):
        SaliencyMap(np.array([[1.5, -0.5]]))


def test_projection():
    rng = np.random.default_rng(1)
    s = random_saliency(rng, 3, 5)
    assert project_saliency(s, 3, 5) is s
    assert project_saliency(s, 1, 1).weights.tolist() == [[1.0]]
    up = project_saliency(SaliencyMap.uniform(2, 2), 4, 4)
    np.testing.assert_allclose(up.weights, np.full((4, 4), 1 / 16), rtol=1e-15)
    with pytest.raises(ValueError):
        project_saliency(s, 0, 3)


def test_projection_nearest_neighbour():
    s = SaliencyMap(np.array([[0.1, 0.2], [0.3, 0.4]]))
    up = project_saliency(s, 4, 4).weights
    # each source cell becomes a 2x2 block, total mass x4 then renormalised
    np.testing.assert_allclose(up[:2, :2], 0.1 / 4)
    np.testing.assert_allclose(up[2:, 2:], 0.4 / 4)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_projection_is_distribution(h, w, th, tw, seed):
    s = random_saliency(np.random.default_rng(seed), h, w)
    p = project_saliency(s, th, tw).weights
    assert p.shape == (th, tw)
    assert abs(p.sum() - 1) <= 1e-6 and (p >= 0).all()


def test_weighted_loss_trivial():
    e = np.ones((2, 2, 3))
    assert weighted_embedding_loss(e, e, SaliencyMap.uniform(2, 2))[0] == 0.0
    loss, grad = weighted_embedding_loss(np.array([[[3.0]]]), np.zeros((1, 1, 1)), SaliencyMap.uniform(1, 1))
    assert loss == 9.0 and grad.tolist() == [[[6.0]]]


def test_weighted_loss_dual_oracle():
    rng = np.random.default_rng(2)
    e_gen, e_real = rng.standard_normal((2, 2, 2)), rng.standard_normal((2, 2, 2))
    s = random_saliency(rng, 2, 2)
    loss, grad = weighted_embedding_loss(e_gen, e_real, s)
    mpmath.mp.dps = 40
    expected = mpmath.mpf(0)
    for i in range(2):
        for j in range(2):
            for c in range(2):
                d = (mpmath.mpf(e_gen[i, j, c]) - mpmath.mpf(e_real[i, j, c])) * mpmath.mpf(s.weights[i, j])
                expected += d * d
    assert loss == pytest.approx(float(expected), rel=1e-14)
    fd = numeric_gradient(lambda e: weighted_embedding_loss(e, e_real, s)[0], e_gen)
    assert rel_error(grad, fd) < 1e-4


def test_weighted_loss_shape_errors():
    with pytest.raises(ValueError):
        weighted_embedding_loss(np.zeros((2, 2)), np.zeros((2, 3)), SaliencyMap.uniform(2, 2))
    with pytest.raises(ValueError):
        weighted_embedding_loss(np.zeros((2, 3, 1)), np.zeros((2, 3, 1)), SaliencyMap.uniform(2, 2))


def test_multihead_loss():
    rng = np.random.default_rng(3)
    e_gen, e_real = rng.standard_normal((4, 4, 2)), rng.standard_normal((4, 4, 2))
    s = random_saliency(rng, 4, 4)
    single = weighted_embedding_loss(e_gen, e_real, s)
    multi = multihead_weighted_loss(e_gen, e_real, [s])
    assert multi[0] == single[0]
    assert multihead_weighted_loss(e_gen, e_real, [s, s])[0] == 2 * single[0]

    heads = [random_saliency(rng, 2, 2) for _ in range(8)]
    total, grad = multihead_weighted_loss(e_gen, e_real, heads)
    per_head = [weighted_embedding_loss(e_gen, e_real, project_saliency(h, 4, 4)) for h in heads]
    assert total == pytest.approx(math.fsum(l for l, _ in per_head), rel=1e-14)
    np.testing.assert_allclose(grad, sum(g for _, g in per_head), rtol=1e-14)

    pruned = multihead_weighted_loss(e_gen, e_real, heads, heads=[1, 6])[0]
    assert pruned == pytest.approx(per_head[1][0] + per_head[6][0], rel=1e-14)
    with pytest.raises(ValueError):
        multihead_weighted_loss(e_gen, e_real, [])


def test_uniform_heads_proportional_to_plain_distance():
    rng = np.random.default_rng(4)
    e_gen, e_real = rng.standard_normal((3, 5, 2)), rng.standard_normal((3, 5, 2))
    heads = 4
    loss, _ = multihead_weighted_loss(e_gen, e_real, [SaliencyMap.uniform(3, 5)] * heads)
    assert loss == pytest.approx(heads / 15**2 * np.sum((e_gen - e_real) ** 2), rel=1e-13)


def test_truncated_normal():
    z = truncated_normal(10_000, 2.0, seed=5)
    assert np.abs(z).max() <= 2.0
    plain = np.random.default_rng(5).standard_normal(100)
    assert np.array_equal(truncated_normal(100, 1e9, seed=5), plain)
    np.testing.assert_array_equal(truncated_normal(50, 2.0, 7), truncated_normal(50, 2.0, 7))
    with pytest.raises(ValueError):
        truncated_normal(3, 0.0)


def test_truncated_normal_acceptance_and_shape():
    draws = truncated_normal(100_000, 1e9, seed=6)
    expected = stats.norm.cdf(2) - stats.norm.cdf(-2)
    assert abs(np.mean(np.abs(draws) <= 2) - expected) < 0.01
    z = truncated_normal(20_000, 2.0, seed=7)
    ks = stats.kstest(z, stats.truncnorm(-2, 2).cdf)
    assert ks.pvalue > 1e-3


def test_lookahead_hand_trace():
    cfg = InversionConfig(learning_rate=0.1, lookahead_k=1, lookahead_alpha=0.5)
    slow = fast = np.array([1.0])
    trace = []
    for step in range(1, 4):
        slow, fast = lookahead_step(slow, fast, step, 2 * fast, cfg)
        trace.append(float(slow[0]))
        assert np.array_equal(slow, fast)
    # fast = z - 0.2 z = 0.8 z, slow = z + 0.5 (0.8 z - z) = 0.9 z
    np.testing.assert_allclose(trace, [0.9, 0.81, 0.729], rtol=1e-15)


def test_lookahead_alpha_one_and_zero_gradient():
    cfg = InversionConfig(learning_rate=0.1, lookahead_k=3, lookahead_alpha=1.0)
    slow, fast = np.array([1.0, -2.0]), np.array([1.0, -2.0])
    for step in range(1, 7):
        slow, fast = lookahead_step(slow, fast, step, np.array([1.0, 1.0]), cfg)
        if step % 3 == 0:
            assert np.array_equal(slow, fast)
    np.testing.assert_allclose(slow, [1.0 - 0.6, -2.0 - 0.6])

    cfg = InversionConfig()
    z = np.array([0.3, 0.4])
    slow, fast = z, z
    for step in range(1, 20):
        slow, fast = lookahead_step(slow, fast, step, np.zeros(2), cfg)
    assert np.array_equal(slow, z) and np.array_equal(fast, z)
    with pytest.raises(ValueError):
        lookahead_step(z, z, 1, np.zeros(3), cfg)


def test_config_validation():
    for bad in ({"learning_rate": 0}, {"lookahead_alpha": 0}, {"lookahead_alpha": 1.5}, {"lookahead_k": 0}, {"max_steps": -1}):
        with pytest.raises(ValueError):
            InversionConfig(**bad)


def test_invert_identity_recovers_target():
    dim = 16
    target = truncated_normal(dim, 2.0, seed=100)
    ident = EmbeddingFunction.identity((1, 1, dim))
    result = invert(ident, EmbeddingFunction.identity(), target.reshape(1, 1, dim), [SaliencyMap.uniform(1, 1)], dim=dim)
    assert result.steps_run <= 1500
    assert np.abs(result.z - target).max() < 1e-3
    assert all(a >= b for a, b in zip(result.trace, result.trace[1:]))


def test_invert_linear_matches_solve():
    result, z_star, z_true = run_linear_demo(8, 3, InversionConfig(seed=3))
    np.testing.assert_allclose(z_star, z_true, atol=1e-12)
    assert np.abs(result.z - z_star).max() < 1e-3


def test_invert_infinite_tolerance_stops_immediately():
    cfg = InversionConfig(tolerance=math.inf, seed=9)
    a, _, x = linear_demo_problem(4, 0)
    result = invert(EmbeddingFunction.linear(a, (1, 1, 4)), EmbeddingFunction.identity(), x.reshape(1, 1, 4), [SaliencyMap.uniform(1, 1)], cfg, dim=4)
    assert result.steps_run == 0
    assert np.array_equal(result.z, truncated_normal(4, 2.0, 9))
    assert len(result.trace) == 1


def test_invert_reproducible():
    r1, _, _ = run_linear_demo(8, 4, InversionConfig(seed=4, max_steps=200))
    r2, _, _ = run_linear_demo(8, 4, InversionConfig(seed=4, max_steps=200))
    assert np.array_equal(r1.z, r2.z) and r1.trace == r2.trace


def test_invert_divergence():
    a, _, x = linear_demo_problem(4, 0)
    cfg = InversionConfig(learning_rate=50.0, max_steps=500, seed=1)
    with pytest.raises(DivergenceError) as info:
        invert(EmbeddingFunction.linear(a, (1, 1, 4)), EmbeddingFunction.identity(), x.reshape(1, 1, 4), [SaliencyMap.uniform(1, 1)], cfg, dim=4)
    assert info.value.step > 0


def test_finite_difference_pullback():
    rng = np.random.default_rng(10)
    a = rng.standard_normal((6, 3))
    exact = EmbeddingFunction.linear(a, (2, 3))
    approx = EmbeddingFunction(exact.forward)
    z, g = rng.standard_normal(3), rng.standard_normal((2, 3))
    np.testing.assert_allclose(approx.pullback(z, g), exact.pullback(z, g), rtol=1e-7)


def test_discriminator_embedding_with_saliency_heads():
    # nonlinear embedding, 2x2 grid, 3 channels; gradient through the pipeline vs finite differences
    rng = np.random.default_rng(11)
    dim = 6
    a = rng.standard_normal((12, dim)) / np.sqrt(dim)
    generator = EmbeddingFunction.linear(a, (2, 2, 3))
    embed = EmbeddingFunction(np.tanh, lambda e, g: g * (1 - np.tanh(e) ** 2))
    heads = [random_saliency(rng, 4, 4) for _ in range(3)]
    z_true = truncated_normal(dim, 2.0, 12)
    target = generator(z_true)
    cfg = InversionConfig(learning_rate=2.0, max_steps=1500, seed=13)
    result = invert(generator, embed, target, heads, cfg, dim=dim)
    assert result.trace[-1] < result.trace[0] * 1e-3
    cfg = InversionConfig(learning_rate=0.5, max_steps=300, seed=13)
    generator_space = invert(generator, embed, target, heads, cfg, dim=dim, space="generator")
    assert all(x >= y for x, y in zip(generator_space.trace, generator_space.trace[1:]))
