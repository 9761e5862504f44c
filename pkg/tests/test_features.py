import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from racl.audio import AudioClip
from racl.errors import ConfigError
from racl.features import (
    FeatureStack,
    adaptive_kernel_size,
    aggregate,
    aggregate_backward,
    build_extractor,
    extract,
    gap,
    init_kernel,
)
from racl.gradcheck import check_stack_gradient, numeric_grad, relative_error


def _rand_stack(rng, L=5, T=4, D=3):
    return rng.normal(size=(L, T, D))


class TestExtract:
    def test_shape_with_defaults(self):
        clip = AudioClip(np.random.default_rng(0).uniform(-0.5, 0.5, 64600), 16000)
        stack = extract(clip, 1234, 12, 64)
        assert stack.shape == (12, (64600 - 1024) // 256 + 1, 64) == (12, 249, 64)
        assert np.all(np.isfinite(stack.layers))

    def test_deterministic(self):
        clip = AudioClip(np.random.default_rng(1).uniform(-0.5, 0.5, 8000), 16000)
        a = extract(clip, 7, 3, 8).layers
        build_extractor.cache_clear()
        b = extract(clip, 7, 3, 8).layers
        np.testing.assert_array_equal(a, b)

    def test_seed_changes_weights(self):
        clip = AudioClip(np.random.default_rng(2).uniform(-0.5, 0.5, 8000), 16000)
        assert not np.array_equal(extract(clip, 1, 3, 8).layers, extract(clip, 2, 3, 8).layers)

    def test_zero_clip_frames_identical_over_time(self):
        ex = build_extractor(3, 4, 8)
        clip = AudioClip(np.zeros(6000), 16000)
        layers = ex(clip).layers
        logmel = ex.log_mel(clip.samples)
        np.testing.assert_array_equal(logmel, np.full_like(logmel, (np.log(1e-5) + 4) / 4))
        np.testing.assert_array_equal(layers, np.broadcast_to(layers[:, :1], layers.shape))
        # direct forward pass on a single frame
        h = logmel[0] @ ex.projection
        for i in range(4):
            h = np.tanh(h @ ex.weights[i] + ex.biases[i])
            np.testing.assert_allclose(layers[i, 0], h, atol=1e-12)

    def test_weights_are_frozen(self):
        ex = build_extractor(4, 2, 4)
        with pytest.raises(ValueError):
            ex.weights[0][0, 0] = 1.0

    def test_stack_must_be_three_dimensional(self):
        with pytest.raises(ValueError):
            FeatureStack(np.zeros((2, 3)))


class TestGap:
    def test_values(self):
        layers = np.stack([np.ones((2, 2)), np.array([[1.0, 3.0], [5.0, 7.0]]), np.zeros((2, 2))])
        np.testing.assert_array_equal(gap(FeatureStack(layers)), [1.0, 4.0, 0.0])

    def test_linear(self):
        rng = np.random.default_rng(5)
        f, g = _rand_stack(rng), _rand_stack(rng)
        np.testing.assert_allclose(gap(2.5 * f - 0.5 * g), 2.5 * gap(f) - 0.5 * gap(g), atol=1e-14)


class TestKernelSize:
    @pytest.mark.parametrize("L,k", [(24, 3), (1, 1), (256, 5), (2, 1), (12, 3), (3, 3), (4, 3)])
    def test_values(self, L, k):
        assert adaptive_kernel_size(L) == k

    @given(st.integers(1, 10_000))
    def test_odd_and_bounded(self, L):
        k = adaptive_kernel_size(L)
        assert k % 2 == 1 and 1 <= k <= L

    def test_init_range(self):
        k = init_kernel(5, np.random.default_rng(0))
        assert k.shape == (5,) and np.all(np.abs(k) <= 1 / np.sqrt(5))


class TestAggregate:
    def test_zero_kernel_gives_half(self):
        stack = _rand_stack(np.random.default_rng(6))
        agg, omega, _ = aggregate(stack, np.zeros(3))
        np.testing.assert_array_equal(omega, np.full(5, 0.5))
        np.testing.assert_allclose(agg, 0.5 * stack.sum(axis=0), rtol=1e-14)

    def test_single_layer(self):
        f = np.array([[[1.0, -1.0], [2.0, -2.0]]])  # z = 0
        agg, omega, _ = aggregate(f, np.array([3.7]))
        np.testing.assert_array_equal(omega, [0.5])
        np.testing.assert_array_equal(agg, 0.5 * f[0])

    def test_matches_explicit_convolution(self):
        rng = np.random.default_rng(7)
        stack, kernel = _rand_stack(rng, L=6), rng.normal(size=3)
        z = stack.mean(axis=(1, 2))
        zp = np.concatenate([[0.0], z, [0.0]])
        s = np.array([sum(kernel[j] * zp[l + j] for j in range(3)) for l in range(6)])
        omega = 1 / (1 + np.exp(-s))
        agg, got, state = aggregate(stack, kernel)
        np.testing.assert_allclose(got, omega, rtol=1e-14)
        np.testing.assert_allclose(agg, sum(omega[l] * stack[l] for l in range(6)), rtol=1e-13)
        np.testing.assert_array_equal(state.descriptors, gap(stack))

    def test_batch_equals_per_sample(self):
        rng = np.random.default_rng(8)
        batch, kernel = rng.normal(size=(4, 5, 3, 2)), rng.normal(size=3)
        agg, omega, _ = aggregate(batch, kernel)
        for b in range(4):
            a1, o1, _ = aggregate(batch[b], kernel)
            np.testing.assert_allclose(agg[b], a1, rtol=1e-14)
            np.testing.assert_allclose(omega[b], o1, rtol=1e-14)

    def test_symmetric_kernel_reversed_layers(self):
        rng = np.random.default_rng(9)
        stack, kernel = _rand_stack(rng, L=7), np.array([0.3, -1.2, 0.3])
        a, o, _ = aggregate(stack, kernel)
        b, ob, _ = aggregate(stack[::-1], kernel)
        np.testing.assert_allclose(a, b, rtol=1e-13)
        np.testing.assert_allclose(o, ob[::-1], rtol=1e-14)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_weights_strictly_inside_unit_interval(self, seed):
        rng = np.random.default_rng(seed)
        _, omega, _ = aggregate(_rand_stack(rng, L=5), rng.normal(0, 3, 3))
        assert np.all((omega > 0) & (omega < 1))

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            aggregate(_rand_stack(np.random.default_rng(0)), np.zeros(2))

    def test_kernel_longer_than_layers_rejected(self):
        with pytest.raises(ConfigError):
            aggregate(_rand_stack(np.random.default_rng(0), L=2), np.zeros(3))


class TestAggregateBackward:
    def test_kernel_gradient(self):
        rng = np.random.default_rng(10)
        stack = rng.normal(size=(3, 6, 4, 2))
        probe = rng.normal(size=(3, 4, 2))
        params = {"k": rng.normal(size=3)}

        def f(p):
            agg, _, _ = aggregate(stack, p["k"])
            return float(np.sum(agg * probe))

        _, _, state = aggregate(stack, params["k"])
        analytic, _ = aggregate_backward(stack, state, probe)
        numeric = numeric_grad(f, params)["k"]
        assert relative_error(analytic, numeric) < 1e-4

    def test_stack_gradient(self):
        assert check_stack_gradient(np.random.default_rng(11)) < 1e-4

    def test_zero_upstream_gradient(self):
        rng = np.random.default_rng(12)
        stack = _rand_stack(rng)
        _, _, state = aggregate(stack, rng.normal(size=3))
        gk, gs = aggregate_backward(stack, state, np.zeros((4, 3)), need_stack_grad=True)
        assert not gk.any() and not gs.any()
