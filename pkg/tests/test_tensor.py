import math

import numpy as np
import pytest

from jigsaw.tensor import (
    MatmulMode,
    ShapeError,
    dropout_mask,
    gelu,
    gelu_backward,
    layer_norm,
    layer_norm_backward,
    matmul,
    patchify,
    unpatchify,
)

from conftest import naive_matmul, rel_err


class TestMatmul:
    def test_nt_fixed_example(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        expected = np.array([[17.0, 23.0], [39.0, 53.0]])  # frozen from the triple-loop oracle
        assert np.array_equal(matmul(a, b, MatmulMode.NT), expected)
        assert np.array_equal(naive_matmul(a, b, MatmulMode.NT), expected)

    def test_nt_identity(self, rng):
        x = rng.normal(size=(5, 4))
        assert np.allclose(matmul(x, np.eye(4), MatmulMode.NT), x)

    def test_nn_annihilator(self, rng):
        x = rng.normal(size=(3, 4))
        assert np.array_equal(matmul(x, np.zeros((4, 2)), MatmulMode.NN), np.zeros((3, 2)))

    def test_tn_shape(self, rng):
        a = rng.normal(size=(5, 3))
        b = rng.normal(size=(5, 2))
        out = matmul(a, b, MatmulMode.TN)
        assert out.shape == (3, 2)
        assert rel_err(out, naive_matmul(a, b, MatmulMode.TN)) < 1e-14

    @pytest.mark.parametrize("mode", list(MatmulMode))
    def test_agrees_with_triple_loop(self, mode, rng):
        for _ in range(5):
            m, k, n = rng.integers(1, 9, size=3)
            if mode == MatmulMode.NN:
                a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
            elif mode == MatmulMode.NT:
                a, b = rng.normal(size=(m, k)), rng.normal(size=(n, k))
            else:
                a, b = rng.normal(size=(m, k)), rng.normal(size=(m, n))
            assert rel_err(matmul(a, b, mode), naive_matmul(a, b, mode)) < 1e-12

    def test_large_well_conditioned(self, rng):
        a = rng.normal(size=(256, 256))
        b = rng.normal(size=(256, 256))
        assert rel_err(matmul(a, b, MatmulMode.NN), naive_matmul(a, b)) < 1e-12

    def test_shape_mismatch_names_both(self):
        a, b = np.zeros((2, 3)), np.zeros((2, 4))
        with pytest.raises(ShapeError, match=r"NT.*\(2, 3\).*\(2, 4\)"):
            matmul(a, b, MatmulMode.NT)

    def test_dtype_mismatch(self):
        with pytest.raises(ShapeError, match="dtype"):
            matmul(np.zeros((2, 2), np.float32), np.zeros((2, 2)), MatmulMode.NN)


class TestGelu:
    def test_zero(self):
        assert gelu(np.array([0.0]))[0] == 0.0

    def test_reference_point(self):
        # 1 * Phi(1) evaluated with the exact Gaussian CDF
        assert abs(gelu(np.array([1.0]))[0] - 0.841345) < 1e-6

    def test_asymptote(self):
        assert abs(gelu(np.array([10.0]))[0] - 10.0) < 1e-6

    def test_backward_matches_finite_differences(self, rng):
        x = rng.normal(size=64)
        step = 1e-5
        fd = (gelu(x + step) - gelu(x - step)) / (2 * step)
        analytic = gelu_backward(x, np.ones_like(x))
        assert rel_err(analytic, fd) < 1e-6

    def test_preserves_dtype(self):
        assert gelu(np.ones(3, np.float32)).dtype == np.float32


class TestLayerNorm:
    def test_constant_row_collapses(self):
        x = np.array([[5.0, 5.0, 5.0]])
        y = layer_norm(x, np.ones(3), np.zeros(3), eps=1e-5)
        assert np.max(np.abs(y)) < 1e-2

    def test_two_point_row(self):
        y = layer_norm(np.array([[1.0, 3.0]]), np.ones(2), np.zeros(2), eps=1e-12)
        assert np.allclose(y, [[-1.0, 1.0]], atol=1e-9)

    def test_affine_collapse(self, rng):
        x = rng.normal(size=(4, 6))
        y = layer_norm(x, np.zeros(6), np.full(6, 2.5))
        assert np.allclose(y, 2.5)

    def test_moments(self, rng):
        x = rng.normal(size=(16, 32)) * 3 + 1
        y = layer_norm(x, np.ones(32), np.zeros(32), eps=1e-5)
        assert np.max(np.abs(y.mean(axis=-1))) < 1e-10
        assert np.max(np.abs(y.var(axis=-1) - 1.0)) < 1e-4

    def test_eps_rejected(self):
        with pytest.raises(ValueError):
            layer_norm(np.ones((1, 2)), np.ones(2), np.zeros(2), eps=0.0)

    def test_backward_matches_finite_differences(self, rng):
        x = rng.normal(size=(3, 5))
        gamma = rng.normal(size=5)
        beta = rng.normal(size=5)
        g = rng.normal(size=(3, 5))
        eps, step = 1e-5, 1e-6

        def loss(xv, gv, bv):
            return np.sum(layer_norm(xv, gv, bv, eps) * g)

        dx, dgamma, dbeta = layer_norm_backward(x, gamma, eps, g)
        for arr, grad, name in ((x, dx, "x"), (gamma, dgamma, "gamma"), (beta, dbeta, "beta")):
            fd = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                ix = it.multi_index
                orig = arr[ix]
                arr[ix] = orig + step
                up = loss(x, gamma, beta)
                arr[ix] = orig - step
                down = loss(x, gamma, beta)
                arr[ix] = orig
                fd[ix] = (up - down) / (2 * step)
                it.iternext()
            assert rel_err(grad, fd) < 1e-5, name


class TestPatchify:
    def test_token_count(self):
        x = np.arange(16.0).reshape(1, 4, 4, 1)
        t = patchify(x, 2, 2)
        assert t.shape == (1, 4, 4)

    def test_round_trip(self, rng):
        x = rng.normal(size=(2, 8, 12, 5))
        t = patchify(x, 4, 3)
        assert t.shape == (2, 2 * 4, 3 * 4 * 5)
        assert np.array_equal(unpatchify(t, 8, 12, 4, 3), x)

    def test_unit_patches_row_major(self):
        x = np.arange(12.0).reshape(1, 3, 4, 1)
        t = patchify(x, 1, 1)
        assert np.array_equal(t[0, :, 0], np.arange(12.0))

    def test_non_divisible_rejected(self):
        with pytest.raises(ShapeError):
            patchify(np.zeros((1, 5, 4, 1)), 2, 2)


class TestDropout:
    def test_rate_zero_is_identity(self, rng):
        assert dropout_mask((4, 4), 0.0, rng) is None

    def test_inverted_scaling(self, rng):
        mask = dropout_mask((2000,), 0.25, rng)
        kept = mask[mask > 0]
        assert np.allclose(kept, 1.0 / 0.75)
        assert abs(mask.mean() - 1.0) < 0.05

    def test_bad_rate(self, rng):
        with pytest.raises(ValueError):
            dropout_mask((2,), 1.0, rng)
