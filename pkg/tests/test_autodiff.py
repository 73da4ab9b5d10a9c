"""Tensor op and tape tests, each checked against an independent oracle."""

import math

import numpy as np
import pytest

from capstext import autodiff as ad


def conv1d_loops(x, kernel, bias):
    """Brute-force triple-loop convolution oracle."""
    l, e = x.shape
    f, ke, n = kernel.shape
    assert ke == e
    steps = l - f + 1
    out = np.zeros((steps, n), dtype=np.float64)
    for t in range(steps):
        for o in range(n):
            acc = 0.0
            for i in range(f):
                for j in range(e):
                    acc += x[t + i, j] * kernel[i, j, o]
            out[t, o] = acc + bias[o]
    return out


class TestConv1d:
    def test_hand_summed_ramp(self):
        x = np.array([[1.0], [2.0], [3.0], [4.0]])
        k = np.ones((2, 1, 1))
        out = ad.conv1d_valid(x, k, np.zeros(1))
        np.testing.assert_allclose(out, [[3.0], [5.0], [7.0]])

    def test_zero_kernel_gives_zero_output(self):
        x = np.arange(12.0).reshape(6, 2)
        out = ad.conv1d_valid(x, np.zeros((3, 2, 4)), np.zeros(4))
        assert out.shape == (4, 4)
        assert np.all(out == 0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(7, 5))
        k = rng.normal(size=(3, 5, 2))
        b = rng.normal(size=2)
        np.testing.assert_allclose(ad.conv1d_valid(x, k, b), conv1d_loops(x, k, b), atol=1e-6)

    def test_batched_matches_per_example(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 7, 5))
        k = rng.normal(size=(3, 5, 2))
        b = rng.normal(size=2)
        batched = ad.conv1d_valid(x, k, b)
        for i in range(4):
            np.testing.assert_allclose(batched[i], ad.conv1d_valid(x[i], k, b), atol=1e-12)

    def test_short_input_names_both_lengths(self):
        with pytest.raises(ValueError, match="length 2.*kernel size 3"):
            ad.conv1d_valid(np.zeros((2, 5)), np.zeros((3, 5, 1)), np.zeros(1))

    def test_width_mismatch_rejected(self):
        with pytest.raises(ValueError, match="width"):
            ad.conv1d_valid(np.zeros((5, 4)), np.zeros((3, 5, 1)), np.zeros(1))

    def test_stride_fixed_to_one(self):
        with pytest.raises(ValueError, match="stride"):
            ad.conv1d_valid(np.zeros((5, 4)), np.zeros((3, 4, 1)), None, stride=2)


class TestSoftmaxRows:
    def test_uniform_on_equal_logits(self):
        np.testing.assert_allclose(ad.softmax_rows(np.zeros((1, 3))), np.full((1, 3), 1 / 3))

    def test_analytic_two_way(self):
        out = ad.softmax_rows(np.array([math.log(2.0), 0.0]))
        np.testing.assert_allclose(out, [2 / 3, 1 / 3], atol=1e-12)

    def test_no_overflow_on_large_logits(self):
        out = ad.softmax_rows(np.array([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-12)

    def test_rows_sum_to_one_and_shift_invariant(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(8, 5)) * 10
        out = ad.softmax_rows(x)
        np.testing.assert_allclose(out.sum(axis=-1), np.ones(8), atol=1e-6)
        shifted = ad.softmax_rows(x + rng.normal(size=(8, 1)))
        np.testing.assert_allclose(out, shifted, atol=1e-6)
        assert np.all(out >= 0)


class TestElu:
    @pytest.mark.parametrize("x,expected", [(0.0, 0.0), (1.0, 1.0), (-1.0, math.exp(-1) - 1)])
    def test_values(self, x, expected):
        assert ad.elu(np.array([x]))[0] == pytest.approx(expected, abs=1e-12)

    def test_no_overflow_warning_on_large_inputs(self):
        with np.errstate(over="raise"):
            out = ad.elu(np.array([200.0, -200.0]))
        np.testing.assert_allclose(out, [200.0, -1.0], atol=1e-6)


class TestTapeBackward:
    def test_sum_of_squares_gradient(self):
        tape = ad.Tape()
        p = tape.parameter("p", np.array([1.0, -2.0, 3.0]))
        grads = tape.backward(ad.sum(ad.square(p)))
        np.testing.assert_allclose(grads["p"], [2.0, -4.0, 6.0])

    def test_unused_parameter_gets_zero_gradient(self):
        tape = ad.Tape()
        p = tape.parameter("p", np.ones(3))
        q = tape.parameter("q", np.ones(2))
        grads = tape.backward(ad.sum(ad.square(p)))
        np.testing.assert_allclose(grads["q"], np.zeros(2))

    def test_non_scalar_loss_rejected(self):
        tape = ad.Tape()
        p = tape.parameter("p", np.ones(3))
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(ad.square(p))

    def test_duplicate_parameter_name_rejected(self):
        tape = ad.Tape()
        tape.parameter("p", np.ones(3))
        with pytest.raises(ValueError, match="already registered"):
            tape.parameter("p", np.ones(3))

    def test_mixed_tapes_rejected(self):
        t1, t2 = ad.Tape(), ad.Tape()
        a = t1.parameter("a", np.ones(2))
        b = t2.parameter("b", np.ones(2))
        with pytest.raises(ValueError, match="tapes"):
            ad.add(a, b)

    def test_reused_node_accumulates(self):
        tape = ad.Tape()
        p = tape.parameter("p", np.array([3.0]))
        grads = tape.backward(ad.sum(ad.add(ad.square(p), ad.mul(p, 2.0))))
        np.testing.assert_allclose(grads["p"], [8.0])

    def test_gradient_slot_shapes_match_parameters(self):
        tape = ad.Tape()
        p = tape.parameter("p", np.ones((2, 3)))
        grads = tape.backward(ad.sum(p))
        assert grads["p"].shape == (2, 3)

    def test_broadcast_bias_gradient_sums(self):
        tape = ad.Tape()
        b = tape.parameter("b", np.zeros(3))
        x = np.ones((4, 3))
        grads = tape.backward(ad.sum(ad.add(x, b)))
        np.testing.assert_allclose(grads["b"], [4.0, 4.0, 4.0])


class TestGradCheck:
    def test_quadratic_is_nearly_exact(self):
        err = ad.grad_check(
            lambda p: ad.sum(ad.square(p["x"])), {"x": np.array([1.0, -0.5, 2.0])}
        )
        assert err < 1e-9

    def test_eps_bounds_enforced(self):
        with pytest.raises(ValueError, match="eps"):
            ad.grad_check(lambda p: ad.sum(p["x"]), {"x": np.ones(2)}, eps=1e-2)

    def test_nan_gradient_raises(self):
        def f(p):
            return ad.sum(ad.div(p["x"], 0.0))

        with np.errstate(divide="ignore", invalid="ignore"):
            with pytest.raises(ValueError, match="non-finite"):
                ad.grad_check(f, {"x": np.ones(2)})

    @pytest.mark.parametrize("seed", range(5))
    def test_composite_ops(self, seed):
        rng = np.random.default_rng(seed)
        params = {
            "x": rng.normal(size=(4, 6)),
            "w": rng.normal(size=(6, 3)),
            "b": rng.normal(size=3),
        }

        def f(p):
            y = ad.elu(ad.add(ad.matmul(p["x"], p["w"]), p["b"]))
            z = ad.softmax_rows(y)
            return ad.sum(ad.mul(z, y)) + ad.mean(ad.relu(p["x"]))

        assert ad.grad_check(f, params, eps=1e-5) < 1e-6

    @pytest.mark.parametrize("seed", range(3))
    def test_conv_and_structural_ops(self, seed):
        rng = np.random.default_rng(10 + seed)
        params = {
            "x": rng.normal(size=(8, 3)),
            "k": rng.normal(size=(3, 3, 4)),
            "b": rng.normal(size=4),
        }

        def f(p):
            y = ad.conv1d_valid(p["x"], p["k"], p["b"])
            pooled = ad.maxpool_pairs(y)
            both = ad.concat([ad.crop_rows(y, 3), ad.crop_rows(pooled, 3)], axis=-1)
            return ad.sum(ad.square(both)) + ad.sum(ad.vector_norm(y))

        assert ad.grad_check(f, params, eps=1e-5) < 1e-6

    def test_einsum_contractions(self):
        rng = np.random.default_rng(3)
        params = {
            "h": rng.normal(size=(2, 3, 4)),
            "w": rng.normal(size=(3, 2, 4, 5)),
        }

        def f(p):
            votes = ad.einsum("bam,akmn->bakn", p["h"], p["w"])
            pooled = ad.einsum("bakn,akmn->bam", votes, p["w"])
            return ad.sum(ad.square(votes)) + ad.sum(pooled)

        assert ad.grad_check(f, params, eps=1e-5) < 1e-6

    def test_gather_rows_scatter_and_freeze(self):
        rng = np.random.default_rng(4)
        table = rng.normal(size=(5, 3))
        ids = np.array([[0, 2, 2], [4, 0, 1]])

        def f(p):
            return ad.sum(ad.square(ad.gather_rows(p["t"], ids)))

        assert ad.grad_check(f, {"t": table}, eps=1e-5) < 1e-8

        tape = ad.Tape()
        t = tape.parameter("t", table)
        grads = tape.backward(ad.sum(ad.gather_rows(t, ids, frozen_rows=(0,))))
        assert np.all(grads["t"][0] == 0)
        np.testing.assert_allclose(grads["t"][2], [2.0, 2.0, 2.0])


class TestMaxpoolPairs:
    def test_hand_case(self):
        out = ad.maxpool_pairs(np.array([[1.0], [3.0], [2.0], [0.0]]))
        np.testing.assert_allclose(out, [[3.0], [2.0]])

    def test_odd_row_dropped(self):
        out = ad.maxpool_pairs(np.array([[1.0], [3.0], [9.0]]))
        np.testing.assert_allclose(out, [[3.0]])


class TestPurity:
    def test_inputs_not_mutated(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(6, 4))
        k = rng.normal(size=(2, 4, 3))
        b = rng.normal(size=3)
        snapshots = [x.copy(), k.copy(), b.copy()]
        ad.conv1d_valid(x, k, b)
        ad.softmax_rows(x)
        ad.elu(x)
        ad.maxpool_pairs(x)
        for arr, snap in zip((x, k, b), snapshots):
            assert np.array_equal(arr, snap)

    def test_identical_inputs_identical_outputs(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(6, 4)).astype(np.float32)
        k = rng.normal(size=(2, 4, 3)).astype(np.float32)
        first = ad.conv1d_valid(x, k, None)
        second = ad.conv1d_valid(x.copy(), k.copy(), None)
        assert np.array_equal(first, second)

    def test_float32_preserved_through_ops(self):
        x = np.ones((3, 4), dtype=np.float32)
        out = ad.mul(ad.add(ad.softmax_rows(x), 1.0), 0.5)
        assert out.dtype == np.float32
        assert ad.elu(x).dtype == np.float32
        assert ad.vector_norm(x).dtype == np.float32


class TestFiniteCheck:
    def test_passes_finite(self):
        ad.check_finite(np.ones(3))

    def test_rejects_nan_and_inf(self):
        with pytest.raises(ValueError, match="non-finite"):
            ad.check_finite(np.array([1.0, np.nan]))
        with pytest.raises(ValueError, match="non-finite"):
            ad.check_finite(np.array([np.inf]), name="weights")
