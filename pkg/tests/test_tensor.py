"""Tensor engine: operator semantics, tape behavior, gradient oracles."""

import numpy as np
import pytest

from stochpool.errors import ConfigError, ShapeError, UsageError
from stochpool.gradcheck import check_gradients
from stochpool.stochastic import Rng
from stochpool.tensor import (
    Tape,
    Tensor,
    add,
    backward,
    concat,
    conv1d,
    count_macs,
    gelu,
    layer_norm,
    matmul,
    mean_all,
    mul,
    relu,
    reshape,
    scale,
    slice_cols,
    slice_rows,
    softmax_rows,
    sub,
    sum_all,
    transpose,
)


def rand(seed, *shape):
    return Rng(seed).fork("test").normal(int(np.prod(shape))).reshape(shape)


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(eye, x).data, x.data)

    def test_selector_row(self):
        got = matmul(Tensor([[1.0, 0.0]]), Tensor([[2.0], [5.0]]))
        assert np.array_equal(got.data, [[2.0]])

    def test_against_scalar_triple_loop(self):
        a, b = rand(1, 3, 4), rand(2, 4, 2)
        want = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    want[i, j] += a[i, k] * b[k, j]
        assert np.abs(matmul(Tensor(a), Tensor(b)).data - want).max() < 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_associativity(self):
        a, b, c = rand(3, 4, 3), rand(4, 3, 5), rand(5, 5, 2)
        left = matmul(matmul(Tensor(a), Tensor(b)), Tensor(c)).data
        right = matmul(Tensor(a), matmul(Tensor(b), Tensor(c))).data
        assert np.abs(left - right).max() < 1e-10


class TestSoftmax:
    def test_symmetric_row(self):
        got = softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data
        assert np.abs(got - 1.0 / 3.0).max() < 1e-15

    def test_no_overflow_at_large_logits(self):
        got = softmax_rows(Tensor([[1000.0, 1000.0]])).data
        assert np.allclose(got, [0.5, 0.5])

    def test_analytic_case(self):
        got = softmax_rows(Tensor([[0.0, np.log(3.0)]])).data
        assert np.abs(got - [0.25, 0.75]).max() < 1e-15

    def test_rows_sum_to_one(self):
        x = rand(7, 6, 9) * 5
        y = softmax_rows(Tensor(x)).data
        assert np.abs(y.sum(axis=1) - 1.0).max() < 1e-12
        assert y.min() >= 0.0 and y.max() <= 1.0


class TestLayerNorm:
    def test_constant_row_zeroed_by_eps(self):
        y = layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert np.abs(y.data).max() < 1e-6

    def test_already_normalized(self):
        y = layer_norm(Tensor([[-1.0, 1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        assert np.abs(y.data - [[-1.0, 1.0]]).max() < 1e-4  # eps correction only

    def test_against_direct_formula(self):
        x = rand(11, 1, 8)
        y = layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        mu, var = x.mean(), ((x - x.mean()) ** 2).mean()
        want = (x - mu) / np.sqrt(var + 1e-5)
        assert np.abs(y - want).max() < 1e-12

    def test_affine_shape_check(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(3)))


class TestElementwiseSuite:
    def test_conv1d_counting_example(self):
        x = Tensor(np.ones((10, 1)))
        w = Tensor(np.ones((1, 1, 2)))
        out = conv1d(x, w, stride=2)
        assert out.shape == (5, 1)
        assert np.array_equal(out.data, np.full((5, 1), 2.0))

    def test_conv1d_bad_stride_and_kernel(self):
        x, w = Tensor(np.ones((8, 2))), Tensor(np.ones((2, 2, 3)))
        with pytest.raises(ConfigError):
            conv1d(x, w, stride=0)
        with pytest.raises(ConfigError):
            conv1d(x, Tensor(np.ones((2, 2, 0))))

    def test_conv1d_group_validation(self):
        x = Tensor(np.ones((8, 4)))
        with pytest.raises(ConfigError):
            conv1d(x, Tensor(np.ones((3, 2, 2))), groups=2)  # c_out not divisible
        with pytest.raises(ShapeError):
            conv1d(x, Tensor(np.ones((4, 4, 2))), groups=2)  # wrong c_in per group

    def test_gelu_zero(self):
        assert gelu(Tensor([[0.0]])).data[0, 0] == 0.0

    def test_relu(self):
        got = relu(Tensor([[-2.0, 3.0]])).data
        assert np.array_equal(got, [[0.0, 3.0]])

    def test_reshape_round_trip_preserves_order(self):
        x = rand(13, 3, 4)
        back = reshape(reshape(Tensor(x), (2, 6)), (3, 4)).data
        assert np.array_equal(back, x)

    def test_reshape_size_mismatch(self):
        with pytest.raises(ShapeError):
            reshape(Tensor(np.zeros((2, 3))), (4, 2))

    def test_concat_and_slice(self):
        a, b = rand(17, 2, 3), rand(18, 4, 3)
        joined = concat([Tensor(a), Tensor(b)], axis=0)
        assert np.array_equal(slice_rows(joined, 2, 6).data, b)
        wide = concat([Tensor(a), Tensor(a)], axis=1)
        assert np.array_equal(slice_cols(wide, 3, 6).data, a)

    def test_no_general_broadcasting(self):
        with pytest.raises(ShapeError):
            add(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 1))))
        with pytest.raises(ShapeError):
            mul(Tensor(np.zeros((3, 4))), Tensor(np.zeros(4)))

    def test_bias_add_over_rows(self):
        x, b = rand(20, 4, 3), rand(21, 3)
        assert np.array_equal(add(Tensor(x), Tensor(b)).data, x + b)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(rand(30, 3, 4))
        with Tape():
            loss = sum_all(x)
        assert np.array_equal(backward(loss)[x], np.ones((3, 4)))

    def test_sum_of_squares_gradient(self):
        data = rand(31, 3, 4)
        x = Tensor(data)
        with Tape():
            loss = sum_all(mul(x, x))
        assert np.allclose(backward(loss)[x], 2 * data)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(rand(32, 2, 2))
        with Tape():
            y = mul(x, x)
        with pytest.raises(UsageError, match="scalar"):
            backward(y)

    def test_loss_without_tape_rejected(self):
        x = Tensor(rand(33, 2, 2))
        y = sum_all(x)  # no tape active
        with pytest.raises(UsageError):
            backward(y)

    def test_tape_consumed_after_backward(self):
        x = Tensor(rand(34, 2, 2))
        with Tape() as tape:
            loss = sum_all(x)
        tape.gradients(loss)
        with pytest.raises(UsageError):
            tape.gradients(loss)

    def test_fanout_accumulates_additively(self):
        data = rand(35, 3, 3)
        x = Tensor(data)
        with Tape():
            loss = sum_all(add(mul(x, x), mul(x, x)))
        assert np.allclose(backward(loss)[x], 4 * data)

    def test_bias_gradient_sums_rows(self):
        x, b = Tensor(rand(36, 5, 3)), Tensor(rand(37, 3))
        with Tape():
            loss = sum_all(add(x, b))
        grads = backward(loss)
        assert np.array_equal(grads[b], np.full(3, 5.0))

    def test_nested_tapes_rejected(self):
        with Tape():
            with pytest.raises(UsageError):
                with Tape():
                    pass


class TestGradientOracles:
    """Central finite differences against every differentiable op."""

    def test_all_ops_pass_fd(self):
        rng = Rng(99)
        tgt = Tensor(rand(98, 4, 4))
        cases = [
            (lambda a, b: sum_all(matmul(a, b)), [rand(50, 4, 3), rand(51, 3, 4)]),
            (lambda a, b: sum_all(mul(add(a, b), add(a, b))), [rand(52, 4, 4), rand(53, 4, 4)]),
            (lambda a, b: sum_all(mul(add(a, b), add(a, b))), [rand(54, 4, 4), rand(55, 4)]),
            (lambda a, b: sum_all(mul(sub(a, b), sub(a, b))), [rand(56, 4, 4), rand(57, 4, 4)]),
            (lambda a: sum_all(scale(mul(a, a), -0.7)), [rand(58, 4, 4)]),
            (lambda a: sum_all(gelu(a)), [rand(59, 5, 5)]),
            (lambda a: sum_all(mul(relu(a), relu(a))), [rand(60, 5, 5)]),
            (lambda a: sum_all(mul(transpose(a), transpose(a))), [rand(61, 3, 5)]),
            (lambda a: mean_all(mul(a, a)), [rand(62, 4, 4)]),
            (lambda a: sum_all(mul(softmax_rows(a), tgt)), [rand(63, 4, 4)]),
            (lambda a, g, b: sum_all(mul(layer_norm(a, g, b), tgt)),
             [rand(64, 4, 4), 1.0 + 0.2 * rand(65, 4), 0.2 * rand(66, 4)]),
            (lambda a, w: sum_all(mul(conv1d(a, w, stride=2), conv1d(a, w, stride=2))),
             [rand(67, 8, 3), rand(68, 4, 3, 3)]),
            (lambda a, w: sum_all(conv1d(a, w, stride=1, groups=2)),
             [rand(69, 6, 4), rand(70, 4, 2, 2)]),
        ]
        del rng
        for fn, arrays in cases:
            check_gradients(fn, arrays)  # raises above 1e-4

    def test_tape_determinism_bit_identical(self):
        def run():
            a, b = Tensor(rand(80, 5, 5)), Tensor(rand(81, 5, 5))
            with Tape():
                loss = sum_all(mul(softmax_rows(matmul(a, b)), matmul(a, b)))
            g = backward(loss)
            return g[a].copy(), g[b].copy()

        first, second = run(), run()
        assert np.array_equal(first[0], second[0])
        assert np.array_equal(first[1], second[1])


class TestDtypeAndInvariants:
    def test_float32_preserved_through_ops(self):
        x = Tensor(rand(90, 4, 4), dtype=np.float32)
        y = softmax_rows(matmul(x, x))
        assert y.dtype == np.float32
        z = gelu(scale(y, 2.0))
        assert z.dtype == np.float32

    def test_finite_outputs_from_finite_inputs(self):
        x = Tensor(rand(91, 6, 6) * 50)
        for op in (softmax_rows, gelu, relu):
            assert np.all(np.isfinite(op(x).data))

    def test_shape_matches_data_size(self):
        x = Tensor(rand(92, 3, 7))
        assert int(np.prod(x.shape)) == x.data.size


class TestMacCounter:
    def test_matmul_and_conv_counted(self):
        with count_macs() as counter:
            matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((4, 5))))
            conv1d(Tensor(np.zeros((10, 2))), Tensor(np.zeros((6, 1, 3))), stride=2, groups=2)
        conv_out = (10 - 3) // 2 + 1
        assert counter.total == 3 * 4 * 5 + conv_out * 6 * 1 * 3

    def test_elementwise_not_counted(self):
        with count_macs() as counter:
            x = Tensor(np.ones((8, 8)))
            softmax_rows(layer_norm(mul(x, x), Tensor(np.ones(8)), Tensor(np.zeros(8))))
        assert counter.total == 0
